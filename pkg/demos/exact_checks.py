"""Walk through the exact checks on small instances, printing each quantity.

    python3 demos/exact_checks.py
"""

import math

import numpy as np

from dicekit import analysis
from dicekit.analysis import DiscreteDistribution, FeatureFunction
from dicekit.envs import random_mdp, random_tabular_policy, tabular_occupancy


def telescoping(rng):
    mdp, pi = random_mdp(4, 2, rng), random_tabular_policy(4, 2, rng)
    f = FeatureFunction(rng.uniform(-1, 1, (4, 2)))
    d = tabular_occupancy(mdp, pi, 0.9)
    print("occupancy of a random 4-state, 2-action chain (gamma 0.9):")
    print(np.array2string(d, precision=4))
    print(f"  telescoping residual       {analysis.telescoping_residual(mdp, pi, f, 0.9):+.2e}")
    print(f"  same with backup gamma 0.8 {analysis.telescoping_residual(mdp, pi, f, 0.9, backup_gamma=0.8):+.2e}")
    for T in (1, 5, 20, 100):
        res = analysis.finite_horizon_bias(mdp, pi, f, 0.9, T)
        print(f"  horizon {T:>3}: bias {res.bias:+.6f}   identity gap {res.gap:+.1e}")


def kl_and_dv(rng):
    p, q, r = (DiscreteDistribution.random(8, rng) for _ in range(3))
    print("\nmixing both arguments with a shared r only shrinks KL:")
    for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
        mixed, bound = analysis.kl_convexity_check(p, q, r, alpha)
        print(f"  alpha {alpha:.2f}: KL(mix) {mixed:.5f} <= (1-alpha) KL {bound:.5f}")
    kl, dv = analysis.dv_representation_check(p, q)
    print(f"variational form at log(p/q): {dv:.12f} vs KL {kl:.12f}")


def emd(rng):
    p, q, cost = analysis.random_metric_instance(rng)
    primal = analysis.emd_primal(p, q, cost)
    dual, f = analysis.emd_dual(p, q, cost)
    print(f"\nEMD on {len(p)} points: simplex primal {primal:.9f}, LP dual {dual:.9f}")
    print(f"  witness {np.array2string(f, precision=3)}; worst Lipschitz slack {analysis.lipschitz_violation(f, cost):+.1e}")


def minibatch():
    print("\n-log E[exp(theta x)] on x uniform in {0, 1}, theta = 1:")
    print(f"  full gradient {-math.e / (1 + math.e):+.6f}")
    for m in (1, 2, 4, 8, 12):
        res = analysis.minibatch_bias(1.0, m)
        lin = analysis.minibatch_bias(1.0, m, objective="linear")
        print(f"  batch {m:>2}: expected mini-batch gradient {res.expected_minibatch_gradient:+.6f}  bias {res.bias:+.6f}  (linear control {lin.bias:+.1e})")


if __name__ == "__main__":
    rng = np.random.default_rng(0)
    telescoping(rng)
    kl_and_dv(rng)
    emd(rng)
    minibatch()
