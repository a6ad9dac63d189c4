"""SoftDICE and BC from a single point-mass demonstration.

    python3 demos/one_demo_imitation.py --iterations 3000

Prints normalized scores (0 = uniform random policy, 1 = scripted expert) at
every evaluation. The acceptance protocol uses 10,000 steps and three seeds;
the defaults here are shorter so the script finishes in a couple of minutes.
"""

import argparse

from dicekit.baselines import BCConfig, bc_train
from dicekit.envs import PointMass2D, PointMassExpert, generate_demos, normalized_score, select_trajectories
from dicekit.replay import DemoBuffer
from dicekit.softdice import SoftDiceConfig, train


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--iterations", type=int, default=3000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-traj", type=int, default=1)
    args = parser.parse_args()

    trajs = select_trajectories(generate_demos(PointMass2D(), PointMassExpert(), 10, seed=0), args.n_traj, args.seed)
    demo = DemoBuffer(trajs)
    print(f"{len(trajs)} demonstration(s), {len(demo)} transitions")

    common = dict(hidden=(64, 64), batch_size=128, iterations=args.iterations, eval_interval=max(1, args.iterations // 4), eval_episodes=20, seed=args.seed, lr_policy=1e-3)
    runs = {
        "softdice": lambda: train(SoftDiceConfig(**common), demo, PointMass2D()),
        "bc": lambda: bc_train(BCConfig(**common), demo, PointMass2D()),
    }
    for name, fn in runs.items():
        policy, metrics = fn()
        curve = "  ".join(f"{r['step']}:{normalized_score(r['eval_return_mean']):.3f}" for r in metrics.evaluations())
        print(f"{name:>8}  {curve}   entropy {metrics.rows[-1]['policy_entropy']:.3f}")


if __name__ == "__main__":
    main()
