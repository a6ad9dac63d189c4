"""Exact numerical checks of the identities behind distribution-matching
imitation: telescoping of Bellman residuals, the finite-horizon bias term,
KL convexity under mixing, Kantorovich-Rubinstein duality for EMD, the
Donsker-Varadhan representation and the bias of mini-batch log-mean-exp
gradients.

Everything here is tabular and small, so each quantity is computed exactly
(linear solves, exhaustive enumeration, dense simplex) rather than estimated.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import linprog

from .envs import TabularMDP, _check_policy, initial_occupancy, pair_transition, random_mdp, random_tabular_policy, tabular_occupancy


class DomainError(ValueError):
    """Inputs outside the domain where a divergence or bound is defined."""


class InfeasibleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class DiscreteDistribution:
    """Probability vector over a finite support, optionally with coordinates."""

    probs: np.ndarray
    points: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or len(p) == 0:
            raise DomainError("probabilities must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise DomainError(f"probabilities must be >= 0 and sum to 1 (sum={p.sum()!r})")
        object.__setattr__(self, "probs", p)
        if self.points is not None:
            pts = np.asarray(self.points, dtype=np.float64)
            if pts.ndim == 1:
                pts = pts[:, None]
            if len(pts) != len(p):
                raise DomainError("one coordinate per support point required")
            object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.probs)

    @classmethod
    def random(cls, n: int, rng, sparsity: float = 0.0, points=None) -> DiscreteDistribution:
        """Dirichlet draw; each entry is zeroed with probability ``sparsity``
        (at least one entry always survives)."""
        p = rng.dirichlet(np.ones(n))
        if sparsity > 0:
            keep = rng.random(n) >= sparsity
            keep[rng.integers(n)] = True
            p = np.where(keep, p, 0.0)
        return cls(p / p.sum(), points)

    def mix(self, other: DiscreteDistribution, alpha: float) -> DiscreteDistribution:
        """``(1 - alpha) self + alpha other``."""
        _check_same_support(self, other)
        m = (1.0 - alpha) * self.probs + alpha * other.probs
        return DiscreteDistribution(m / m.sum(), self.points)

    def expectation(self, x) -> float:
        return float(np.dot(self.probs, np.asarray(x, dtype=np.float64)))


class FeatureFunction:
    """Real-valued function on state-action pairs, as a table or a closure.

    ``expectation(d)`` is the feature expectation under an occupancy table.
    """

    def __init__(self, fn: np.ndarray | Callable[[int, int], float]):
        self._fn = fn

    @classmethod
    def constant(cls, c: float) -> FeatureFunction:
        return cls(lambda s, a: c)

    def table(self, n_states: int, n_actions: int) -> np.ndarray:
        if callable(self._fn):
            t = np.array([[self._fn(s, a) for a in range(n_actions)] for s in range(n_states)], dtype=np.float64)
        else:
            t = np.asarray(self._fn, dtype=np.float64)
            if t.shape != (n_states, n_actions):
                raise ValueError(f"feature table has shape {t.shape}, expected {(n_states, n_actions)}")
        if not np.all(np.isfinite(t)):
            raise DomainError("feature function is not finite on the support")
        return t

    def expectation(self, d: np.ndarray) -> float:
        d = np.asarray(d)
        return float(np.sum(d * self.table(*d.shape)))


def _check_same_support(*dists: DiscreteDistribution) -> None:
    if len({len(d) for d in dists}) != 1:
        raise DomainError("distributions must share a support")


def kl_divergence(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    _check_same_support(p, q)
    on = p.probs > 0
    if np.any(q.probs[on] <= 0):
        raise DomainError("KL undefined: q vanishes where p has mass")
    return float(np.sum(p.probs[on] * np.log(p.probs[on] / q.probs[on])))


# ---------------------------------------------------------------------------
# telescoping and the finite-horizon bias


def _bellman_residual_table(mdp: TabularMDP, pi, f_table, gamma) -> np.ndarray:
    """``f(s,a) - gamma E_{s'~P, a'~pi} f(s', a')`` as an ``(S, A)`` table."""
    return f_table - gamma * (pair_transition(mdp, pi) @ f_table.ravel()).reshape(f_table.shape)


def telescoping_residual(mdp: TabularMDP, pi, f: FeatureFunction, gamma: float, backup_gamma: float | None = None) -> float:
    """``E_d[f - gamma P^pi f] - (1 - gamma) E_d0[f]`` with ``d`` the exact
    discounted occupancy. Zero up to round-off on any ergodic chain.

    ``backup_gamma`` replaces the discount inside the backup only; it exists
    to build deliberately wrong variants for negative controls.
    """
    if mdp.terminal:
        raise ValueError("terminal states present: use finite_horizon_bias for episodic chains")
    pi = _check_policy(mdp, pi)
    f_table = f.table(mdp.n_states, mdp.n_actions)
    d = tabular_occupancy(mdp, pi, gamma)
    g_backup = gamma if backup_gamma is None else backup_gamma
    lhs = float(np.sum(d * _bellman_residual_table(mdp, pi, f_table, g_backup)))
    rhs = (1.0 - gamma) * float(np.sum(initial_occupancy(mdp, pi) * f_table))
    return lhs - rhs


class HorizonIdentity(NamedTuple):
    lhs: float
    rhs: float
    gap: float
    bias: float


def finite_horizon_bias(mdp: TabularMDP, pi, f: FeatureFunction, gamma: float, T: int) -> HorizonIdentity:
    """Truncated telescoping over ``T`` steps.

    ``lhs = (1 - g) sum_{t<T} g^t E_{p_t}[f - g P^pi f]`` from forward
    propagation of the pair marginals, ``rhs = (1 - g) E_{p_0}[f] - bias`` with
    ``bias = (1 - g) g^T E_{p_T}[f]``.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    pi = _check_policy(mdp, pi)
    f_table = f.table(mdp.n_states, mdp.n_actions).ravel()
    M = pair_transition(mdp, pi)
    residual = _bellman_residual_table(mdp, pi, f_table.reshape(pi.shape), gamma).ravel()

    marginal = initial_occupancy(mdp, pi).ravel()
    p0 = marginal.copy()
    lhs = 0.0
    for t in range(T):
        lhs += gamma**t * float(marginal @ residual)
        marginal = M.T @ marginal
    lhs *= 1.0 - gamma

    # p_T through a separate route: state marginal by matrix power of the state chain
    P_pi = np.einsum("sa,sax->sx", pi, mdp.P)
    p_T_states = mdp.p0 @ np.linalg.matrix_power(P_pi, T)
    p_T = (p_T_states[:, None] * pi).ravel()
    bias = (1.0 - gamma) * gamma**T * float(p_T @ f_table)
    rhs = (1.0 - gamma) * float(p0 @ f_table) - bias
    return HorizonIdentity(lhs, rhs, lhs - rhs, bias)


# ---------------------------------------------------------------------------
# KL convexity and Donsker-Varadhan


def kl_convexity_check(p, q, r, alpha: float) -> tuple[float, float]:
    """Returns ``(KL(mix_p || mix_q), (1 - alpha) KL(p || q))`` where
    ``mix_x = (1 - alpha) x + alpha r``. The first never exceeds the second."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    _check_same_support(p, q, r)
    bound = (1.0 - alpha) * kl_divergence(p, q) if alpha < 1 else 0.0
    return kl_divergence(p.mix(r, alpha), q.mix(r, alpha)), bound


def dv_objective(x, p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """``E_p[x] - log E_q[exp(x)]``; ``x`` may be ``-inf`` off the support of ``p``."""
    _check_same_support(p, q)
    x = np.asarray(x, dtype=np.float64)
    on = p.probs > 0
    if np.any(np.isneginf(x[on])):
        return -math.inf
    shift = np.max(x[q.probs > 0])
    log_eq = shift + math.log(float(np.sum(q.probs * np.exp(x - shift))))
    return float(np.sum(p.probs[on] * x[on])) - log_eq


def dv_maximizer(p: DiscreteDistribution, q: DiscreteDistribution) -> np.ndarray:
    """``log(p / q)``, with ``-inf`` where ``p`` is zero."""
    _check_same_support(p, q)
    on = p.probs > 0
    if np.any(q.probs[on] <= 0):
        raise DomainError("q must be positive on the support of p")
    x = np.full(len(p), -np.inf)
    x[on] = np.log(p.probs[on] / q.probs[on])
    return x


def dv_representation_check(p: DiscreteDistribution, q: DiscreteDistribution) -> tuple[float, float]:
    """Returns ``(KL(p || q), DV objective at the closed-form maximizer)``."""
    x = dv_maximizer(p, q)
    return kl_divergence(p, q), dv_objective(x, p, q)


# ---------------------------------------------------------------------------
# earth mover's distance


def _pivot(T: np.ndarray, basis: list[int], row: int, col: int) -> None:
    T[row] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row and T[i, col] != 0.0:
            T[i] -= T[i, col] * T[row]
    basis[row] = col


def _simplex_iterate(T: np.ndarray, basis: list[int], n_cols: int, tol: float) -> None:
    """Bland's rule on a tableau whose last row holds reduced costs."""
    m = T.shape[0] - 1
    while True:
        entering = next((j for j in range(n_cols) if T[-1, j] < -tol), None)
        if entering is None:
            return
        col = T[:m, entering]
        rows = [i for i in range(m) if col[i] > tol]
        if not rows:
            raise InfeasibleError("linear program is unbounded")
        ratios = np.array([T[i, -1] / col[i] for i in rows])
        best = ratios.min()
        ties = [rows[k] for k in np.flatnonzero(ratios <= best + tol)]
        _pivot(T, basis, min(ties, key=lambda i: basis[i]), entering)


def simplex(c, A_eq, b_eq, tol: float = 1e-11) -> tuple[float, np.ndarray]:
    """Minimize ``c @ x`` subject to ``A_eq x = b_eq``, ``x >= 0``.

    Dense two-phase tableau method with Bland's anti-cycling rule; redundant
    equality rows are detected and dropped after phase one.
    """
    c = np.asarray(c, dtype=np.float64)
    A = np.array(A_eq, dtype=np.float64)
    b = np.array(b_eq, dtype=np.float64)
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1
    m, n = A.shape

    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n : n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    _simplex_iterate(T, basis, n + m, tol)
    if -T[-1, -1] > tol * max(1.0, b.sum()):
        raise InfeasibleError("linear program is infeasible")

    # drive zero-level artificials out of the basis; rows where that fails are redundant
    keep = []
    for i in range(m):
        if basis[i] >= n:
            candidates = np.flatnonzero(np.abs(T[i, :n]) > tol)
            if len(candidates) == 0:
                continue
            _pivot(T, basis, i, int(candidates[0]))
        keep.append(i)
    T = np.vstack([T[keep][:, list(range(n)) + [-1]], np.zeros((1, n + 1))])
    basis = [basis[i] for i in keep]

    cb = c[basis]
    T[-1, :n] = c - cb @ T[:-1, :n]
    T[-1, -1] = -cb @ T[:-1, -1]
    _simplex_iterate(T, basis, n, tol)
    x = np.zeros(n)
    x[basis] = T[:-1, -1]
    return float(c @ x), x


def _check_emd_inputs(p, q, cost) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = p.probs if isinstance(p, DiscreteDistribution) else np.asarray(p, dtype=np.float64)
    q = q.probs if isinstance(q, DiscreteDistribution) else np.asarray(q, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (len(p), len(q)) or len(p) != len(q):
        raise DomainError(f"cost must be square over a shared support, got {cost.shape} for sizes {len(p)}, {len(q)}")
    if np.any(cost < 0) or not np.all(np.isfinite(cost)):
        raise DomainError("cost must be finite and non-negative")
    if np.any(p < 0) or np.any(q < 0) or abs(p.sum() - q.sum()) > 1e-12:
        raise InfeasibleError("marginals must be non-negative with equal total mass")
    return p, q, cost


def transport_constraints(n: int, m: int) -> np.ndarray:
    """Row and column sum constraints for an ``n x m`` plan flattened row-major."""
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        A[n + j, j::m] = 1.0
    return A


def emd_primal(p, q, cost) -> float:
    """Optimal transport cost between ``p`` and ``q`` by exact simplex."""
    p, q, cost = _check_emd_inputs(p, q, cost)
    if len(p) > 16:
        raise DomainError("dense simplex is limited to supports of at most 16 points")
    value, _ = simplex(cost.ravel(), transport_constraints(len(p), len(q)), np.concatenate([p, q]))
    return value


def emd_dual(p, q, cost, tol: float = 1e-9) -> tuple[float, np.ndarray]:
    """``max sum f (p - q)`` over ``|f(i) - f(j)| <= cost(i, j)``.

    The returned witness is canonical: among optimal potentials, the
    non-negative one with the smallest total.
    """
    p, q, cost = _check_emd_inputs(p, q, cost)
    n = len(p)
    rows, rhs = [], []
    for i in range(n):
        for j in range(n):
            if i != j:
                row = np.zeros(n)
                row[i], row[j] = 1.0, -1.0
                rows.append(row)
                rhs.append(cost[i, j])
    A = np.array(rows).reshape(-1, n)
    b = np.array(rhs)
    diff = p - q
    first = linprog(-diff, A_ub=A, b_ub=b, bounds=[(0, None)] * n, method="highs")
    if first.status != 0:
        raise InfeasibleError(f"dual LP failed: {first.message}")
    value = -first.fun
    # second stage: smallest non-negative optimal potential
    second = linprog(
        np.ones(n),
        A_ub=np.vstack([A, -diff]) if n > 1 else -diff[None],
        b_ub=np.concatenate([b, [-(value - tol * max(1.0, abs(value)))]]),
        bounds=[(0, None)] * n,
        method="highs",
    )
    witness = second.x if second.status == 0 else first.x
    return float(value) + 0.0, np.asarray(witness)


def emd_1d(points, p, q) -> float:
    """``integral |F_p - F_q|`` for distributions on the real line."""
    points = np.asarray(points, dtype=np.float64).ravel()
    order = np.argsort(points, kind="stable")
    x = points[order]
    Fp = np.cumsum(np.asarray(p, dtype=np.float64)[order])
    Fq = np.cumsum(np.asarray(q, dtype=np.float64)[order])
    return float(np.sum(np.abs(Fp - Fq)[:-1] * np.diff(x)))


def distance_matrix(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    return np.sqrt(np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1))


def lipschitz_violation(f, cost) -> float:
    """Largest ``|f(i) - f(j)| - cost(i, j)``; non-positive when ``f`` is feasible."""
    f = np.asarray(f)
    return float(np.max(np.abs(f[:, None] - f[None, :]) - cost))


# ---------------------------------------------------------------------------
# mini-batch gradient bias


class BiasResult(NamedTuple):
    full_gradient: float
    expected_minibatch_gradient: float
    bias: float


def minibatch_bias(theta: float, m: int, objective: str = "logexp") -> BiasResult:
    """Exact bias of mini-batch gradients on the uniform two-point family.

    With ``x`` uniform on ``{0, 1}``, ``objective="logexp"`` uses
    ``L(theta) = -log E[exp(theta x)]`` and ``"linear"`` uses
    ``L(theta) = -E[theta x]``. The expected mini-batch gradient averages the
    plug-in gradient over all ``2**m`` equally likely batches.
    """
    if not 1 <= m <= 12:
        raise ValueError(f"enumeration needs 1 <= m <= 12, got {m}")
    if objective == "logexp":
        full = -math.exp(theta) / (1.0 + math.exp(theta))

        def batch_grad(xs):
            w = np.exp(theta * xs)
            return -float(np.sum(xs * w) / np.sum(w))
    elif objective == "linear":
        full = -0.5

        def batch_grad(xs):
            return -float(np.mean(xs))
    else:
        raise ValueError(f"unknown objective {objective!r}")
    total = math.fsum(batch_grad(np.array(b, dtype=np.float64)) for b in itertools.product((0, 1), repeat=m))
    expected = total / 2**m
    return BiasResult(full, expected, expected - full)


# ---------------------------------------------------------------------------
# verification suite


@dataclass
class VerifyRow:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _random_feature(rng, S, A) -> FeatureFunction:
    return FeatureFunction(rng.uniform(-1.0, 1.0, size=(S, A)))


def check_telescoping(seed=0, n_trials=100, fault=None) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        S, A = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        mdp = random_mdp(S, A, rng)
        pi = random_tabular_policy(S, A, rng)
        gamma = float(rng.uniform(0.0, 0.99))
        backup = gamma**2 if fault == "gamma" else None
        worst = max(worst, abs(telescoping_residual(mdp, pi, _random_feature(rng, S, A), gamma, backup)))
    return worst < 1e-10, f"max |residual| = {worst:.2e} over {n_trials} MDPs"


def check_finite_horizon(seed=0, n_trials=100) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        S, A = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        mdp = random_mdp(S, A, rng)
        pi = random_tabular_policy(S, A, rng)
        res = finite_horizon_bias(mdp, pi, _random_feature(rng, S, A), float(rng.uniform(0.0, 0.99)), int(rng.integers(1, 30)))
        worst = max(worst, abs(res.gap))
    return worst < 1e-10, f"max |lhs - rhs| = {worst:.2e} over {n_trials} chains"


def check_kl_convexity(seed=0, n_trials=1000) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    violations, strict, eligible = 0, 0, 0
    worst = -math.inf
    for _ in range(n_trials):
        q = DiscreteDistribution.random(8, rng)
        p = DiscreteDistribution.random(8, rng, sparsity=0.2)
        r = DiscreteDistribution.random(8, rng, sparsity=0.2)
        alpha = float(rng.uniform())
        mixed, bound = kl_convexity_check(p, q, r, alpha)
        worst = max(worst, mixed - bound)
        violations += mixed > bound + 1e-12
        if 0 < alpha < 1 and not np.allclose(p.probs, q.probs):
            eligible += 1
            strict += mixed < bound
    frac = strict / max(eligible, 1)
    return violations == 0 and frac >= 0.99, f"violations {violations}/{n_trials}, strict {frac:.1%}, max excess {worst:.2e}"


def random_metric_instance(rng, n_max=8):
    n = int(rng.integers(2, n_max + 1))
    pts = rng.normal(size=(n, 2))
    return (
        DiscreteDistribution.random(n, rng, sparsity=0.25, points=pts),
        DiscreteDistribution.random(n, rng, sparsity=0.25, points=pts),
        distance_matrix(pts),
    )


def check_emd_duality(seed=0, n_trials=50) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_gap, worst_lip = 0.0, -math.inf
    for _ in range(n_trials):
        p, q, cost = random_metric_instance(rng)
        primal = emd_primal(p, q, cost)
        dual, f = emd_dual(p, q, cost)
        worst_gap = max(worst_gap, abs(primal - dual))
        worst_lip = max(worst_lip, lipschitz_violation(f, cost))
    ok = worst_gap < 1e-6 and worst_lip < 1e-9
    return ok, f"max |primal - dual| = {worst_gap:.2e}, max Lipschitz excess = {worst_lip:.1e}"


def check_emd_1d(seed=0, n_trials=50) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        n = int(rng.integers(2, 10))
        x = rng.uniform(-2, 2, size=n)
        p, q = DiscreteDistribution.random(n, rng, 0.3), DiscreteDistribution.random(n, rng, 0.3)
        worst = max(worst, abs(emd_primal(p, q, distance_matrix(x)) - emd_1d(x, p.probs, q.probs)))
    return worst < 1e-9, f"max |simplex - CDF formula| = {worst:.2e}"


def check_dv(seed=0, n_trials=100) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_gap, worst_excess = 0.0, -math.inf
    for _ in range(n_trials):
        p, q = DiscreteDistribution.random(6, rng, sparsity=0.2), DiscreteDistribution.random(6, rng)
        kl, dv = dv_representation_check(p, q)
        worst_gap = max(worst_gap, abs(kl - dv))
        worst_excess = max(worst_excess, dv_objective(rng.normal(scale=2.0, size=6), p, q) - kl)
    ok = worst_gap < 1e-8 and worst_excess <= 1e-12
    return ok, f"max |KL - DV(x*)| = {worst_gap:.2e}, max DV(x) - KL = {worst_excess:.2e}"


def check_minibatch_bias() -> tuple[bool, str]:
    at_one = minibatch_bias(1.0, 1).bias
    target = math.e / (1.0 + math.e) - 0.5
    biases = [minibatch_bias(1.0, m).bias for m in (1, 2, 4, 8)]
    decreasing = all(a > b for a, b in zip(biases, biases[1:]))
    ok = abs(at_one - target) < 1e-9 and decreasing and biases[-1] > 0
    return ok, "bias(m=1,2,4,8) = " + ", ".join(f"{b:.5f}" for b in biases)


CHECKS: dict[str, Callable[..., tuple[bool, str]]] = {
    "telescoping": check_telescoping,
    "finite_horizon": check_finite_horizon,
    "kl_convexity": check_kl_convexity,
    "emd_duality": check_emd_duality,
    "emd_1d": check_emd_1d,
    "dv_representation": check_dv,
    "minibatch_bias": check_minibatch_bias,
}


def run_verification(only: list[str] | None = None, fault: str | None = None) -> list[VerifyRow]:
    """Runs the selected checks; ``fault="gamma"`` corrupts the telescoping
    backup so that its row must fail."""
    names = list(CHECKS) if not only else only
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; available: {sorted(CHECKS)}")
    rows = []
    for name in names:
        start = time.perf_counter()
        ok, detail = CHECKS[name](fault=fault) if name == "telescoping" else CHECKS[name]()
        rows.append(VerifyRow(name, bool(ok), detail, time.perf_counter() - start))
    return rows


def format_table(rows: list[VerifyRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  result  time    detail"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:5.2f}s  {r.detail}")
    return "\n".join(lines)
