"""Toy continuous-control environments, expert controllers, demonstrations and
exact tabular MDPs.

Environments expose dynamics through :meth:`ContinuousEnv.step`, which returns
only ``(next_state, done)``.  Rewards live behind :meth:`ContinuousEnv.reward`
and are read by :func:`evaluate_policy` and demo generation, never by trainers.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EnvContractError(RuntimeError):
    pass


class ContinuousEnv:
    """Episodic environment with actions in ``[-1, 1]^action_dim``."""

    state_dim: int
    action_dim: int
    horizon: int

    def __init__(self):
        self.step_count = 0  # lifetime env.step() calls, for instrumentation
        self._state = None
        self._t = 0
        self._done = True

    def sample_initial_state(self, rng) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, state, action) -> np.ndarray:
        raise NotImplementedError

    def is_terminal(self, next_state, t: int) -> bool:
        return t >= self.horizon

    def reward(self, state, action, next_state) -> float:
        raise NotImplementedError

    @property
    def state(self) -> np.ndarray:
        return self._state.copy()

    def reset(self, rng=None, state=None) -> np.ndarray:
        if state is None:
            state = self.sample_initial_state(np.random.default_rng(rng))
        self._state = np.asarray(state, dtype=np.float64).copy()
        self._t = 0
        self._done = False
        return self.state

    def step(self, action) -> tuple[np.ndarray, int]:
        if self._done:
            raise EnvContractError("step() called on a terminated episode; call reset() first")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.action_dim), -1.0, 1.0)
        self.step_count += 1
        self._t += 1
        self._state = self.dynamics(self._state, a)
        self._done = self.is_terminal(self._state, self._t)
        return self.state, int(self._done)


class PointMass2D(ContinuousEnv):
    """Point mass in the plane driven toward a fixed goal.

    ``s' = s + dt * a``; the episode ends when the mass is within
    ``goal_radius`` of the goal or after ``horizon`` steps.  Starts are drawn
    uniformly from a square of half-width ``start_spread`` around
    ``start_center``.
    """

    state_dim = 2
    action_dim = 2

    def __init__(self, goal=(0.0, 0.0), dt=0.05, goal_radius=0.05, horizon=100, start_center=(0.8, 0.0), start_spread=0.1):
        super().__init__()
        self.goal = np.asarray(goal, dtype=np.float64)
        self.dt, self.goal_radius, self.horizon = dt, goal_radius, horizon
        self.start_center = np.asarray(start_center, dtype=np.float64)
        self.start_spread = start_spread

    def sample_initial_state(self, rng):
        return self.start_center + rng.uniform(-self.start_spread, self.start_spread, size=2)

    def dynamics(self, state, action):
        return state + self.dt * action

    def is_terminal(self, next_state, t):
        return bool(np.linalg.norm(next_state - self.goal) < self.goal_radius or t >= self.horizon)

    def reward(self, state, action, next_state):
        return -float(np.linalg.norm(next_state - self.goal))


class Pendulum1D(ContinuousEnv):
    """Torque-limited pendulum with angle 0 upright; state ``(angle, velocity)``."""

    state_dim = 2
    action_dim = 1
    g, m, l, dt = 10.0, 1.0, 1.0, 0.05
    max_torque, max_speed = 2.0, 8.0

    def __init__(self, horizon=200):
        super().__init__()
        self.horizon = horizon

    def sample_initial_state(self, rng):
        return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])

    def dynamics(self, state, action):
        th, thdot = state
        u = self.max_torque * float(action[0])
        thdot = thdot + (3.0 * self.g / (2.0 * self.l) * math.sin(th) + 3.0 / (self.m * self.l**2) * u) * self.dt
        thdot = min(max(thdot, -self.max_speed), self.max_speed)
        return np.array([wrap_angle(th + thdot * self.dt), thdot])

    def reward(self, state, action, next_state):
        th, thdot = state
        u = self.max_torque * float(np.clip(action, -1, 1)[0])
        return -(wrap_angle(th) ** 2 + 0.1 * thdot**2 + 0.001 * u**2)


class Bandit1D(ContinuousEnv):
    """Single-state, single-step task: the target action is ``target``."""

    state_dim = 1
    action_dim = 1
    horizon = 1

    def __init__(self, target=0.3):
        super().__init__()
        self.target = target

    def sample_initial_state(self, rng):
        return np.zeros(1)

    def dynamics(self, state, action):
        return state.copy()

    def reward(self, state, action, next_state):
        return -float((np.clip(action, -1, 1)[0] - self.target) ** 2)


def wrap_angle(x: float) -> float:
    """Map an angle into (-pi, pi]."""
    y = math.fmod(x + math.pi, 2.0 * math.pi)
    if y <= 0.0:
        y += 2.0 * math.pi
    return y - math.pi


ENVS = {"point_mass": PointMass2D, "pendulum": Pendulum1D, "bandit": Bandit1D}


def make_env(name: str, **kwargs) -> ContinuousEnv:
    try:
        return ENVS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown env '{name}'; choose from {sorted(ENVS)}") from None


# ---------------------------------------------------------------------------
# experts


class PointMassExpert:
    """Proportional controller ``clip(gain * (goal - s))``."""

    def __init__(self, goal=(0.0, 0.0), gain=1.0):
        self.goal = np.asarray(goal, dtype=np.float64)
        self.gain = gain

    def act(self, states, rng=None, deterministic=True):
        s = np.atleast_2d(states)
        return np.clip(self.gain * (self.goal - s), -1.0, 1.0)


class PendulumExpert:
    """Energy-pumping swing-up with a PD balance controller near the top."""

    kick_torque = 1.0  # breaks the rest equilibrium at the bottom

    def __init__(self, k_energy=0.5, kp=10.0, kd=2.0, switch_angle=0.4):
        self.k_energy, self.kp, self.kd, self.switch_angle = k_energy, kp, kd, switch_angle

    def _torque(self, th, thdot):
        if abs(th) < self.switch_angle and abs(thdot) < 3.0:
            return -(self.kp * th + self.kd * thdot)
        # E = 0 upright at rest; dE/dt = 3 * u * thdot for this pendulum.
        energy = 0.5 * thdot**2 + 15.0 * (math.cos(th) - 1.0)
        if abs(thdot) < 1e-3:
            return self.kick_torque
        return -self.k_energy * energy * thdot

    def act(self, states, rng=None, deterministic=True):
        s = np.atleast_2d(states)
        u = np.array([[self._torque(th, thdot)] for th, thdot in s])
        return np.clip(u / Pendulum1D.max_torque, -1.0, 1.0)


class BanditExpert:
    def __init__(self, target=0.3):
        self.target = target

    def act(self, states, rng=None, deterministic=True):
        return np.full((np.atleast_2d(states).shape[0], 1), self.target)


EXPERTS = {"point_mass": PointMassExpert, "pendulum": PendulumExpert, "bandit": BanditExpert}
DEFAULT_DEMO_NOISE = {"point_mass": 0.0, "pendulum": 0.05, "bandit": 0.0}


def make_expert(name: str):
    return EXPERTS[name]()


# ---------------------------------------------------------------------------
# demonstrations


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    e: int


@dataclass
class Trajectory:
    traj_id: int
    transitions: list[Transition] = field(default_factory=list)
    ret: float = 0.0
    reached_goal: bool = True

    def __len__(self):
        return len(self.transitions)


def generate_demos(env: ContinuousEnv, expert, n_trajectories: int, noise_scale: float = 0.0, seed: int = 0) -> list[Trajectory]:
    """Roll out ``expert`` for complete episodes; deterministic given ``seed``.

    Point-mass episodes that hit the horizon before the goal are kept (the
    horizon step carries ``e=1``) and flagged with ``reached_goal=False``.
    """
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    trajs = []
    for i, ss in enumerate(np.random.default_rng(seed).bit_generator.seed_seq.spawn(n_trajectories)):
        rng = np.random.default_rng(ss)
        traj = Trajectory(traj_id=i)
        s = env.reset(rng)
        while True:
            a = expert.act(s)[0]
            if noise_scale > 0:
                a = a + noise_scale * rng.standard_normal(a.shape)
            a = np.clip(a, -1.0, 1.0)
            s_next, e = env.step(a)
            traj.ret += env.reward(s, a, s_next)
            traj.transitions.append(Transition(s, a, s_next, e))
            s = s_next
            if e:
                break
        if isinstance(env, PointMass2D) and np.linalg.norm(s - env.goal) >= env.goal_radius:
            traj.reached_goal = False
            warnings.warn(f"expert trajectory {i} hit the horizon before reaching the goal")
        trajs.append(traj)
    return trajs


def save_demos(path, trajectories: list[Trajectory]) -> None:
    with open(path, "w") as fh:
        for traj in trajectories:
            for t, tr in enumerate(traj.transitions):
                rec = {
                    "traj": traj.traj_id,
                    "t": t,
                    "s": tr.s.tolist(),
                    "a": tr.a.tolist(),
                    "s_next": tr.s_next.tolist(),
                    "e": int(tr.e),
                }
                fh.write(json.dumps(rec) + "\n")


def load_demos(path) -> list[Trajectory]:
    by_id: dict[int, Trajectory] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        traj = by_id.setdefault(rec["traj"], Trajectory(traj_id=rec["traj"]))
        if rec["t"] != len(traj.transitions):
            raise ValueError(f"{path}:{lineno}: transitions of trajectory {rec['traj']} are out of order")
        traj.transitions.append(
            Transition(
                np.asarray(rec["s"], dtype=np.float64),
                np.asarray(rec["a"], dtype=np.float64),
                np.asarray(rec["s_next"], dtype=np.float64),
                int(rec["e"]),
            )
        )
    return list(by_id.values())


def select_trajectories(trajectories: list[Trajectory], n: int, seed: int) -> list[Trajectory]:
    """Random subset of ``n`` trajectories, in their original order."""
    if not 1 <= n <= len(trajectories):
        raise ValueError(f"cannot select {n} of {len(trajectories)} trajectories")
    idx = np.sort(np.random.default_rng(seed).choice(len(trajectories), size=n, replace=False))
    return [trajectories[i] for i in idx]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    mean: float
    std: float
    returns: np.ndarray

    @property
    def stderr(self) -> float:
        return self.std / math.sqrt(len(self.returns))


def evaluate_policy(env: ContinuousEnv, policy, n_episodes: int, seed: int = 0, deterministic: bool = True) -> EvalResult:
    """Mean and std of undiscounted episode returns.

    ``policy`` is anything with ``act(states, rng, deterministic)``.
    """
    if n_episodes < 1:
        raise ValueError("empty evaluation: n_episodes must be >= 1")
    if getattr(policy, "action_dim", env.action_dim) != env.action_dim:
        raise ValueError(f"policy action dim {policy.action_dim} != env action dim {env.action_dim}")
    returns = []
    for ss in np.random.default_rng(seed).bit_generator.seed_seq.spawn(n_episodes):
        rng = np.random.default_rng(ss)
        s = env.reset(rng)
        total, done = 0.0, 0
        while not done:
            a = policy.act(s[None, :], rng, deterministic)[0]
            s_next, done = env.step(a)
            total += env.reward(s, a, s_next)
            s = s_next
        returns.append(total)
    returns = np.asarray(returns)
    return EvalResult(float(returns.mean()), float(returns.std()), returns)


# Frozen reference lines: evaluate_policy(PointMass2D(), ..., 100 episodes, seed=0).
EXPERT_RETURN = {"point_mass": -14.265894605450747}
RANDOM_RETURN = {"point_mass": -82.93497794873478}


def normalized_score(ret: float, env_name: str = "point_mass") -> float:
    """0 for the uniform-random policy, 1 for the expert."""
    lo, hi = RANDOM_RETURN[env_name], EXPERT_RETURN[env_name]
    return (ret - lo) / (hi - lo)


class UniformRandomPolicy:
    def __init__(self, action_dim):
        self.action_dim = action_dim

    def act(self, states, rng=None, deterministic=False):
        n = np.atleast_2d(states).shape[0]
        return np.random.default_rng(rng).uniform(-1.0, 1.0, size=(n, self.action_dim))


# ---------------------------------------------------------------------------
# tabular MDPs


@dataclass
class TabularMDP:
    """Finite MDP with kernel ``P[s, a, s']`` and initial distribution ``p0``."""

    P: np.ndarray
    p0: np.ndarray
    terminal: frozenset = frozenset()

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.p0 = np.asarray(self.p0, dtype=np.float64)
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise ValueError(f"P must have shape (S, A, S), got {self.P.shape}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("every P(.|s,a) must be a probability vector")
        if self.p0.shape != (self.n_states,) or np.any(self.p0 < 0) or abs(self.p0.sum() - 1.0) > 1e-12:
            raise ValueError("p0 must be a probability vector over states")
        self.terminal = frozenset(self.terminal)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def random_mdp(n_states: int, n_actions: int, rng) -> TabularMDP:
    """Dense random MDP; every transition probability is positive, so every
    policy induces an ergodic chain."""
    rng = np.random.default_rng(rng)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P /= P.sum(axis=2, keepdims=True)
    p0 = rng.dirichlet(np.ones(n_states))
    p0 /= p0.sum()
    return TabularMDP(P, p0)


def random_tabular_policy(n_states: int, n_actions: int, rng) -> np.ndarray:
    pi = np.random.default_rng(rng).dirichlet(np.ones(n_actions), size=n_states)
    return pi / pi.sum(axis=1, keepdims=True)


def _check_policy(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (mdp.n_states, mdp.n_actions) or np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1)) > 1e-10:
        raise ValueError("policy must be a row-stochastic (S, A) table")
    return pi


def initial_occupancy(mdp: TabularMDP, pi) -> np.ndarray:
    """``d0(s, a) = p0(s) * pi(a|s)``."""
    return mdp.p0[:, None] * _check_policy(mdp, pi)


def pair_transition(mdp: TabularMDP, pi) -> np.ndarray:
    """``M[(s,a), (s',a')] = P(s'|s,a) * pi(a'|s')`` flattened over pairs."""
    pi = _check_policy(mdp, pi)
    S, A = pi.shape
    return (mdp.P[:, :, :, None] * pi[None, None, :, :]).reshape(S * A, S * A)


def tabular_occupancy(mdp: TabularMDP, pi, gamma: float) -> np.ndarray:
    """Normalized discounted state-action occupancy, shape ``(S, A)``.

    Solves ``d = (1 - gamma) d0 + gamma M^T d`` exactly.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    d0 = initial_occupancy(mdp, pi).ravel()
    M = pair_transition(mdp, pi)
    A = np.eye(len(d0)) - gamma * M.T
    try:
        d = np.linalg.solve(A, (1.0 - gamma) * d0)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(f"occupancy system is singular: {exc}") from exc
    return d.reshape(mdp.n_states, mdp.n_actions)


def stationarity_residual(mdp: TabularMDP, pi, d, gamma: float) -> float:
    """Max violation of ``d(s',a') = (1-g) d0(s',a') + g sum pi(a'|s') P(s'|s,a) d(s,a)``."""
    d = np.asarray(d)
    rhs = (1.0 - gamma) * initial_occupancy(mdp, pi).ravel() + gamma * pair_transition(mdp, pi).T @ d.ravel()
    return float(np.max(np.abs(d.ravel() - rhs)))


def feasibility_residual(mdp: TabularMDP, d, gamma: float) -> float:
    """Max violation of the state-marginal affine constraint defining valid occupancies."""
    d = np.asarray(d)
    inflow = np.einsum("xay,xa->y", mdp.P, d)
    return float(np.max(np.abs(d.sum(axis=1) - ((1.0 - gamma) * mdp.p0 + gamma * inflow))))


def policy_from_occupancy(d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    return d / d.sum(axis=1, keepdims=True)
