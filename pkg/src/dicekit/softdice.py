"""SoftDICE: offline imitation by entropy-regularized Earth-Mover matching.

Each step samples expert transitions and virtual initial states from the
demonstration buffer and builds three losses:

* ``J_E``  = mean[f(s, a) - gamma (1 - e) f(s', a') + beta log pi(a'|s')],  a' ~ pi(.|s')
* ``J_pi`` = (1 - gamma) mean[f(s0, a0)],  a0 ~ pi(.|s0)
* ``J_GP`` = mean[(||grad_(s,a) f(s, a)|| - 1)^2] on expert pairs

The policy descends ``J_E - J_pi``; the critic ascends ``J_E - J_pi - lambda J_GP``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .envs import ContinuousEnv, evaluate_policy
from .nets import Adam, CriticF, TanhGaussianPolicy
from .replay import DemoBuffer, OnlineBuffer, mix_sample

METRIC_COLUMNS = ["step", "j_e", "j_pi", "j_gp", "policy_entropy", "eval_return_mean", "eval_return_std"]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, loss: str, sample_index: int, cause: Exception | None = None):
        where = f"sample {sample_index}" if sample_index >= 0 else "unknown sample"
        super().__init__(f"non-finite {loss} at {where}" + (f" ({cause})" if cause else ""))
        self.sample_index = sample_index


class TrainingDivergedError(RuntimeError):
    """Training produced non-finite parameters; ``metrics`` holds the log so far."""

    def __init__(self, message: str, metrics: MetricsLog):
        super().__init__(message)
        self.metrics = metrics


@dataclass
class SoftDiceConfig:
    gamma: float = 0.99
    beta: float = 0.01
    gp_lambda: float = 10.0
    lr_critic: float = 1e-3
    lr_policy: float = 1e-5
    batch_size: int = 256
    iterations: int = 100_000
    eval_interval: int = 5_000  # 0 disables evaluation
    eval_episodes: int = 10
    seed: int = 0
    hidden: tuple = (256, 256)
    log_std_init: float = 0.0
    ortho_reg: float = 0.0
    log_interval: int = 1
    online: bool = False
    alpha: float = 0.1
    rollout_every: int = 5
    online_capacity: int = 100_000

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.beta < 0 or self.gp_lambda < 0:
            raise ValueError("beta and gp_lambda must be non-negative")
        if self.lr_critic < 0 or self.lr_policy < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1 or self.iterations < 0 or self.eval_interval < 0 or self.log_interval < 1:
            raise ValueError("batch_size/log_interval must be >= 1; iterations/eval_interval >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @classmethod
    def from_dict(cls, d: dict):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown {cls.__name__} fields: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


def build_models(state_dim: int, action_dim: int, hidden, seed: int, log_std_init: float = 0.0):
    """Policy and critic initialized from ``seed`` alone, so every trainer that
    shares a seed starts from identical networks."""
    pol_ss, crit_ss = np.random.SeedSequence([seed, 1]).spawn(2)
    policy = TanhGaussianPolicy(state_dim, action_dim, hidden, np.random.default_rng(pol_ss), log_std_init)
    critic = CriticF(state_dim, action_dim, hidden, np.random.default_rng(crit_ss))
    return policy, critic


def run_streams(seed: int):
    """Sampling and evaluation RNG streams for a run."""
    sample_ss, eval_ss = np.random.SeedSequence([seed, 2]).spawn(2)
    return np.random.default_rng(sample_ss), int(eval_ss.generate_state(1)[0])


class MetricsLog:
    def __init__(self):
        self.rows: list[dict] = []

    def append(self, row: dict) -> None:
        self.rows.append({k: row.get(k) for k in METRIC_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def evaluations(self) -> list[dict]:
        return [r for r in self.rows if r["eval_return_mean"] is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow(["" if r[k] is None else (r[k] if k == "step" else repr(float(r[k]))) for k in METRIC_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


# ---------------------------------------------------------------------------
# losses


def _locate_nonfinite(*arrays) -> int:
    bad = np.zeros(len(arrays[0]), dtype=bool)
    for arr in arrays:
        with np.errstate(all="ignore"):
            bad |= ~np.isfinite(np.asarray(arr, dtype=np.float64).reshape(len(bad), -1)).all(axis=1)
    idx = np.flatnonzero(bad)
    return int(idx[0]) if idx.size else -1


def loss_expert(critic: CriticF, policy: TanhGaussianPolicy, batch, gamma: float, beta: float, rng=None, noise=None, f_sa=None):
    """``J_E`` node and the per-sample ``log pi(a'|s')`` node.

    A single draw ``a'`` feeds both the bootstrap term and the entropy term.
    ``f_sa`` may carry an already built ``f(s, a)`` node for the batch.
    """
    s, a, s_next, e = batch[:4]
    if len(s) == 0:
        raise ValueError("expert batch is empty")
    try:
        a_next, logp = policy.sample(s_next, rng, noise)
        if f_sa is None:
            f_sa = critic(s, a)
        terms = f_sa - (gamma * (1.0 - np.asarray(e))) * critic(s_next, a_next) + beta * logp
        return dc.mean(terms), logp
    except dc.NumericalOverflowError as exc:
        raise NonFiniteLossError("J_E", _locate_nonfinite(s, a, s_next, e, critic.value(s, a)), exc) from exc


def loss_initial(critic: CriticF, policy: TanhGaussianPolicy, s0, gamma: float, rng=None, noise=None) -> Node:
    """``J_pi = (1 - gamma) mean f(s0, a0)``."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if len(s0) == 0:
        raise ValueError("initial-state batch is empty")
    try:
        a0, _ = policy.sample(s0, rng, noise)
        return (1.0 - gamma) * dc.mean(critic(s0, a0))
    except dc.NumericalOverflowError as exc:
        raise NonFiniteLossError("J_pi", _locate_nonfinite(s0), exc) from exc


def gradient_penalty(critic: CriticF, states, actions, return_values: bool = False):
    """``mean[(||grad_(s,a) f(s,a)||_2 - 1)^2]``, differentiable in the critic's parameters.

    With ``return_values`` also returns the ``f(s, a)`` node from the same forward pass.
    """
    x = np.concatenate([states, actions], axis=1)
    f_sa, g = dc.input_gradient(critic.apply_joint, x, return_output=True)
    penalty = dc.mean(dc.square(dc.l2norm(g, axis=1) - 1.0))
    return (penalty, f_sa) if return_values else penalty


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    policy: TanhGaussianPolicy
    critic: CriticF
    policy_opt: Adam
    critic_opt: Adam
    rng: np.random.Generator
    eval_seed: int
    step: int = 0
    online: OnlineBuffer | None = None
    extras: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config, state_dim: int, action_dim: int) -> TrainState:
        policy, critic = build_models(state_dim, action_dim, config.hidden, config.seed, config.log_std_init)
        rng, eval_seed = run_streams(config.seed)
        return cls(
            policy,
            critic,
            Adam(policy.parameters(), config.lr_policy),
            Adam(critic.parameters(), getattr(config, "lr_critic", 0.0)),
            rng,
            eval_seed,
        )


def _grad_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def _check_params(state: TrainState, metrics: MetricsLog) -> None:
    for name, p in {**state.policy.named_parameters(), **state.critic.named_parameters()}.items():
        if not np.all(np.isfinite(p.value)):
            raise TrainingDivergedError(f"parameter '{name}' became non-finite at step {state.step}", metrics)


def train_step(state: TrainState, demo: DemoBuffer, config: SoftDiceConfig) -> dict:
    """One training iteration; both gradients come from the same sampled batch."""
    rng, B = state.rng, config.batch_size
    if config.online and state.online is not None and len(state.online) > 0:
        batch = mix_sample(demo, state.online, config.alpha, B, rng)
    else:
        batch = demo.sample_transitions(B, rng)
    s0 = demo.sample_initial_states(B, rng)
    j_gp, f_sa = gradient_penalty(state.critic, batch.s, batch.a, return_values=True)
    j_e, logp = loss_expert(state.critic, state.policy, batch, config.gamma, config.beta, rng, f_sa=f_sa)
    j_pi = loss_initial(state.critic, state.policy, s0, config.gamma, rng)
    objective = j_e - j_pi - config.gp_lambda * j_gp
    if config.ortho_reg > 0:
        objective = objective + config.ortho_reg * state.policy.orthogonal_penalty()
    critic_params = state.critic_opt.params
    policy_params = state.policy_opt.params
    grads = dc.gradient(objective, critic_params + policy_params)
    critic_grads, policy_grads = grads[: len(critic_params)], grads[len(critic_params) :]
    state.critic_opt.step(critic_grads, ascend=True)
    state.policy_opt.step(policy_grads)
    state.step += 1
    return {
        "step": state.step,
        "j_e": j_e.item(),
        "j_pi": j_pi.item(),
        "j_gp": j_gp.item(),
        "policy_entropy": float(-logp.value.mean()),
        "critic_grad_norm": _grad_norm(critic_grads),
        "policy_grad_norm": _grad_norm(policy_grads),
    }


def _rollout_into(env: ContinuousEnv, policy, buffer: OnlineBuffer, rng) -> None:
    s = env.reset(rng)
    done = 0
    while not done:
        a = policy.act(s[None, :], rng)[0]
        s_next, done = env.step(a)
        buffer.add(s, a, s_next, done)
        s = s_next


def run_training(
    config,
    demo: DemoBuffer,
    env: ContinuousEnv | None,
    state: TrainState,
    step_fn: Callable[[TrainState], dict],
    online_hook: Callable[[TrainState], None] | None = None,
):
    """Shared loop: step, log, evaluate every ``eval_interval`` steps and at the end."""
    metrics = MetricsLog()
    evaluate = env is not None and config.eval_interval > 0
    for _ in range(config.iterations):
        if online_hook is not None:
            online_hook(state)
        try:
            row = step_fn(state)
        except (FloatingPointError, dc.DiffError) as exc:
            raise TrainingDivergedError(f"step {state.step + 1} failed: {exc}", metrics) from exc
        _check_params(state, metrics)
        t = state.step
        do_eval = evaluate and (t % config.eval_interval == 0 or t == config.iterations)
        if do_eval:
            res = evaluate_policy(env, state.policy, config.eval_episodes, state.eval_seed, deterministic=True)
            row["eval_return_mean"], row["eval_return_std"] = res.mean, res.std
        if do_eval or t % config.log_interval == 0:
            metrics.append(row)
    return state.policy, metrics


def train(config: SoftDiceConfig, demo: DemoBuffer, env: ContinuousEnv | None = None, state: TrainState | None = None):
    """Run SoftDICE for ``config.iterations`` steps; returns ``(policy, metrics)``.

    The environment is touched only for evaluation rollouts, and, when
    ``config.online`` is set, for the optional policy rollouts that fill the
    online buffer.
    """
    state = state or TrainState.create(config, demo.state_dim, demo.action_dim)
    hook = None
    if config.online:
        if env is None:
            raise ValueError("online mode needs an environment")
        state.online = OnlineBuffer(config.online_capacity, demo.state_dim, demo.action_dim)

        def hook(st):
            if st.step % config.rollout_every == 0:
                _rollout_into(env, st.policy, st.online, st.rng)

    return run_training(config, demo, env, state, lambda st: train_step(st, demo, config), hook)
