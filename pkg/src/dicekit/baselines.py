"""Offline ValueDICE and behavioral cloning, trained with the same buffers,
networks, initialization and evaluation as SoftDICE."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .envs import ContinuousEnv
from .nets import CriticF, TanhGaussianPolicy
from .replay import DemoBuffer, OnlineBuffer
from .softdice import NonFiniteLossError, TrainState, _grad_norm, _locate_nonfinite, _rollout_into, run_training

ACTION_LIMIT = 1.0 - 1e-6


class _Config:
    @classmethod
    def from_dict(cls, d: dict):
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown {cls.__name__} fields: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    def _validate_common(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.lr_policy < 0 or getattr(self, "lr_critic", 0.0) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1 or self.iterations < 0 or self.eval_interval < 0 or self.log_interval < 1:
            raise ValueError("batch_size/log_interval must be >= 1; iterations/eval_interval >= 0")


@dataclass
class ValueDiceConfig(_Config):
    gamma: float = 0.99
    alpha: float = 0.0
    lr_critic: float = 1e-3
    lr_policy: float = 1e-5
    batch_size: int = 256
    iterations: int = 100_000
    eval_interval: int = 5_000
    eval_episodes: int = 10
    seed: int = 0
    hidden: tuple = (256, 256)
    log_std_init: float = 0.0
    ortho_reg: float = 0.0
    entropy_coef: float = 0.0  # extra policy-only entropy bonus, for ablations
    exp_clamp: float = 10.0
    log_interval: int = 1
    online: bool = False
    rollout_every: int = 5
    online_capacity: int = 100_000

    def __post_init__(self):
        self._validate_common()
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.alpha > 0 and not self.online:
            raise ValueError("alpha > 0 needs online=True to fill the replay buffer")


@dataclass
class BCConfig(_Config):
    lr_policy: float = 1e-3
    batch_size: int = 256
    iterations: int = 100_000
    eval_interval: int = 5_000
    eval_episodes: int = 10
    seed: int = 0
    hidden: tuple = (256, 256)
    log_std_init: float = 0.0
    ortho_reg: float = 0.0
    log_interval: int = 1

    def __post_init__(self):
        self._validate_common()


# ---------------------------------------------------------------------------
# ValueDICE


def bellman_residual(nu: CriticF, policy: TanhGaussianPolicy, batch, gamma: float, rng=None, noise=None) -> Node:
    """Per-sample ``nu(s, a) - gamma (1 - e) nu(s', a')`` with ``a' ~ pi(.|s')``."""
    s, a, s_next, e = batch[:4]
    a_next, _ = policy.sample(s_next, rng, noise)
    return nu(s, a) - (gamma * (1.0 - np.asarray(e))) * nu(s_next, a_next)


def log_mean_exp_term(nu, policy, batch, gamma, rng=None, noise=None, exp_clamp=10.0) -> Node:
    """``-log mean exp(nu - B nu)`` over one batch; the biased part of the objective."""
    return -dc.logmeanexp(dc.clamp(bellman_residual(nu, policy, batch, gamma, rng, noise), None, exp_clamp))


def valuedice_loss(nu, policy, expert_batch, initial_states, online_batch, alpha, gamma, rng=None, exp_clamp=10.0):
    """The regularized ValueDICE objective (maximized by ``nu``, minimized by ``pi``).

    ``-log E_mix[exp(x)] + (1 - alpha)(1 - gamma) E_p0[nu(s0, a0)] + alpha E_RB[x]``
    with ``x = nu - gamma (1 - e) nu(s', a')`` and ``E_mix`` the
    ``(1 - alpha, alpha)`` mixture of the expert and replay batches.

    Returns ``(loss, parts)`` where ``parts`` holds the three terms as nodes.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha > 0 and (online_batch is None or len(online_batch[0]) == 0):
        raise ValueError("alpha > 0 needs a non-empty online batch")
    try:
        x_e = dc.clamp(bellman_residual(nu, policy, expert_batch, gamma, rng), None, exp_clamp)
        if alpha == 0:
            log_term = -dc.logmeanexp(x_e)
            rb_term = Node(0.0)
        else:
            x_rb = bellman_residual(nu, policy, online_batch, gamma, rng)
            mix = (1.0 - alpha) * dc.exp(dc.logmeanexp(x_e)) + alpha * dc.exp(
                dc.logmeanexp(dc.clamp(x_rb, None, exp_clamp))
            )
            log_term = -dc.log(mix)
            rb_term = alpha * dc.mean(x_rb)
        a0, _ = policy.sample(initial_states, rng)
        init_term = ((1.0 - alpha) * (1.0 - gamma)) * dc.mean(nu(initial_states, a0))
    except dc.NumericalOverflowError as exc:
        raise NonFiniteLossError("ValueDICE loss", _locate_nonfinite(*expert_batch[:4]), exc) from exc
    return log_term + init_term + rb_term, {"log": log_term, "init": init_term, "rb": rb_term}


def valuedice_train_step(state: TrainState, demo: DemoBuffer, config: ValueDiceConfig) -> dict:
    rng, B = state.rng, config.batch_size
    batch = demo.sample_transitions(B, rng)
    s0 = demo.sample_initial_states(B, rng)
    online_batch = None
    if config.alpha > 0:
        online_batch = state.online.sample_transitions(B, rng)
    loss, parts = valuedice_loss(state.critic, state.policy, batch, s0, online_batch, config.alpha, config.gamma, rng, config.exp_clamp)
    policy_obj = loss
    logp = None
    if config.entropy_coef > 0:
        _, logp = state.policy.sample(batch.s_next, rng)
        policy_obj = policy_obj + config.entropy_coef * dc.mean(logp)
    if config.ortho_reg > 0:
        policy_obj = policy_obj + config.ortho_reg * state.policy.orthogonal_penalty()
    critic_grads = dc.gradient(loss, state.critic_opt.params)
    policy_grads = dc.gradient(policy_obj, state.policy_opt.params)
    state.critic_opt.step(critic_grads, ascend=True)
    state.policy_opt.step(policy_grads)
    state.step += 1
    if logp is None:
        with dc.no_grad():
            _, logp = state.policy.sample(batch.s_next, rng)
    return {
        "step": state.step,
        "j_e": parts["log"].item(),
        "j_pi": parts["init"].item(),
        "policy_entropy": float(-logp.value.mean()),
        "critic_grad_norm": _grad_norm(critic_grads),
        "policy_grad_norm": _grad_norm(policy_grads),
    }


def valuedice_train(config: ValueDiceConfig, demo: DemoBuffer, env: ContinuousEnv | None = None, state: TrainState | None = None):
    state = state or TrainState.create(config, demo.state_dim, demo.action_dim)
    hook = None
    if config.online:
        if env is None:
            raise ValueError("online mode needs an environment")
        state.online = OnlineBuffer(config.online_capacity, demo.state_dim, demo.action_dim)

        def hook(st):
            if st.step % config.rollout_every == 0:
                _rollout_into(env, st.policy, st.online, st.rng)

    return run_training(config, demo, env, state, lambda st: valuedice_train_step(st, demo, config), hook)


# ---------------------------------------------------------------------------
# behavioral cloning


def bc_loss(policy: TanhGaussianPolicy, batch) -> Node:
    """Negative mean log-likelihood of the expert actions."""
    a = np.clip(batch[1], -ACTION_LIMIT, ACTION_LIMIT)
    return -dc.mean(policy.log_prob(batch[0], a))


def bc_train_step(state: TrainState, demo: DemoBuffer, config: BCConfig) -> dict:
    batch = demo.sample_transitions(config.batch_size, state.rng)
    loss = bc_loss(state.policy, batch)
    objective = loss
    if config.ortho_reg > 0:
        objective = objective + config.ortho_reg * state.policy.orthogonal_penalty()
    grads = dc.gradient(objective, state.policy_opt.params)
    state.policy_opt.step(grads)
    state.step += 1
    return {
        "step": state.step,
        "j_e": loss.item(),
        "policy_entropy": state.policy.entropy(batch.s, rng=state.rng),
        "policy_grad_norm": _grad_norm(grads),
    }


def bc_train(config: BCConfig, demo: DemoBuffer, env: ContinuousEnv | None = None, state: TrainState | None = None):
    """Behavioral cloning with the SoftDICE metrics format (loss in ``j_e``)."""
    state = state or TrainState.create(config, demo.state_dim, demo.action_dim)
    return run_training(config, demo, env, state, lambda st: bc_train_step(st, demo, config))

