"""MLPs, the tanh-squashed Gaussian policy, the critic and an Adam optimizer."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Node

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
SQUASH_EPS = 1e-6
ACTION_BOUND = 1.0 - 1e-12  # tanh rounds to +-1 in float64 beyond |u| ~ 19


class DivergedError(FloatingPointError):
    """Raised when an optimizer receives non-finite gradients."""

    def __init__(self, step: int, detail: str = ""):
        msg = f"diverged at step {step}"
        super().__init__(msg + (f": {detail}" if detail else ""))
        self.step = step


class CheckpointError(ValueError):
    pass


def orthogonal_init(rows: int, cols: int, gain: float = 1.0, rng=None) -> np.ndarray:
    """Orthogonal matrix scaled by ``gain``.

    Columns are orthonormal when ``rows >= cols``, rows otherwise.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"orthogonal_init needs positive dimensions, got {rows}x{cols}")
    rng = np.random.default_rng(rng)
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # unique decomposition, uniform over the group
    if rows < cols:
        q = q.T
    return gain * q


class Mlp:
    """Fully connected net: tanh on hidden layers, identity on the output."""

    def __init__(self, in_dim, out_dim, hidden=(256, 256), rng=None, hidden_gain=math.sqrt(2.0), out_gain=1.0):
        rng = np.random.default_rng(rng)
        dims = [in_dim, *hidden, out_dim]
        self.weights: list[Node] = []
        self.biases: list[Node] = []
        for i, (m, n) in enumerate(zip(dims[:-1], dims[1:])):
            gain = out_gain if i == len(dims) - 2 else hidden_gain
            self.weights.append(Node(orthogonal_init(m, n, gain, rng), requires_grad=True, name=f"l{i}.weight"))
            self.biases.append(Node(np.zeros(n), requires_grad=True, name=f"l{i}.bias"))
        self.in_dim, self.out_dim, self.hidden = in_dim, out_dim, tuple(hidden)

    def __call__(self, x) -> Node:
        h = dc.as_node(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = dc.tanh(h)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value + b.value
            if i < last:
                h = np.tanh(h)
        return h

    def named_parameters(self, prefix: str = "") -> dict[str, Node]:
        out = {}
        for w, b in zip(self.weights, self.biases):
            out[prefix + w.name] = w
            out[prefix + b.name] = b
        return out

    def parameters(self) -> list[Node]:
        return list(self.named_parameters().values())


class TanhGaussianPolicy:
    """Diagonal Gaussian in pre-squash space followed by ``tanh``.

    The mean comes from an MLP over the state; the log standard deviation is
    a free, state-independent vector clamped to ``log_std_bounds``.
    """

    def __init__(self, state_dim, action_dim, hidden=(256, 256), rng=None, log_std_init=0.0, log_std_bounds=(-5.0, 2.0)):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.mean_net = Mlp(state_dim, action_dim, hidden, rng, out_gain=0.01)
        self.log_std = Node(np.full(action_dim, float(log_std_init)), requires_grad=True, name="log_std")
        self.log_std_bounds = log_std_bounds

    def _log_std(self) -> Node:
        lo, hi = self.log_std_bounds
        return dc.clamp(self.log_std, lo, hi)

    def _check_states(self, states) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if s.shape[1] != self.state_dim:
            raise ValueError(f"policy expects state dim {self.state_dim}, got {s.shape[1]}")
        return s

    def _squashed_log_prob(self, mu: Node, log_std: Node, u: Node, a: Node) -> Node:
        z = (u - mu) * dc.exp(-log_std)
        gauss = -0.5 * dc.square(z) - log_std - HALF_LOG_2PI
        squash = dc.log(1.0 - dc.square(a) + SQUASH_EPS)
        return dc.sum_(gauss - squash, axis=1)

    def sample(self, states, rng=None, noise=None) -> tuple[Node, Node]:
        """Reparametrized sample: returns ``(action, log_prob)`` nodes.

        ``noise`` fixes the standard-normal draw; otherwise it comes from ``rng``.
        """
        s = self._check_states(states)
        if noise is None:
            noise = np.random.default_rng(rng).standard_normal((s.shape[0], self.action_dim))
        mu = self.mean_net(s)
        log_std = self._log_std()
        u = mu + dc.exp(log_std) * noise
        a = dc.clamp(dc.tanh(u), -ACTION_BOUND, ACTION_BOUND)
        return a, self._squashed_log_prob(mu, log_std, u, a)

    def log_prob(self, states, actions) -> Node:
        s = self._check_states(states)
        a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if np.any(np.abs(a) >= 1.0):
            raise ValueError("log_prob domain error: every action component must lie in (-1, 1)")
        mu = self.mean_net(s)
        u = Node(np.arctanh(a))
        return self._squashed_log_prob(mu, self._log_std(), u, Node(a))

    def act(self, states, rng=None, deterministic=False) -> np.ndarray:
        s = self._check_states(states)
        mu = self.mean_net.predict(s)
        if not deterministic:
            lo, hi = self.log_std_bounds
            std = np.exp(np.clip(self.log_std.value, lo, hi))
            mu = mu + std * np.random.default_rng(rng).standard_normal(mu.shape)
        return np.clip(np.tanh(mu), -ACTION_BOUND, ACTION_BOUND)

    def entropy(self, states, n_samples=1, rng=None) -> float:
        """Monte-Carlo estimate of ``-E[log pi(a|s)]`` over the given states."""
        s = np.repeat(self._check_states(states), n_samples, axis=0)
        with dc.no_grad():
            _, logp = self.sample(s, rng)
        return float(-logp.value.mean())

    def orthogonal_penalty(self) -> Node:
        """Sum over mean-net weights of ``||W^T W - I||^2``."""
        total = Node(0.0)
        for w in self.mean_net.weights:
            gram = w.T @ w
            total = total + dc.sum_(dc.square(gram - np.eye(gram.shape[0])))
        return total

    def named_parameters(self) -> dict[str, Node]:
        out = self.mean_net.named_parameters("mean_net.")
        out["log_std"] = self.log_std
        return out

    def parameters(self) -> list[Node]:
        return list(self.named_parameters().values())


class CriticF:
    """Scalar function of a state-action pair (the critic ``f``, or ``nu``)."""

    def __init__(self, state_dim, action_dim, hidden=(256, 256), rng=None):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.net = Mlp(state_dim + action_dim, 1, hidden, rng)

    def __call__(self, states, actions) -> Node:
        return self.apply_joint(dc.concat([dc.as_node(states), dc.as_node(actions)], axis=1))

    def apply_joint(self, x) -> Node:
        out = self.net(x)
        return dc.reshape(out, (out.shape[0],))

    def value(self, states, actions) -> np.ndarray:
        return self.net.predict(np.concatenate([states, actions], axis=1))[:, 0]

    def named_parameters(self) -> dict[str, Node]:
        return self.net.named_parameters("net.")

    def parameters(self) -> list[Node]:
        return list(self.named_parameters().values())


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params, grads, lr: float) -> list[np.ndarray]:
    """One bias-corrected Adam descent step; returns new parameter arrays."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params):
        raise ValueError("grads and params differ in length")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise DivergedError(state.step + 1, f"non-finite gradient for parameter {i}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        out.append(p - lr * (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + state.eps))
    return out


class Adam:
    """Adam bound to a list of parameter nodes."""

    def __init__(self, params: list[Node], lr: float):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def step(self, grads, ascend: bool = False) -> None:
        if ascend:
            grads = [-g for g in grads]
        new = adam_step(self.state, [p.value for p in self.params], grads, self.lr)
        for p, v in zip(self.params, new):
            p.value = v


# ---------------------------------------------------------------------------
# checkpoints: {layer-name: {"shape": [...], "values": [...row-major...]}}


def save_checkpoint(path, named: dict) -> None:
    payload = {}
    for name, p in named.items():
        arr = p.value if isinstance(p, Node) else np.asarray(p, dtype=np.float64)
        payload[name] = {"shape": list(arr.shape), "values": arr.ravel().tolist()}
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = json.loads(Path(path).read_text())
    out = {}
    for name, entry in raw.items():
        arr = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"layer '{name}': {arr.size} values do not fill shape {shape}")
        out[name] = arr.reshape(shape)
    return out


def assign_parameters(named: dict[str, Node], values: dict[str, np.ndarray]) -> None:
    missing = sorted(set(named) - set(values))
    extra = sorted(set(values) - set(named))
    if missing or extra:
        raise CheckpointError(f"checkpoint layers do not match model: missing {missing}, unexpected {extra}")
    for name, node in named.items():
        if values[name].shape != node.shape:
            raise CheckpointError(
                f"layer '{name}' has shape {values[name].shape} in checkpoint but {node.shape} in model"
            )
        node.value = values[name].copy()


def policy_from_checkpoint(values: dict[str, np.ndarray]) -> TanhGaussianPolicy:
    """Rebuild a policy whose architecture is read off the stored weight shapes."""
    weights = sorted(
        (k for k in values if k.startswith("mean_net.") and k.endswith(".weight")),
        key=lambda k: int(k.split(".")[1][1:]),
    )
    if not weights or "log_std" not in values:
        raise CheckpointError("checkpoint is not a policy (needs mean_net.* layers and log_std)")
    shapes = [values[k].shape for k in weights]
    policy = TanhGaussianPolicy(shapes[0][0], shapes[-1][1], hidden=[s[1] for s in shapes[:-1]], rng=0)
    assign_parameters(policy.named_parameters(), values)
    return policy
