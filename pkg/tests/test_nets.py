import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from dicekit import diffcore as dc
from dicekit.nets import (
    HALF_LOG_2PI,
    Adam,
    AdamState,
    CheckpointError,
    CriticF,
    DivergedError,
    Mlp,
    TanhGaussianPolicy,
    adam_step,
    assign_parameters,
    load_checkpoint,
    orthogonal_init,
    policy_from_checkpoint,
    save_checkpoint,
)


def one_d_policy(mu_bias=0.0, log_std=0.0):
    """1-D policy whose pre-squash mean is the constant ``mu_bias``."""
    pi = TanhGaussianPolicy(1, 1, hidden=(3,), rng=0, log_std_init=log_std)
    for w in pi.mean_net.weights:
        w.value = np.zeros_like(w.value)
    pi.mean_net.biases[-1].value = np.array([mu_bias])
    return pi


# --- orthogonal init --------------------------------------------------------


def test_orthogonal_square():
    q = orthogonal_init(4, 4, 1.0, rng=0)
    np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-10)


def test_orthogonal_one_by_one():
    assert orthogonal_init(1, 1, 1.0, rng=5)[0, 0] in (-1.0, 1.0)


def test_orthogonal_tall_with_gain():
    q = orthogonal_init(8, 3, math.sqrt(2.0), rng=1)
    np.testing.assert_allclose(q.T @ q, 2.0 * np.eye(3), atol=1e-10)


def test_orthogonal_wide_rows():
    q = orthogonal_init(3, 8, 1.0, rng=1)
    np.testing.assert_allclose(q @ q.T, np.eye(3), atol=1e-10)


def test_orthogonal_rejects_empty():
    with pytest.raises(ValueError):
        orthogonal_init(0, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.floats(0.1, 3.0), st.integers(0, 1000))
def test_initialized_singular_values_equal_gain(rows, cols, gain, seed):
    net = Mlp(rows, cols, hidden=(rows + cols,), rng=seed, hidden_gain=gain, out_gain=gain)
    for w in net.weights:
        np.testing.assert_allclose(np.linalg.svd(w.value, compute_uv=False), gain, atol=1e-8)


# --- policy -------------------------------------------------------------------


def test_standard_normal_log_prob_at_zero():
    a, logp = one_d_policy().sample(np.zeros((1, 1)), noise=np.zeros((1, 1)))
    assert a.item() == 0.0
    # the squash correction at a = 0 is only the epsilon term
    assert logp.item() == pytest.approx(-0.5 * math.log(2 * math.pi) - math.log(1.0 + 1e-6), abs=1e-12)
    assert logp.item() == pytest.approx(-0.91894, abs=1e-5)


def test_log_prob_hand_expansion():
    a = math.tanh(1.0)
    expected = -HALF_LOG_2PI - 0.5 - math.log(1.0 - math.tanh(1.0) ** 2 + 1e-6)
    got = one_d_policy().log_prob(np.zeros((1, 1)), np.array([[a]])).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_density_integrates_to_one():
    pi = one_d_policy(mu_bias=0.4, log_std=-0.3)

    def density(a):
        return math.exp(pi.log_prob(np.zeros((1, 1)), np.array([[a]])).item())

    total, _ = integrate.quad(density, -1 + 1e-12, 1 - 1e-12, limit=200)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_entropy_monte_carlo_matches_quadrature():
    pi = one_d_policy(mu_bias=0.3, log_std=-0.5)
    s0 = np.zeros((1, 1))

    def neg_p_log_p(a):
        lp = pi.log_prob(s0, np.array([[a]])).item()
        return -math.exp(lp) * lp

    exact, _ = integrate.quad(neg_p_log_p, -1 + 1e-12, 1 - 1e-12, limit=200)
    _, logp = pi.sample(np.zeros((10_000, 1)), rng=0)
    samples = -logp.value
    se = samples.std() / math.sqrt(len(samples))
    assert abs(samples.mean() - exact) < 3 * se


def test_sigma_to_zero_gives_tanh_mean():
    pi = one_d_policy(mu_bias=0.7, log_std=-40.0)
    pi.log_std_bounds = (-50.0, 2.0)
    a, _ = pi.sample(np.zeros((5, 1)), rng=0)
    np.testing.assert_allclose(a.value, math.tanh(0.7), atol=1e-15)


def test_sample_then_log_prob_consistent():
    pi = TanhGaussianPolicy(3, 2, hidden=(8,), rng=2)
    s = np.random.default_rng(0).normal(size=(6, 3))
    a, logp = pi.sample(s, rng=1)
    np.testing.assert_allclose(pi.log_prob(s, a.value).value, logp.value, atol=1e-9)


def test_log_prob_lower_one_sigma_out_for_narrow_policy():
    sigma = 0.2
    pi = one_d_policy(log_std=math.log(sigma))
    s0 = np.zeros((1, 1))
    at_mean = pi.log_prob(s0, np.array([[0.0]])).item()
    at_sigma = pi.log_prob(s0, np.array([[math.tanh(sigma)]])).item()
    assert at_sigma < at_mean


def test_squashed_density_not_unimodal_at_unit_sigma():
    # the tanh Jacobian outweighs the Gaussian drop: phi(1) / (1 - tanh(1)^2) > phi(0)
    pi = one_d_policy()
    s0 = np.zeros((1, 1))
    at_mean = pi.log_prob(s0, np.array([[0.0]])).item()
    at_sigma = pi.log_prob(s0, np.array([[math.tanh(1.0)]])).item()
    assert at_sigma > at_mean


@pytest.mark.parametrize("bad", [1.0, -1.0, 1.5])
def test_log_prob_domain_error(bad):
    with pytest.raises(ValueError, match="domain"):
        one_d_policy().log_prob(np.zeros((1, 1)), np.array([[bad]]))


def test_actions_strictly_inside_box():
    pi = TanhGaussianPolicy(2, 2, hidden=(4,), rng=0, log_std_init=2.0)
    a = pi.act(np.zeros((2000, 2)), rng=0)
    assert np.all(np.abs(a) < 1.0)


def test_log_std_clamped():
    pi = one_d_policy(log_std=10.0)
    _, logp = pi.sample(np.zeros((1, 1)), noise=np.zeros((1, 1)))
    # clamp at 2: the gaussian part is -2 - 0.5 log 2pi
    assert logp.item() == pytest.approx(-2.0 - HALF_LOG_2PI)


def test_reparametrized_gradients_match_finite_differences():
    pi = TanhGaussianPolicy(2, 2, hidden=(5,), rng=4, log_std_init=-0.2)
    s = np.random.default_rng(1).normal(size=(4, 2))
    noise = np.random.default_rng(2).standard_normal((4, 2))
    a, logp = pi.sample(s, noise=noise)
    root = dc.sum_(a * 0.7) + dc.mean(logp)
    assert dc.gradcheck(root, pi.parameters()) < 1e-3


def test_state_dim_checked():
    with pytest.raises(ValueError, match="state dim"):
        TanhGaussianPolicy(3, 1, hidden=(4,), rng=0).act(np.zeros((1, 2)))


# --- critic -------------------------------------------------------------------


def test_critic_value_matches_graph():
    critic = CriticF(2, 1, hidden=(6, 6), rng=0)
    s, a = np.ones((3, 2)), np.full((3, 1), 0.5)
    np.testing.assert_allclose(critic(s, a).value, critic.value(s, a), rtol=1e-14)
    assert critic(s, a).shape == (3,)


# --- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    out = adam_step(AdamState(), p, [np.zeros(2)], lr=0.1)
    np.testing.assert_array_equal(out[0], p[0])


@pytest.mark.parametrize("g", [3.0, -0.02])
def test_adam_first_step_is_lr_times_sign(g):
    (out,) = adam_step(AdamState(), [np.array(0.0)], [np.array(g)], lr=1e-3)
    # m_hat = g, v_hat = g^2 after bias correction
    assert out == pytest.approx(-1e-3 * g / (abs(g) + 1e-8), rel=1e-12)
    assert out == pytest.approx(-1e-3 * math.copysign(1.0, g), rel=1e-6)


def test_adam_two_steps_against_recurrence():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p0, g = np.array([0.5, -1.5]), np.array([0.2, -3.0])
    state = AdamState()
    p = [p0]
    for _ in range(2):
        p = adam_step(state, p, [g], lr)
    m1, v1 = (1 - b1) * g, (1 - b2) * g * g
    x1 = p0 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g, b2 * v1 + (1 - b2) * g * g
    x2 = x1 - lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps)
    np.testing.assert_allclose(p[0], x2, rtol=0, atol=1e-12)
    assert state.step == 2


def test_adam_nan_gradient_reports_step():
    state = AdamState()
    adam_step(state, [np.zeros(1)], [np.ones(1)], 0.1)
    with pytest.raises(DivergedError) as info:
        adam_step(state, [np.zeros(1)], [np.array([np.nan])], 0.1)
    assert info.value.step == 2
    assert "diverged" in str(info.value)


def test_adam_ascend_moves_uphill():
    x = dc.Node(np.array([0.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    opt.step([np.array([1.0])], ascend=True)
    assert x.value[0] > 0


# --- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    pi = TanhGaussianPolicy(3, 2, hidden=(7, 5), rng=3, log_std_init=-0.4)
    save_checkpoint(tmp_path / "p.json", pi.named_parameters())
    restored = policy_from_checkpoint(load_checkpoint(tmp_path / "p.json"))
    s = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(restored.act(s, deterministic=True), pi.act(s, deterministic=True))
    np.testing.assert_array_equal(restored.log_std.value, pi.log_std.value)


def test_checkpoint_shape_mismatch_is_descriptive(tmp_path):
    save_checkpoint(tmp_path / "p.json", TanhGaussianPolicy(3, 2, hidden=(7,), rng=0).named_parameters())
    other = TanhGaussianPolicy(4, 2, hidden=(7,), rng=0)
    with pytest.raises(CheckpointError, match="mean_net.l0.weight"):
        assign_parameters(other.named_parameters(), load_checkpoint(tmp_path / "p.json"))


def test_checkpoint_layer_set_mismatch(tmp_path):
    save_checkpoint(tmp_path / "c.json", CriticF(2, 1, hidden=(4,), rng=0).named_parameters())
    with pytest.raises(CheckpointError, match="not a policy"):
        policy_from_checkpoint(load_checkpoint(tmp_path / "c.json"))
