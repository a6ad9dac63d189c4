import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dicekit.envs import (
    EXPERT_RETURN,
    Bandit1D,
    BanditExpert,
    EnvContractError,
    Pendulum1D,
    PendulumExpert,
    PointMass2D,
    PointMassExpert,
    TabularMDP,
    UniformRandomPolicy,
    evaluate_policy,
    feasibility_residual,
    generate_demos,
    initial_occupancy,
    load_demos,
    make_env,
    pair_transition,
    normalized_score,
    policy_from_occupancy,
    random_mdp,
    random_tabular_policy,
    save_demos,
    select_trajectories,
    stationarity_residual,
    tabular_occupancy,
    wrap_angle,
)


def test_start_at_goal_is_single_terminal_transition():
    env = PointMass2D(start_center=(0.0, 0.0), start_spread=0.0)
    (traj,) = generate_demos(env, PointMassExpert(), 1, seed=0)
    assert len(traj) == 1 and traj.transitions[0].e == 1


def test_proportional_control_contracts():
    env = PointMass2D(start_center=(1.0, 0.0), start_spread=0.0)
    (traj,) = generate_demos(env, PointMassExpert(), 1, seed=0)
    dist = [np.linalg.norm(tr.s) for tr in traj.transitions] + [np.linalg.norm(traj.transitions[-1].s_next)]
    assert all(a > b for a, b in zip(dist, dist[1:]))
    assert traj.reached_goal and dist[-1] < 0.05


def test_frozen_expert_line():
    res = evaluate_policy(PointMass2D(), PointMassExpert(), 100, seed=0)
    assert res.mean == EXPERT_RETURN["point_mass"]


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_expert_matches_frozen_line_on_fresh_seeds(seed):
    ref = evaluate_policy(PointMass2D(), PointMassExpert(), 100, seed=0)
    res = evaluate_policy(PointMass2D(), PointMassExpert(), 100, seed=seed)
    # both means carry sampling error
    assert abs(res.mean - EXPERT_RETURN["point_mass"]) < 3 * math.hypot(res.stderr, ref.stderr)


def test_random_policy_below_expert():
    res = evaluate_policy(PointMass2D(), UniformRandomPolicy(2), 20, seed=0)
    assert res.mean < EXPERT_RETURN["point_mass"]
    assert normalized_score(EXPERT_RETURN["point_mass"]) == 1.0


def test_empty_evaluation_rejected():
    with pytest.raises(ValueError, match="empty evaluation"):
        evaluate_policy(PointMass2D(), PointMassExpert(), 0)


def test_action_dim_mismatch_rejected():
    with pytest.raises(ValueError, match="action dim"):
        evaluate_policy(Bandit1D(), UniformRandomPolicy(2), 1)


def test_step_after_terminal_is_contract_violation():
    env = Bandit1D()
    env.reset(0)
    _, e = env.step(np.array([0.3]))
    assert e == 1
    with pytest.raises(EnvContractError):
        env.step(np.array([0.3]))


def test_horizon_cutoff_is_flagged_and_terminal():
    env = PointMass2D(horizon=10)
    with pytest.warns(UserWarning, match="horizon"):
        (traj,) = generate_demos(env, PointMassExpert(gain=0.1), 1, seed=0)
    assert len(traj) == 10 and not traj.reached_goal
    assert [tr.e for tr in traj.transitions] == [0] * 9 + [1]


def test_demos_are_chained_and_replayable():
    env = PointMass2D()
    for traj in generate_demos(env, PointMassExpert(), 5, noise_scale=0.1, seed=1):
        for prev, nxt in zip(traj.transitions, traj.transitions[1:]):
            np.testing.assert_array_equal(prev.s_next, nxt.s)
        env.reset(state=traj.transitions[0].s)
        for tr in traj.transitions:
            s_next, e = env.step(tr.a)
            np.testing.assert_allclose(s_next, tr.s_next, atol=1e-12)
            assert e == tr.e
        assert np.all(np.abs([tr.a for tr in traj.transitions]) <= 1.0)


def test_generate_demos_deterministic():
    a = generate_demos(Pendulum1D(horizon=30), PendulumExpert(), 3, noise_scale=0.05, seed=9)
    b = generate_demos(Pendulum1D(horizon=30), PendulumExpert(), 3, noise_scale=0.05, seed=9)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal([t.a for t in ta.transitions], [t.a for t in tb.transitions])


def test_jsonl_round_trip(tmp_path):
    trajs = generate_demos(PointMass2D(), PointMassExpert(), 2, seed=0)
    path = tmp_path / "d.jsonl"
    save_demos(path, trajs)
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"traj", "t", "s", "a", "s_next", "e"}
    loaded = load_demos(path)
    assert [len(t) for t in loaded] == [len(t) for t in trajs]
    np.testing.assert_array_equal(loaded[1].transitions[-1].s_next, trajs[1].transitions[-1].s_next)


def test_jsonl_out_of_order_rejected(tmp_path):
    rec = {"traj": 0, "t": 1, "s": [0.0], "a": [0.0], "s_next": [0.0], "e": 1}
    (tmp_path / "bad.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(ValueError, match="out of order"):
        load_demos(tmp_path / "bad.jsonl")


def test_select_trajectories():
    trajs = generate_demos(PointMass2D(), PointMassExpert(), 10, seed=0)
    picked = select_trajectories(trajs, 3, seed=4)
    assert len(picked) == 3 and len({t.traj_id for t in picked}) == 3
    with pytest.raises(ValueError):
        select_trajectories(trajs, 11, seed=0)


def test_unknown_env():
    with pytest.raises(ValueError, match="unknown env"):
        make_env("cartpole")


@settings(max_examples=200, deadline=None)
@given(st.floats(-100, 100, allow_nan=False))
def test_wrap_angle_range(x):
    y = wrap_angle(x)
    assert -math.pi < y <= math.pi
    assert math.isclose(math.cos(y), math.cos(x), abs_tol=1e-9)


def test_pendulum_velocity_clamped_and_angle_wrapped():
    env = Pendulum1D()
    env.reset(state=[3.1, 7.9])
    for _ in range(20):
        s, _ = env.step(np.array([1.0]))
        assert -math.pi < s[0] <= math.pi and abs(s[1]) <= 8.0


def test_pendulum_expert_beats_random():
    env = Pendulum1D()
    expert = evaluate_policy(env, PendulumExpert(), 3, seed=0)
    rand = evaluate_policy(env, UniformRandomPolicy(1), 3, seed=0)
    assert expert.mean > rand.mean + 300


def test_bandit_expert_is_optimal():
    assert evaluate_policy(Bandit1D(), BanditExpert(), 2).mean == 0.0


# --- tabular ----------------------------------------------------------------------


def power_series_occupancy(mdp, pi, gamma, doublings=20):
    """``(1 - g) sum_{t < 2^k} (g M^T)^t d0`` by repeated doubling."""
    A = gamma * pair_transition(mdp, pi).T
    S = np.eye(len(A))
    P = A.copy()
    for _ in range(doublings):
        S = S + P @ S
        P = P @ P
    return (1 - gamma) * S @ initial_occupancy(mdp, pi).ravel()


def test_single_state_single_action():
    mdp = TabularMDP(np.ones((1, 1, 1)), np.ones(1))
    assert tabular_occupancy(mdp, np.ones((1, 1)), 0.9)[0, 0] == pytest.approx(1.0)


def test_two_state_cycle_against_power_series():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 0] = 1.0
    mdp = TabularMDP(P, np.array([0.5, 0.5]))
    pi = np.ones((2, 1))
    d = tabular_occupancy(mdp, pi, 0.9)
    np.testing.assert_allclose(d.ravel(), power_series_occupancy(mdp, pi, 0.9), atol=1e-8)


def test_asymmetric_start_against_power_series():
    rng = np.random.default_rng(0)
    mdp = random_mdp(4, 3, rng)
    pi = random_tabular_policy(4, 3, rng)
    np.testing.assert_allclose(tabular_occupancy(mdp, pi, 0.95).ravel(), power_series_occupancy(mdp, pi, 0.95), atol=1e-8)


def test_gamma_zero_gives_initial_occupancy():
    rng = np.random.default_rng(1)
    mdp, pi = random_mdp(3, 2, rng), random_tabular_policy(3, 2, rng)
    np.testing.assert_allclose(tabular_occupancy(mdp, pi, 0.0), initial_occupancy(mdp, pi), atol=1e-15)


def test_occupancy_invariants_on_random_mdps():
    rng = np.random.default_rng(7)
    for _ in range(100):
        S, A = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        mdp, pi = random_mdp(S, A, rng), random_tabular_policy(S, A, rng)
        gamma = float(rng.uniform(0, 0.99))
        d = tabular_occupancy(mdp, pi, gamma)
        assert np.all(d >= 0) and abs(d.sum() - 1) < 1e-10
        assert stationarity_residual(mdp, pi, d, gamma) < 1e-10
        assert feasibility_residual(mdp, d, gamma) < 1e-10
        np.testing.assert_allclose(policy_from_occupancy(d), pi, atol=1e-8)


def test_tabular_validation():
    with pytest.raises(ValueError):
        TabularMDP(np.full((2, 1, 2), 0.4), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        tabular_occupancy(TabularMDP(np.ones((1, 1, 1)), np.ones(1)), np.ones((1, 1)), 1.0)
