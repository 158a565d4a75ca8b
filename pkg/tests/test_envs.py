import numpy as np
import pytest

from gmpslab.envs import (
    ChainFamily,
    ChainMdp,
    EnvError,
    Nav2dFamily,
    goal_from_angle,
    occupancy,
    reward_dense,
    reward_sparse,
    solve_exact,
)
from gmpslab.rng import stream


def test_goal_at_zero_angle_is_arc_endpoint():
    assert np.allclose(goal_from_angle(0.0), [2.0, 0.0], atol=1e-15)


def test_sampled_goals_lie_on_the_quarter_arc():
    family = Nav2dFamily()
    rng = stream(0, "tasks")
    for _ in range(10_000):
        task = family.sample_task(rng)
        assert abs(np.linalg.norm(task.goal) - 2.0) < 1e-9
        assert task.goal[0] >= -1e-12 and task.goal[1] >= -1e-12


def test_task_sampling_is_deterministic_per_seed():
    family = Nav2dFamily()
    t1 = family.sample_task(stream(5, "tasks"))
    t2 = family.sample_task(stream(5, "tasks"))
    assert np.array_equal(t1.goal, t2.goal)


def test_zero_action_keeps_position():
    family = Nav2dFamily()
    task = family.sample_task(stream(1, "t"))
    state = family.reset(task)
    nxt, _, done = family.step(task, state, np.zeros(2))
    assert np.array_equal(nxt.position, state.position)
    assert not done


def test_action_clipping_at_bound():
    family = Nav2dFamily()
    task = family.sample_task(stream(2, "t"))
    state = family.reset(task)
    nxt, _, _ = family.step(task, state, np.array([10.0, 0.0]))
    assert np.allclose(nxt.position - state.position, [0.1, 0.0], atol=1e-15)


def test_stepping_done_state_raises():
    family = Nav2dFamily(horizon=3)
    task = family.sample_task(stream(3, "t"))
    state = family.reset(task)
    for _ in range(2):
        state, _, done = family.step(task, state, np.zeros(2))
    assert done
    with pytest.raises(EnvError):
        family.step(task, state, np.zeros(2))


def test_proportional_controller_reaches_every_sampled_goal():
    family = Nav2dFamily(horizon=50)
    rng = stream(4, "sweep")
    for _ in range(50):
        task = family.sample_task(rng)
        state = family.reset(task)
        done = False
        while not done:
            action = np.clip(5.0 * (task.goal - state.position), -1.0, 1.0)
            state, _, done = family.step(task, state, action)
        assert np.linalg.norm(state.position - task.goal) <= 0.8


def test_dense_reward_values():
    g = np.array([2.0, 0.0])
    assert reward_dense(g, g) == 4.0
    assert reward_dense(np.zeros(2), g) == 2.0
    x = np.array([0.3, -1.2])
    assert reward_dense(x, g) == reward_dense(g, x)


def test_dense_reward_bounded_above():
    rng = stream(6, "dense-bound")
    g = np.array([1.0, 1.5])
    for _ in range(200):
        x = rng.normal(size=2) * 3
        r = reward_dense(x, g)
        assert r <= 4.0
        assert (r == 4.0) == bool(np.array_equal(x, g))


def test_sparse_reward_branches():
    g = np.array([2.0, 0.0])
    near = g + np.array([0.5, 0.0])  # L2 distance 0.5
    assert reward_sparse(near, g, 2.0) == reward_dense(near, g)
    far = g + np.array([1.5, 0.0])
    assert reward_sparse(far, g, 2.0) == 2.0
    assert reward_sparse(g, g, 2.0) == 4.0


def test_sparse_equals_dense_inside_success_region():
    rng = stream(7, "sparse-inside")
    g = np.array([0.5, 1.9])
    for _ in range(300):
        x = g + rng.uniform(-0.55, 0.55, size=2)
        if np.linalg.norm(x - g) <= 0.8:
            assert reward_sparse(x, g, 3.0) == reward_dense(x, g)


def test_single_state_mdp_value_is_horizon_times_reward():
    mdp = ChainMdp(
        transitions=np.ones((1, 1, 1)),
        rewards=np.array([[0.5]]),
        horizon=4,
    )
    V, _ = solve_exact(mdp, np.ones((1, 1)))
    assert V[0, 0] == pytest.approx(2.0, abs=1e-14)


def test_horizon_one_value_is_expected_immediate_reward():
    rng = stream(8, "h1")
    rewards = rng.random((3, 2))
    p = np.ones((3, 2, 3)) / 3.0
    mdp = ChainMdp(transitions=p, rewards=rewards, horizon=1)
    probs = rng.random((3, 2))
    probs /= probs.sum(axis=1, keepdims=True)
    V, _ = solve_exact(mdp, probs)
    assert np.allclose(V[0], np.sum(probs * rewards, axis=1), atol=1e-14)


def _enumerate_return(mdp: ChainMdp, probs: np.ndarray) -> float:
    """Expected return by exhaustive enumeration over action/state paths."""

    def recurse(state, t):
        if t == mdp.horizon:
            return 0.0
        total = 0.0
        for a in range(mdp.n_actions):
            pa = probs[state, a]
            if pa == 0.0:
                continue
            cont = 0.0
            for s2 in range(mdp.n_states):
                ps2 = mdp.transitions[state, a, s2]
                if ps2 > 0:
                    cont += ps2 * recurse(s2, t + 1)
            total += pa * (mdp.rewards[state, a] + cont)
        return total

    return recurse(mdp.init_state, 0)


def test_two_state_chain_matches_enumeration():
    rng = stream(9, "enum")
    family = ChainFamily.sample(rng, n_states=2, n_actions=2, horizon=5, stochastic=True)
    task = family.sample_task(rng)
    mdp = family.mdp(task)
    probs = rng.random((2, 2))
    probs /= probs.sum(axis=1, keepdims=True)
    V, Q = solve_exact(mdp, probs)
    want = _enumerate_return(mdp, probs)
    assert V[0, mdp.init_state] == pytest.approx(want, abs=1e-12)
    # Q at the first step must be consistent with V
    assert np.allclose(np.sum(probs * Q[0], axis=1), V[0], atol=1e-12)


def test_solve_exact_agrees_with_monte_carlo():
    rng = stream(10, "mc")
    family = ChainFamily.sample(rng, n_states=3, n_actions=2, horizon=6, stochastic=True)
    task = family.sample_task(rng)
    mdp = family.mdp(task)
    probs = rng.random((3, 2))
    probs /= probs.sum(axis=1, keepdims=True)
    V, _ = solve_exact(mdp, probs)

    n = 100_000
    mc = stream(10, "mc-rollouts")
    states = np.full(n, mdp.init_state)
    returns = np.zeros(n)
    action_cdf = np.cumsum(probs, axis=1)
    trans_cdf = np.cumsum(mdp.transitions, axis=2)
    for _ in range(mdp.horizon):
        u = mc.random(n)
        actions = (u[:, None] > action_cdf[states]).sum(axis=1)
        returns += mdp.rewards[states, actions]
        u2 = mc.random(n)
        states = (u2[:, None] > trans_cdf[states, actions]).sum(axis=1)
    est = returns.mean()
    se = returns.std(ddof=1) / np.sqrt(n)
    assert abs(est - V[0, mdp.init_state]) <= 3 * se


def test_occupancy_rows_are_distributions():
    rng = stream(11, "occ")
    family = ChainFamily.sample(rng, n_states=4, n_actions=3, horizon=7)
    mdp = family.mdp(family.sample_task(rng))
    probs = rng.random((4, 3))
    probs /= probs.sum(axis=1, keepdims=True)
    d = occupancy(mdp, probs)
    assert d.shape == (7, 4)
    assert np.allclose(d.sum(axis=1), 1.0, atol=1e-12)
    assert d[0, mdp.init_state] == 1.0


def test_chain_mdp_validation():
    with pytest.raises(EnvError):
        ChainMdp(transitions=np.ones((2, 1, 2)), rewards=np.zeros((2, 1)), horizon=3)
    bad_reward = np.array([[1.5]])
    with pytest.raises(EnvError):
        ChainMdp(transitions=np.ones((1, 1, 1)), rewards=bad_reward, horizon=3)
