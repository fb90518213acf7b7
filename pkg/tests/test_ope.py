
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spin.envsim import Trajectory, enumerate_trajectories, random_tabular_nsmdp, true_performance
from spin.errors import FullSupportError
from spin.ope import PerformanceSeries, TrajectoryBatch, pdis, pdis_with_grad
from spin.policy import SoftmaxPolicy

from conftest import central_diff, rel_err


def loop_pdis(h, policy, gamma):
    """Textbook per-decision importance sampling, one step at a time."""
    total, weight = 0.0, 1.0
    for t, (s, a, beta, r) in enumerate(h.steps):
        weight *= policy.action_prob(s, a) / beta
        total += gamma ** t * weight * r
    return total


def expected_pdis(env, target, behavior, k):
    """E_behavior[pdis] by enumerating every trajectory with its mean rewards."""
    total = 0.0
    beta = behavior.probs()
    for prob, states, actions, rewards in enumerate_trajectories(env, behavior, k):
        h = Trajectory(k, states, actions, [beta[s, a] for s, a in zip(states, actions)], rewards)
        total += prob * pdis(h, target, env.gamma)
    return total


def random_trajectory(rng, S=3, A=2, T=4, k=1):
    states = rng.integers(0, S, T)
    actions = rng.integers(0, A, T)
    return Trajectory(k, states, actions, rng.uniform(0.05, 1.0, T), rng.normal(size=T))


def test_on_policy_is_discounted_return():
    pi = SoftmaxPolicy([[0.3, -0.2], [1.0, 0.0]])
    p = pi.probs()
    h = Trajectory(1, [0, 1, 1], [1, 0, 0], [p[0, 1], p[1, 0], p[1, 0]], [1.0, 2.0, -1.0])
    assert pdis(h, pi, 0.9) == pytest.approx(1.0 + 0.9 * 2.0 - 0.81, abs=1e-14)


def test_one_step_example():
    pi = SoftmaxPolicy.from_probs([[0.6, 0.4]])
    h = Trajectory(1, [0], [0], [0.3], [2.0])
    assert pdis(h, pi, 0.5) == pytest.approx(4.0, abs=1e-14)


def test_zero_rewards_zero_gradient():
    pi = SoftmaxPolicy([[0.1, 0.2]])
    p = pi.probs()
    h = Trajectory(1, [0, 0], [0, 1], [p[0, 0], p[0, 1]], [0.0, 0.0])
    value, grad = pdis_with_grad(h, pi, 0.9)
    assert value == 0.0
    assert np.all(grad == 0)


def test_single_step_gradient_closed_form():
    pi = SoftmaxPolicy([[0.4, -0.3, 0.1]])
    h = Trajectory(1, [0], [2], [0.2], [1.5])
    _, grad = pdis_with_grad(h, pi, 0.0)
    want = pi.action_prob(0, 2) / 0.2 * 1.5 * pi.grad_log_prob(0, 2)
    assert np.allclose(grad, want, atol=1e-15)


def test_matches_step_loop(rng):
    for _ in range(20):
        h = random_trajectory(rng)
        pi = SoftmaxPolicy(rng.normal(size=(3, 2)), temperature=rng.uniform(0.5, 2))
        assert pdis(h, pi, 0.9) == pytest.approx(loop_pdis(h, pi, 0.9), rel=1e-12, abs=1e-14)


def test_gradient_finite_difference(rng):
    for _ in range(10):
        h = random_trajectory(rng, T=5)
        temp = rng.uniform(0.5, 2)
        theta = rng.normal(size=(3, 2))
        _, grad = pdis_with_grad(h, SoftmaxPolicy(theta, temp), 0.95)
        fd = central_diff(lambda t: pdis(h, SoftmaxPolicy(t, temp), 0.95), theta)
        assert rel_err(grad, fd) < 1e-4


def test_unbiased_on_enumerable_mdp(rng):
    for _ in range(5):
        env = random_tabular_nsmdp(rng, n_states=2, n_actions=2, horizon=2, gamma=0.8)
        target = SoftmaxPolicy(rng.normal(size=(2, 2)))
        behavior = SoftmaxPolicy(rng.normal(size=(2, 2)))
        k = int(rng.integers(1, 50))
        assert expected_pdis(env, target, behavior, k) == pytest.approx(
            true_performance(env, target, k), abs=1e-10)


def test_batch_matches_single(rng):
    trajs = [random_trajectory(rng, T=int(rng.integers(1, 5)), k=k) for k in (5, 2, 9, 3)]
    pi = SoftmaxPolicy(rng.normal(size=(3, 2)))
    batch = TrajectoryBatch.from_trajectories(trajs)
    values, jac = batch.pdis_with_grad(pi, 0.9)
    ordered = sorted(trajs, key=lambda h: h.episode)
    assert list(batch.episodes) == [2, 3, 5, 9]
    for i, h in enumerate(ordered):
        v, g = pdis_with_grad(h, pi, 0.9)
        assert values[i] == v
        assert np.allclose(jac[i], g, atol=1e-14)
    series = batch.series(pi, 0.9)
    assert np.array_equal(series.estimates, values)


def test_value_identical_to_pdis(rng):
    for _ in range(10):
        h = random_trajectory(rng)
        pi = SoftmaxPolicy(rng.normal(size=(3, 2)))
        assert pdis_with_grad(h, pi, 0.7)[0] == pdis(h, pi, 0.7)


def test_behavior_floor():
    h = Trajectory(1, [0], [0], [1e-9], [1.0])
    with pytest.raises(FullSupportError):
        pdis(h, SoftmaxPolicy.uniform(1, 2), 0.0)


def test_weight_cap_bounds_each_term():
    h = Trajectory(1, [0, 0], [0, 0], [0.01, 0.01], [1.0, 1.0])
    pi = SoftmaxPolicy.uniform(1, 2)
    assert pdis(h, pi, 1 - 1e-12) == pytest.approx(50 + 2500, rel=1e-9)
    assert pdis(h, pi, 1 - 1e-12, max_weight=10.0) == pytest.approx(20.0, rel=1e-9)


def test_long_horizon_is_finite():
    T = 2000
    h = Trajectory(1, np.zeros(T, int), np.zeros(T, int), np.full(T, 0.9), np.ones(T))
    value = pdis(h, SoftmaxPolicy.from_probs([[0.1, 0.9]]), 0.99)
    assert np.isfinite(value) and value >= 0


def test_series_validation():
    with pytest.raises(ValueError):
        PerformanceSeries([1, 1], [0.0, 0.0])
    with pytest.raises(ValueError):
        PerformanceSeries([1, 2], [0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-10, 10))
def test_linear_in_rewards(seed, c):
    rng = np.random.default_rng(seed)
    h = random_trajectory(rng)
    scaled = Trajectory(h.episode, h.states, h.actions, h.behavior_probs, c * h.rewards)
    pi = SoftmaxPolicy(rng.normal(size=(3, 2)))
    assert pdis(scaled, pi, 0.9) == pytest.approx(c * pdis(h, pi, 0.9), rel=1e-12, abs=1e-12)
