"""Non-stationary environments with exact performance oracles.

Two kinds of environment are provided. ``TabularNSMDP`` is a finite-horizon
tabular MDP whose transition and mean-reward tables are functions of the
episode index. ``SeasonalRecoSys`` is a one-step recommender (a bandit) whose
item rewards follow sinusoids over episodes. Both are immutable; sampling
always goes through an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np

from .errors import FullSupportError, UnsupportedOracleError
from .policy import SoftmaxPolicy

_SUM_TOL = 1e-12


@dataclass(frozen=True)
class UniformNoise:
    """Zero-mean uniform reward noise on [-half_width, half_width]."""

    half_width: float = 0.0

    def sample(self, rng: np.random.Generator, mean: float) -> float:
        if self.half_width == 0:
            return float(mean)
        return float(mean + rng.uniform(-self.half_width, self.half_width))

    def support(self) -> float:
        return self.half_width


@dataclass(frozen=True)
class SignedBernoulli:
    """Reward of +/- r_max with the probability that gives the requested mean."""

    r_max: float = 1.0

    def sample(self, rng: np.random.Generator, mean: float) -> float:
        p_plus = 0.5 * (1.0 + mean / self.r_max)
        return self.r_max if rng.random() < p_plus else -self.r_max

    def support(self) -> float:
        return 0.0


@dataclass(frozen=True)
class Trajectory:
    """One logged episode.

    ``behavior_probs[t]`` is the probability the acting policy gave to
    ``actions[t]`` in ``states[t]``.
    """

    episode: int
    states: np.ndarray
    actions: np.ndarray
    behavior_probs: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        for name, dtype in (("states", int), ("actions", int),
                            ("behavior_probs", float), ("rewards", float)):
            arr = np.array(getattr(self, name), dtype=dtype, copy=True).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.states.size
        if not (self.actions.size == self.behavior_probs.size == self.rewards.size == n):
            raise ValueError("trajectory fields must have equal length")
        if np.any(self.behavior_probs <= 0) or np.any(self.behavior_probs > 1):
            raise FullSupportError("behavior probabilities must lie in (0, 1]")

    def __len__(self) -> int:
        return self.states.size

    @property
    def steps(self) -> List[Tuple[int, int, float, float]]:
        return list(zip(self.states.tolist(), self.actions.tolist(),
                        self.behavior_probs.tolist(), self.rewards.tolist()))

    def discounted_return(self, gamma: float) -> float:
        return float(np.sum(gamma ** np.arange(len(self)) * self.rewards))


# --------------------------------------------------------------------------- #
# Tabular NS-MDP
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class TabularNSMDP:
    """Finite-horizon tabular MDP with episode-dependent dynamics.

    ``transition_fn(k)`` returns an array of shape (S, A, S) and
    ``mean_reward_fn(k)`` one of shape (S, A). Episodes last exactly
    ``horizon`` steps.
    """

    n_states: int
    n_actions: int
    gamma: float
    r_max: float
    start_dist: np.ndarray
    transition_fn: Callable[[int], np.ndarray]
    mean_reward_fn: Callable[[int], np.ndarray]
    reward_noise: object = field(default_factory=UniformNoise)
    horizon: int = 1

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        d0 = np.asarray(self.start_dist, dtype=float)
        if d0.shape != (self.n_states,) or abs(d0.sum() - 1) > _SUM_TOL or np.any(d0 < 0):
            raise ValueError("start_dist must be a probability vector over states")
        object.__setattr__(self, "start_dist", d0)

    def transitions(self, k: int) -> np.ndarray:
        P = np.asarray(self.transition_fn(k), dtype=float)
        if P.shape != (self.n_states, self.n_actions, self.n_states):
            raise ValueError(f"transition table has shape {P.shape}")
        if np.any(np.abs(P.sum(axis=2) - 1) > _SUM_TOL) or np.any(P < 0):
            raise ValueError(f"transition rows at episode {k} are not distributions")
        return P

    def mean_rewards(self, k: int) -> np.ndarray:
        R = np.asarray(self.mean_reward_fn(k), dtype=float)
        if R.shape != (self.n_states, self.n_actions):
            raise ValueError(f"reward table has shape {R.shape}")
        if np.any(np.abs(R) > self.r_max + 1e-12):
            raise ValueError(f"mean rewards at episode {k} exceed r_max")
        return R


@dataclass(frozen=True)
class MixtureDrift:
    """Tables that oscillate between two anchors: (1 - w_k) A + w_k B.

    The weight is w_k = (1 + sin(2 pi speed k / season_length)) / 2; speed 0
    keeps the weight at 1/2 forever.
    """

    anchor_a: np.ndarray
    anchor_b: np.ndarray
    speed: int = 0
    season_length: float = 100.0

    def weight(self, k: int) -> float:
        return 0.5 * (1.0 + np.sin(2 * np.pi * self.speed * k / self.season_length))

    def __call__(self, k: int) -> np.ndarray:
        w = self.weight(k)
        return (1 - w) * self.anchor_a + w * self.anchor_b


@dataclass(frozen=True)
class _StepSchedule:
    """Table equal to ``tables[min(k, len)-1]``; episodes start at 1."""

    tables: Tuple[np.ndarray, ...]

    def __call__(self, k: int) -> np.ndarray:
        return self.tables[min(max(k, 1), len(self.tables)) - 1]


def appendix_b_env() -> TabularNSMDP:
    """Two-state, one-action NS-MDP on which the drift bound is attained.

    Episode 1: from s1 the reward is +1 surely and the next state is s2.
    Episode 2 onwards: the s1 reward is +1 w.p. 0.9 and -1 w.p. 0.1 (mean
    0.8), and s1 is revisited with probability 0.1. gamma = 0, so only the
    first reward counts.
    """
    p1 = np.array([[[0.0, 1.0]], [[0.0, 1.0]]])
    p2 = np.array([[[0.1, 0.9]], [[0.0, 1.0]]])
    r1 = np.array([[1.0], [0.0]])
    r2 = np.array([[0.8], [0.0]])
    return TabularNSMDP(
        n_states=2, n_actions=1, gamma=0.0, r_max=1.0,
        start_dist=np.array([1.0, 0.0]),
        transition_fn=_StepSchedule((p1, p2)),
        mean_reward_fn=_StepSchedule((r1, r2)),
        reward_noise=SignedBernoulli(1.0),
        horizon=2,
    )


def random_tabular_nsmdp(rng: np.random.Generator, n_states: int = 3, n_actions: int = 2,
                         horizon: int = 3, gamma: float = 0.9, speed: int = 1,
                         season_length: float = 100.0, r_max: float = 1.0,
                         noise: float = 0.05) -> TabularNSMDP:
    """Random NS-MDP whose tables drift smoothly between two random anchors."""
    pa = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    pb = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    # Leave room for the noise inside [-r_max, r_max].
    scale = r_max - noise * r_max
    ra = rng.uniform(-scale, scale, size=(n_states, n_actions))
    rb = rng.uniform(-scale, scale, size=(n_states, n_actions))
    return TabularNSMDP(
        n_states=n_states, n_actions=n_actions, gamma=gamma, r_max=r_max,
        start_dist=rng.dirichlet(np.ones(n_states)),
        transition_fn=MixtureDrift(pa, pb, speed, season_length),
        mean_reward_fn=MixtureDrift(ra, rb, speed, season_length),
        reward_noise=UniformNoise(noise * r_max),
        horizon=horizon,
    )


# --------------------------------------------------------------------------- #
# Seasonal recommender
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SeasonalRecoSys:
    """One-step recommender with seasonal item rewards.

    Item j has mean reward
    ``base_reward[j] + amplitude[j] * sin(2 pi speed k / season_length + phase[j])``
    at episode k, observed with uniform noise of half-width ``noise_scale``.
    """

    base_reward: np.ndarray
    amplitude: np.ndarray
    phase: np.ndarray
    speed: int = 0
    season_length: float = 100.0
    noise_scale: float = 0.0

    n_states = 1
    gamma = 0.0
    horizon = 1

    def __post_init__(self):
        for name in ("base_reward", "amplitude", "phase"):
            arr = np.array(getattr(self, name), dtype=float, copy=True).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.base_reward.size == self.amplitude.size == self.phase.size):
            raise ValueError("item vectors must have equal length")
        if self.speed < 0 or int(self.speed) != self.speed:
            raise ValueError("speed must be a non-negative integer")
        if self.noise_scale < 0 or self.season_length <= 0:
            raise ValueError("noise_scale must be >= 0 and season_length > 0")

    @property
    def n_items(self) -> int:
        return self.base_reward.size

    @property
    def n_actions(self) -> int:
        return self.n_items

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.base_reward) + np.abs(self.amplitude)))

    def item_rewards(self, k: int) -> np.ndarray:
        angle = 2 * np.pi * self.speed * k / self.season_length + self.phase
        return self.base_reward + self.amplitude * np.sin(angle)

    def mean_rewards(self, k: int) -> np.ndarray:
        return self.item_rewards(k)[None, :]


def make_recosys(speed: int = 0, n_items: int = 5, season_length: float = 100.0,
                 reward_scale: float = 10.0, noise_scale: float = None) -> SeasonalRecoSys:
    """The default recommender used by the experiments.

    Every item has mean reward ``reward_scale * (0.55 + 0.45 sin(...))``, so
    rewards stay in [0.1, 1] * reward_scale. Item 0 starts at its peak and
    the others start spread around their trough, which gives one clearly
    best item at speed 0 and a rotating ranking at higher speeds. Noise
    defaults to 5% of r_max.
    """
    if n_items < 2:
        raise ValueError("need at least two items")
    base = np.full(n_items, 0.55 * reward_scale)
    amplitude = np.full(n_items, 0.45 * reward_scale)
    phase = np.pi * np.concatenate([[0.5], np.linspace(1.2, 1.8, n_items - 1)])
    if noise_scale is None:
        noise_scale = 0.05 * float(np.max(base + amplitude))
    return SeasonalRecoSys(base, amplitude, phase, speed, season_length, noise_scale)


# --------------------------------------------------------------------------- #
# Sampling and oracles
# --------------------------------------------------------------------------- #


def _check_policy(env, policy: SoftmaxPolicy) -> np.ndarray:
    if policy.theta.shape != (env.n_states, env.n_actions):
        raise ValueError(f"policy shape {policy.theta.shape} does not match environment "
                         f"({env.n_states}, {env.n_actions})")
    probs = policy.probs()
    if np.any(probs <= 0):
        policy.require_full_support()
    return probs


def rollout(env, policy: SoftmaxPolicy, episode_index: int,
            rng: np.random.Generator) -> Trajectory:
    """Run one episode of ``policy`` and log its action probabilities."""
    probs = _check_policy(env, policy)
    if isinstance(env, SeasonalRecoSys):
        a = int(rng.choice(env.n_items, p=probs[0]))
        mean = env.item_rewards(episode_index)[a]
        r = mean if env.noise_scale == 0 else mean + rng.uniform(-env.noise_scale, env.noise_scale)
        return Trajectory(episode_index, [0], [a], [probs[0, a]], [r])
    if not isinstance(env, TabularNSMDP):
        raise TypeError(f"cannot roll out in {type(env).__name__}")

    P = env.transitions(episode_index)
    R = env.mean_rewards(episode_index)
    states, actions, betas, rewards = [], [], [], []
    s = int(rng.choice(env.n_states, p=env.start_dist))
    for _ in range(env.horizon):
        a = int(rng.choice(env.n_actions, p=probs[s]))
        states.append(s)
        actions.append(a)
        betas.append(probs[s, a])
        rewards.append(env.reward_noise.sample(rng, R[s, a]))
        s = int(rng.choice(env.n_states, p=P[s, a]))
    return Trajectory(episode_index, states, actions, betas, rewards)


def true_performance(env, policy: SoftmaxPolicy, episode_index: int) -> float:
    """Exact expected discounted return of ``policy`` during one episode."""
    if isinstance(env, SeasonalRecoSys):
        return float(policy.probs()[0] @ env.item_rewards(episode_index))
    if isinstance(env, TabularNSMDP):
        pi = policy.probs()
        P = env.transitions(episode_index)
        R = env.mean_rewards(episode_index)
        v = np.zeros(env.n_states)
        for _ in range(env.horizon):
            q = R + env.gamma * P @ v
            v = (pi * q).sum(axis=1)
        return float(env.start_dist @ v)
    raise UnsupportedOracleError(f"no performance oracle for {type(env).__name__}")


def optimal_performance(env, episode_index: int) -> float:
    """Best achievable expected return during one episode.

    For tabular environments this is the finite-horizon optimum over
    time-dependent deterministic policies.
    """
    if isinstance(env, SeasonalRecoSys):
        return float(env.item_rewards(episode_index).max())
    if isinstance(env, TabularNSMDP):
        P = env.transitions(episode_index)
        R = env.mean_rewards(episode_index)
        v = np.zeros(env.n_states)
        for _ in range(env.horizon):
            v = (R + env.gamma * P @ v).max(axis=1)
        return float(env.start_dist @ v)
    raise UnsupportedOracleError(f"no performance oracle for {type(env).__name__}")


def enumerate_trajectories(env: TabularNSMDP, policy: SoftmaxPolicy, episode_index: int):
    """Yield (probability, states, actions, mean_rewards) for every path.

    Exponential in the horizon; meant for exact checks on tiny MDPs.
    """
    pi = policy.probs()
    P = env.transitions(episode_index)
    R = env.mean_rewards(episode_index)
    S, A, T = env.n_states, env.n_actions, env.horizon
    for path in itertools.product(range(S), range(A), repeat=T):
        states, actions = path[0::2], path[1::2]
        prob = env.start_dist[states[0]]
        for t in range(T):
            prob *= pi[states[t], actions[t]]
            if t + 1 < T:
                prob *= P[states[t], actions[t], states[t + 1]]
        if prob > 0:
            yield prob, states, actions, [R[s, a] for s, a in zip(states, actions)]


# --------------------------------------------------------------------------- #
# Smoothness of performance over time
# --------------------------------------------------------------------------- #


def lipschitz_bound(gamma: float, r_max: float, eps_p: float, eps_r: float,
                    delta: float = 1) -> float:
    """Worst-case change in performance over ``delta`` episodes of drift."""
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    if min(r_max, eps_p, eps_r) < 0 or delta < 1:
        raise ValueError("r_max, eps_p and eps_r must be >= 0 and delta >= 1")
    return delta * (gamma * r_max * eps_p / (1 - gamma) ** 2 + eps_r / (1 - gamma))


def drift_constants(env: TabularNSMDP, k: int) -> Tuple[float, float]:
    """Largest L1 transition change and mean-reward change from episode k to k+1."""
    dp = np.abs(env.transitions(k) - env.transitions(k + 1)).sum(axis=2)
    dr = np.abs(env.mean_rewards(k) - env.mean_rewards(k + 1))
    return float(dp.max()), float(dr.max())
