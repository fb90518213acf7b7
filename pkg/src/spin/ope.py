"""Per-decision importance sampling (PDIS) and its policy gradient."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .envsim import Trajectory
from .errors import FullSupportError
from .policy import MIN_BEHAVIOR_PROB, SoftmaxPolicy


@dataclass(frozen=True)
class PerformanceSeries:
    """Counterfactual performance estimates ``estimates`` at episodes ``episodes``."""

    episodes: np.ndarray
    estimates: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.episodes, dtype=float).ravel()
        y = np.asarray(self.estimates, dtype=float).ravel()
        if x.size != y.size:
            raise ValueError("episodes and estimates must have equal length")
        if np.any(np.diff(x) <= 0):
            raise ValueError("episodes must be strictly increasing")
        object.__setattr__(self, "episodes", x)
        object.__setattr__(self, "estimates", y)

    def __len__(self) -> int:
        return self.episodes.size


def _check_behavior(beta: np.ndarray) -> None:
    if np.any(beta < MIN_BEHAVIOR_PROB):
        raise FullSupportError(
            f"behavior probability {beta.min():.3g} is below {MIN_BEHAVIOR_PROB:g}")


def pdis(trajectory: Trajectory, policy: SoftmaxPolicy, gamma: float,
         max_weight: Optional[float] = None) -> float:
    """PDIS estimate of ``policy``'s return from one logged trajectory.

    ``max_weight`` optionally caps each cumulative importance weight; it is
    off by default because capping biases the estimate.
    """
    return pdis_with_grad(trajectory, policy, gamma, max_weight)[0]


def pdis_with_grad(trajectory: Trajectory, policy: SoftmaxPolicy, gamma: float,
                   max_weight: Optional[float] = None):
    """PDIS estimate and its gradient with respect to ``policy.theta``."""
    batch = TrajectoryBatch.from_trajectories([trajectory])
    values, jac = batch.pdis_with_grad(policy, gamma, max_weight)
    return float(values[0]), jac[0]


class TrajectoryBatch:
    """A set of trajectories packed into padded arrays for vectorized PDIS.

    Trajectories are ordered by episode index. Padding steps carry a zero
    mask and contribute nothing.
    """

    def __init__(self, episodes, states, actions, behavior_probs, rewards, mask):
        self.episodes = np.asarray(episodes, dtype=int)
        self.states = states
        self.actions = actions
        self.behavior_probs = behavior_probs
        self.rewards = rewards
        self.mask = mask
        _check_behavior(behavior_probs[mask])

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> "TrajectoryBatch":
        trajs = sorted(trajectories, key=lambda h: h.episode)
        n = len(trajs)
        T = max((len(h) for h in trajs), default=0)
        states = np.zeros((n, T), dtype=int)
        actions = np.zeros((n, T), dtype=int)
        betas = np.ones((n, T))
        rewards = np.zeros((n, T))
        mask = np.zeros((n, T), dtype=bool)
        for i, h in enumerate(trajs):
            m = len(h)
            states[i, :m] = h.states
            actions[i, :m] = h.actions
            betas[i, :m] = h.behavior_probs
            rewards[i, :m] = h.rewards
            mask[i, :m] = True
        return cls([h.episode for h in trajs], states, actions, betas, rewards, mask)

    def __len__(self) -> int:
        return self.episodes.size

    def visited_states(self) -> np.ndarray:
        return self.states[self.mask]

    def _weights(self, policy: SoftmaxPolicy, gamma: float, max_weight):
        logp = policy.log_probs()[self.states, self.actions]
        log_ratio = np.where(self.mask, logp - np.log(self.behavior_probs), 0.0)
        weights = np.exp(np.cumsum(log_ratio, axis=1))
        if max_weight is not None:
            weights = np.minimum(weights, max_weight)
        discount = gamma ** np.arange(self.states.shape[1])
        return weights * discount * self.rewards * self.mask

    def pdis(self, policy: SoftmaxPolicy, gamma: float, max_weight=None) -> np.ndarray:
        return self._weights(policy, gamma, max_weight).sum(axis=1)

    def pdis_with_grad(self, policy: SoftmaxPolicy, gamma: float, max_weight=None):
        """Per-trajectory estimates (n,) and their Jacobian (n, S, A).

        d/dtheta of sum_t c_t prod_{l<=t} w_l equals
        sum_l grad log pi(a_l|s_l) * sum_{t>=l} c_t prod_{l'<=t} w_l'.
        Capped weights are treated as constants.
        """
        terms = self._weights(policy, gamma, max_weight)
        values = terms.sum(axis=1)
        if max_weight is not None:
            logp = policy.log_probs()[self.states, self.actions]
            raw = np.exp(np.cumsum(np.where(self.mask, logp - np.log(self.behavior_probs), 0.0),
                                   axis=1))
            terms = np.where(raw > max_weight, 0.0, terms)
        tail = np.cumsum(terms[:, ::-1], axis=1)[:, ::-1] * self.mask
        n, T = self.states.shape
        S, A = policy.theta.shape
        probs = policy.probs()
        jac = np.zeros((n, S, A))
        rows = np.repeat(np.arange(n), T)
        s_flat = self.states.ravel()
        t_flat = tail.ravel()
        # -tail * pi(.|s) on the visited row, +tail on the taken action.
        np.add.at(jac, (rows, s_flat), -t_flat[:, None] * probs[s_flat])
        np.add.at(jac, (rows, s_flat, self.actions.ravel()), t_flat)
        return values, jac / policy.temperature

    def series(self, policy: SoftmaxPolicy, gamma: float) -> PerformanceSeries:
        return PerformanceSeries(self.episodes, self.pdis(policy, gamma))
