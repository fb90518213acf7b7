"""Candidate policy search by gradient ascent on a bootstrap lower bound.

The objective is the percentile lower bound on mean future performance plus
an entropy bonus. With the Rademacher draws frozen, every replicate
forecast is a fixed linear map of the PDIS estimates, rho*_b = C_b @ Y(theta),
so the only non-smooth step is picking the order statistic. Its gradient
is taken straight through the sort: the gradient of whichever replicate
currently sits at the lower order statistic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .envsim import Trajectory
from .forecast import FourierBasis, hat_core
from .ope import TrajectoryBatch
from .policy import SoftmaxPolicy
from .wildboot import BootstrapDraws, draw_rademacher, order_stat_indices, replicate_coefficients


@dataclass(frozen=True)
class SearchConfig:
    n_steps: int
    learning_rate: float
    entropy_coeff: float
    alpha: float
    B: int
    basis: FourierBasis
    horizon: Sequence[int]
    gamma: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if self.learning_rate < 0 or self.entropy_coeff < 0:
            raise ValueError("learning_rate and entropy_coeff must be non-negative")
        if len(self.horizon) == 0:
            raise ValueError("horizon must name at least one future episode")

    @property
    def search_alpha(self) -> float:
        # Candidate search uses the same alpha/2 interval as each side of the safety test.
        return self.alpha / 2


def _as_batch(train_data) -> TrajectoryBatch:
    if isinstance(train_data, TrajectoryBatch):
        return train_data
    return TrajectoryBatch.from_trajectories(list(train_data))


class LowerBoundObjective:
    """theta -> (percentile lower bound + entropy bonus, gradient).

    Everything that depends only on the data, the basis and the draws is
    precomputed once, so repeated evaluations during a search are cheap.
    """

    def __init__(self, train_data: Union[TrajectoryBatch, Sequence[Trajectory]],
                 config: SearchConfig, draws: BootstrapDraws):
        self.batch = _as_batch(train_data)
        self.config = config
        k = len(self.batch)
        if k == 0:
            raise ValueError("candidate search needs training data")
        if draws.k != k:
            raise ValueError(f"draws have {draws.k} columns for {k} trajectories")
        Phi = config.basis.matrix(self.batch.episodes)
        H = hat_core(Phi)
        g = (config.basis.matrix(config.horizon) @ H).mean(axis=0)
        self.coefficients = replicate_coefficients(Phi, H, g, draws)
        self.lower_index, _ = order_stat_indices(config.search_alpha, draws.B)
        self.states = self.batch.visited_states()

    def selected_replicate(self, theta) -> int:
        policy = SoftmaxPolicy(theta, self.config.temperature)
        rho_star = self.coefficients @ self.batch.pdis(policy, self.config.gamma)
        return int(np.argsort(rho_star, kind="stable")[self.lower_index])

    def __call__(self, theta):
        cfg = self.config
        policy = SoftmaxPolicy(theta, cfg.temperature)
        Y, jac = self.batch.pdis_with_grad(policy, cfg.gamma)
        rho_star = self.coefficients @ Y
        b = int(np.argsort(rho_star, kind="stable")[self.lower_index])
        value = float(rho_star[b])
        grad = np.tensordot(self.coefficients[b], jac, axes=1)
        if cfg.entropy_coeff > 0:
            h, h_grad = policy.entropy(self.states)
            value += cfg.entropy_coeff * h
            grad = grad + cfg.entropy_coeff * h_grad
        return value, grad


def objective_with_grad(theta, train_data, config: SearchConfig, frozen_draws: BootstrapDraws):
    """Percentile lower bound plus entropy bonus at ``theta``, and its gradient."""
    return LowerBoundObjective(train_data, config, frozen_draws)(theta)


def candidate_search(theta_init, train_data, config: SearchConfig, rng: np.random.Generator,
                     callback: Optional[Callable[[int, np.ndarray, float], None]] = None):
    """Plain gradient ascent from ``theta_init`` with draws frozen for the whole search."""
    batch = _as_batch(train_data)
    draws = draw_rademacher(rng, config.B, len(batch))
    objective = LowerBoundObjective(batch, config, draws)
    theta = np.array(theta_init, dtype=float, copy=True)
    for step in range(config.n_steps):
        value, grad = objective(theta)
        if callback is not None:
            callback(step, theta.copy(), value)
        theta = theta + config.learning_rate * grad
    return theta
