"""Fourier-basis least squares over a performance series, and forecasting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import SingularDesignError
from .ope import PerformanceSeries

RANK_TOL = 1e-10


@dataclass(frozen=True)
class FourierBasis:
    """Normalized Fourier features of the episode index.

    Episode i maps to x = i / time_scale and to the row
    [sin(2 pi n x)]_n ++ [cos(2 pi n x)]_n ++ [1], n = 1..order, all divided
    by sqrt(order + 1) so every row has unit norm. Order 0 is the constant
    basis, i.e. a stationarity assumption.
    """

    order: int = 0
    time_scale: float = 1.0

    def __post_init__(self):
        if self.order < 0 or int(self.order) != self.order:
            raise ValueError("order must be a non-negative integer")
        if not self.time_scale > 0:
            raise ValueError("time_scale must be positive")

    @property
    def dim(self) -> int:
        return 2 * self.order + 1

    def matrix(self, episodes) -> np.ndarray:
        x = np.asarray(episodes, dtype=float).ravel() / self.time_scale
        n = np.arange(1, self.order + 1)
        angle = 2 * np.pi * np.outer(x, n)
        ones = np.ones((x.size, 1))
        return np.hstack([np.sin(angle), np.cos(angle), ones]) / np.sqrt(self.order + 1)

    def row(self, episode_index) -> np.ndarray:
        if episode_index < 0:
            raise ValueError("episode index must be non-negative")
        return self.matrix([episode_index])[0]


@dataclass(frozen=True, eq=False)
class RegressionFit:
    episodes: np.ndarray
    Phi: np.ndarray
    w_hat: np.ndarray
    Y: np.ndarray
    Y_hat: np.ndarray
    residuals: np.ndarray
    hat_core: np.ndarray  # (Phi^T Phi)^{-1} Phi^T, shape (p, k)


def hat_core(Phi: np.ndarray) -> np.ndarray:
    """(Phi^T Phi)^{-1} Phi^T via a QR factorization, with a rank check."""
    k, p = Phi.shape
    if k < p + 1:
        raise SingularDesignError(f"{k} points cannot fit {p} parameters with residual dof")
    Q, R = np.linalg.qr(Phi)
    diag = np.abs(np.diag(R))
    if diag.min() <= RANK_TOL * max(diag.max(), 1.0):
        raise SingularDesignError(
            f"design matrix is rank deficient (min |R_ii| = {diag.min():.3g})")
    return solve_triangular(R, Q.T)


def fit(basis: FourierBasis, series: PerformanceSeries) -> RegressionFit:
    """Least-squares fit of the series on the basis."""
    Phi = basis.matrix(series.episodes)
    H = hat_core(Phi)
    Y = series.estimates
    w_hat = H @ Y
    Y_hat = Phi @ w_hat
    return RegressionFit(series.episodes, Phi, w_hat, Y, Y_hat, Y - Y_hat, H)


def forecast(fit: RegressionFit, basis: FourierBasis, horizon_episodes: Sequence[int]):
    """Mean forecast over ``horizon_episodes`` and its heteroscedasticity-consistent variance.

    Returns (rho_hat, V_hat, residuals) where V_hat is the mean of the
    |tau| x |tau| matrix phi_tau H diag(residuals^2) H^T phi_tau^T.
    """
    tau = np.asarray(horizon_episodes).ravel()
    if tau.size == 0:
        raise ValueError("forecast needs at least one future episode")
    if fit.episodes.size and tau.min() <= fit.episodes.max():
        raise ValueError("forecast episodes must come after the fitted episodes")
    A = basis.matrix(tau) @ fit.hat_core
    rho_hat = float(np.mean(A @ fit.Y))
    cov = (A * fit.residuals ** 2) @ A.T
    return rho_hat, float(np.mean(cov)), fit.residuals


def forecast_weights(fit: RegressionFit, basis: FourierBasis, horizon_episodes) -> np.ndarray:
    """Vector g with rho_hat = g @ Y: the mean row of phi_tau H."""
    return (basis.matrix(horizon_episodes) @ fit.hat_core).mean(axis=0)
