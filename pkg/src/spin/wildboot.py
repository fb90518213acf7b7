"""Wild-bootstrap prediction intervals for mean future performance.

Two flavors share the same pseudo-data Y* = Y_hat + residuals * sigma, with
sigma a Rademacher sign vector:

* ``prediction_interval_t`` studentizes each replicate (t-statistic
  interval); it is the accurate one and is used for safety tests.
* ``prediction_interval_percentile`` reads order statistics of the
  replicate forecasts directly; it is cheaper and piecewise linear in the
  targets, which is what candidate search differentiates.

Order statistics follow 1-based positions floor(q B) for the lower end and
ceil((1 - q) B) for the upper end, q = alpha / 2, converted to 0-based
indices and clamped to the array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .forecast import FourierBasis, RegressionFit, fit, forecast, forecast_weights
from .ope import PerformanceSeries

_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class BootstrapDraws:
    sigma_star: np.ndarray  # (B, k) of +/-1

    @property
    def B(self) -> int:
        return self.sigma_star.shape[0]

    @property
    def k(self) -> int:
        return self.sigma_star.shape[1]


@dataclass(frozen=True)
class PredictionInterval:
    lb: float
    ub: float
    rho_hat: float
    method: str


def draw_rademacher(rng: np.random.Generator, B: int, k: int) -> BootstrapDraws:
    if B < 1 or k < 1:
        raise ValueError("B and k must be positive")
    sigma = rng.integers(0, 2, size=(B, k), dtype=np.int8) * 2 - 1
    sigma.setflags(write=False)
    return BootstrapDraws(sigma)


def order_stat_indices(alpha: float, B: int) -> Tuple[int, int]:
    """0-based positions of the alpha/2 and 1 - alpha/2 order statistics."""
    q = alpha / 2
    lo = math.floor(q * B + _EPS) - 1
    hi = math.ceil((1 - q) * B - _EPS) - 1
    return min(max(lo, 0), B - 1), min(max(hi, 0), B - 1)


def _check_args(alpha: float, B: int) -> None:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if B < 2 / alpha - _EPS:
        raise ValueError(f"B = {B} is too small for alpha = {alpha} (need B >= 2 / alpha)")


def _resolve_draws(draws, rng, B, k) -> BootstrapDraws:
    if draws is None:
        if rng is None:
            raise ValueError("need either draws or an rng")
        return draw_rademacher(rng, B, k)
    if draws.k != k:
        raise ValueError(f"draws have {draws.k} columns but the series has {k} points")
    return draws


def bootstrap_forecasts(reg: RegressionFit, basis: FourierBasis, tau,
                        draws: BootstrapDraws):
    """Refit every pseudo-series and return (rho_star, V_star), each of shape (B,)."""
    tau = np.asarray(tau).ravel()
    Y_star = reg.Y_hat + reg.residuals * draws.sigma_star
    W_star = Y_star @ reg.hat_core.T
    resid_star = Y_star - W_star @ reg.Phi.T
    g = forecast_weights(reg, basis, tau)
    rho_star = Y_star @ g
    # mean_ij of A diag(e^2) A^T equals sum_l (mean_i A_il)^2 e_l^2.
    V_star = resid_star ** 2 @ g ** 2
    return rho_star, V_star


def prediction_interval_t(series: PerformanceSeries, basis: FourierBasis,
                          tau: Sequence[int], alpha: float, B: int,
                          rng: Optional[np.random.Generator] = None,
                          draws: Optional[BootstrapDraws] = None) -> PredictionInterval:
    """Studentized wild-bootstrap interval for the mean performance over ``tau``."""
    _check_args(alpha, B)
    reg = fit(basis, series)
    rho_hat, V_hat, _ = forecast(reg, basis, tau)
    draws = _resolve_draws(draws, rng, B, len(series))
    rho_star, V_star = bootstrap_forecasts(reg, basis, tau, draws)
    degenerate = V_star <= np.finfo(float).tiny
    t_star = np.where(degenerate, 0.0,
                      (rho_star - rho_hat) / np.sqrt(np.where(degenerate, 1.0, V_star)))
    t_sorted = np.sort(t_star, kind="stable")
    lo, hi = order_stat_indices(alpha, draws.B)
    s_hat = math.sqrt(max(V_hat, 0.0))
    return PredictionInterval(rho_hat - t_sorted[hi] * s_hat,
                              rho_hat - t_sorted[lo] * s_hat, rho_hat, "t-statistic")


def percentile_coefficients(reg: RegressionFit, basis: FourierBasis, tau,
                            draws: BootstrapDraws) -> np.ndarray:
    """Matrix C (B, k) with rho_star = C @ Y for fixed design and draws."""
    g = forecast_weights(reg, basis, tau)
    return replicate_coefficients(reg.Phi, reg.hat_core, g, draws)


def replicate_coefficients(Phi: np.ndarray, H: np.ndarray, g: np.ndarray,
                           draws: BootstrapDraws) -> np.ndarray:
    """Rows C_b = g + (g * sigma_b)(I - Phi H).

    The replicate forecast g (P Y + sigma_b * (I - P) Y), P = Phi H, reduces
    to C_b Y because g P = g.
    """
    sg = draws.sigma_star * g
    return g + sg - (sg @ Phi) @ H


def prediction_interval_percentile(series: PerformanceSeries, basis: FourierBasis,
                                   tau: Sequence[int], alpha: float, B: int,
                                   draws: BootstrapDraws):
    """Percentile interval plus the replicates sitting at the two order statistics.

    Returns (interval, (lower_replicate, upper_replicate)).
    """
    _check_args(alpha, B)
    if draws.B != B:
        raise ValueError(f"draws hold {draws.B} replicates, expected {B}")
    reg = fit(basis, series)
    rho_hat, _, _ = forecast(reg, basis, tau)
    draws = _resolve_draws(draws, None, B, len(series))
    rho_star, _ = bootstrap_forecasts(reg, basis, tau, draws)
    order = np.argsort(rho_star, kind="stable")
    lo, hi = order_stat_indices(alpha, B)
    interval = PredictionInterval(float(rho_star[order[lo]]), float(rho_star[order[hi]]),
                                  rho_hat, "percentile")
    return interval, (int(order[lo]), int(order[hi]))
