"""Tabular softmax policies."""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .errors import FullSupportError

# Logged behavior probabilities below this are rejected rather than clipped.
MIN_BEHAVIOR_PROB = 1e-8


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    """pi(a|s) proportional to exp(theta[s, a] / temperature).

    The parameter matrix is copied and made read-only on construction, so
    instances can be shared freely between runs and workers.
    """

    theta: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float, copy=True)
        if theta.ndim != 2:
            raise ValueError(f"theta must be a matrix, got shape {theta.shape}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "SoftmaxPolicy":
        return cls(np.zeros((n_states, n_actions)))

    @classmethod
    def from_probs(cls, probs, temperature: float = 1.0) -> "SoftmaxPolicy":
        """Parameters reproducing the given action probabilities.

        Rows must be strictly positive; each row of theta is log(probs) scaled
        by the temperature and shifted so that it has zero mean.
        """
        probs = np.atleast_2d(np.asarray(probs, dtype=float))
        if np.any(probs <= 0):
            raise ValueError("softmax policies need strictly positive probabilities")
        probs = probs / probs.sum(axis=1, keepdims=True)
        theta = temperature * np.log(probs)
        return cls(theta - theta.mean(axis=1, keepdims=True), temperature)

    @property
    def n_states(self) -> int:
        return self.theta.shape[0]

    @property
    def n_actions(self) -> int:
        return self.theta.shape[1]

    def log_probs(self) -> np.ndarray:
        return _log_softmax(self.theta / self.temperature)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def action_prob(self, s: int, a: int) -> float:
        return float(np.exp(_log_softmax(self.theta[s] / self.temperature)[a]))

    def grad_log_prob(self, s: int, a: int) -> np.ndarray:
        """Gradient of log pi(a|s) with respect to theta (nonzero on row s only)."""
        grad = np.zeros_like(self.theta)
        p = np.exp(_log_softmax(self.theta[s] / self.temperature))
        grad[s] = -p
        grad[s, a] += 1.0
        grad[s] /= self.temperature
        return grad

    def entropy(self, states: Iterable[int]):
        """Mean Shannon entropy (nats) over a multiset of states, with its gradient."""
        states = np.asarray(list(states) if not isinstance(states, np.ndarray) else states,
                            dtype=int).ravel()
        if states.size == 0:
            raise ValueError("entropy needs at least one state")
        weights = np.bincount(states, minlength=self.n_states) / states.size
        logp = self.log_probs()
        p = np.exp(logp)
        h = -(p * logp).sum(axis=1)
        value = float(weights @ h)
        grad = -p * (logp + h[:, None]) / self.temperature
        return value, grad * weights[:, None]

    def with_theta(self, theta) -> "SoftmaxPolicy":
        return SoftmaxPolicy(theta, self.temperature)

    def require_full_support(self, floor: float = 0.0) -> None:
        p = self.probs()
        if np.any(p <= floor):
            s, a = np.argwhere(p <= floor)[0]
            raise FullSupportError(
                f"policy gives probability {p[s, a]:.3g} to action {a} in state {s}")

    def to_csv(self, path: Union[str, Path, None] = None) -> str:
        """Serialize theta as a plain CSV matrix (one state per row)."""
        buf = io.StringIO()
        np.savetxt(buf, self.theta, delimiter=",", fmt="%.17g")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: Union[str, Path], temperature: float = 1.0) -> "SoftmaxPolicy":
        return cls.from_csv_text(Path(path).read_text(), temperature)

    @classmethod
    def from_csv_text(cls, text: str, temperature: float = 1.0) -> "SoftmaxPolicy":
        theta = np.loadtxt(io.StringIO(text), delimiter=",", ndmin=2)
        return cls(theta, temperature)
