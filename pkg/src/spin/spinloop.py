"""The deployment loop: collect, split, search, safety-test, deploy.

``spin_run`` models the performance trend with a Fourier basis;
``baseline_run`` is the same loop with the constant basis, i.e. it assumes
the environment is stationary and compares average past performance.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .candidate import SearchConfig, candidate_search
from .envsim import Trajectory, rollout
from .errors import SpinError
from .forecast import FourierBasis
from .ope import TrajectoryBatch
from .policy import SoftmaxPolicy
from .wildboot import prediction_interval_t

logger = logging.getLogger(__name__)

SAFE_POLICY_ID = 0

# spawn-key tags for the independent random streams of a run
_EPISODE_STREAM = 0
_DECISION_STREAM = 1


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 0.05
    delta: int = 4
    n_steps: int = 8
    learning_rate: float = 0.1
    entropy_coeff: float = 0.01
    B_candidate: int = 200
    B_safety: int = 500
    basis: FourierBasis = field(default_factory=FourierBasis)
    train_fraction: float = 0.5
    episode_budget: int = 200
    reuse_test_data: bool = True
    temperature: float = 1.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.delta < 1 or self.episode_budget < 0:
            raise ValueError("delta must be >= 1 and episode_budget >= 0")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass
class EpisodeRecord:
    episode: int
    policy_id: int
    ret: float


@dataclass
class DecisionRecord:
    k: int
    passed: bool
    lb_candidate: float
    ub_safe: float
    deployed_policy_id: int
    theta_candidate: Optional[np.ndarray] = None
    error: Optional[str] = None


@dataclass
class DeploymentLog:
    episodes: List[EpisodeRecord] = field(default_factory=list)
    decisions: List[DecisionRecord] = field(default_factory=list)
    policies: Dict[int, np.ndarray] = field(default_factory=dict)
    error: Optional[str] = None

    def deployed_episodes(self, decision: DecisionRecord) -> List[EpisodeRecord]:
        """Episodes run by the policy chosen at ``decision``."""
        later = [d.k for d in self.decisions if d.k > decision.k]
        stop = min(later) if later else math.inf
        return [e for e in self.episodes if decision.k < e.episode <= stop]


@dataclass(frozen=True)
class SafetyTestResult:
    passed: bool
    lb_candidate: float = math.nan
    ub_safe: float = math.nan
    error: Optional[str] = None

    def __bool__(self) -> bool:
        return self.passed


def _stream(seed: np.random.SeedSequence, *key: int) -> np.random.Generator:
    child = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + key)
    return np.random.default_rng(child)


def episode_rng(seed, k: int) -> np.random.Generator:
    """The random stream that drives episode ``k`` of a run with this seed."""
    return _stream(_as_seed_sequence(seed), _EPISODE_STREAM, k)


def _as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def split_batch(batch: Sequence[Trajectory], train_fraction: float,
                rng: np.random.Generator):
    """Random disjoint (train, test) partition of one batch of trajectories."""
    n = len(batch)
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    if n * min(train_fraction, 1 - train_fraction) < 1 - 1e-9:
        raise ValueError(f"a batch of {n} cannot be split {train_fraction:g}/{1 - train_fraction:g}")
    n_train = min(max(int(math.floor(n * train_fraction + 0.5)), 1), n - 1)
    perm = rng.permutation(n)
    train = [batch[i] for i in sorted(perm[:n_train])]
    test = [batch[i] for i in sorted(perm[n_train:])]
    return train, test


def safety_test(test_data, theta_c, theta_safe, alpha: float, basis: FourierBasis,
                tau: Sequence[int], B: int, rng: np.random.Generator, *,
                gamma: float = 0.0, temperature: float = 1.0) -> SafetyTestResult:
    """Pass iff the candidate's lower bound strictly exceeds the safe policy's upper bound.

    Both bounds come from t-statistic intervals at level alpha / 2. Any
    estimation failure fails the test.
    """
    try:
        batch = test_data if isinstance(test_data, TrajectoryBatch) else \
            TrajectoryBatch.from_trajectories(list(test_data))
        if len(batch) == 0:
            raise ValueError("safety test needs test data")
        cand = SoftmaxPolicy(theta_c, temperature)
        safe = SoftmaxPolicy(theta_safe, temperature)
        lb = prediction_interval_t(batch.series(cand, gamma), basis, tau, alpha / 2, B, rng).lb
        ub = prediction_interval_t(batch.series(safe, gamma), basis, tau, alpha / 2, B, rng).ub
    except (SpinError, ValueError) as exc:
        return SafetyTestResult(False, error=f"{type(exc).__name__}: {exc}")
    return SafetyTestResult(bool(lb > ub), lb, ub)


def spin_run(env, pi_safe_theta, run_config: RunConfig,
             seed: Union[int, np.random.SeedSequence] = 0) -> DeploymentLog:
    """Run the safe policy improvement loop for ``run_config.episode_budget`` episodes.

    Randomness is split into independent streams keyed by episode and by
    decision, so a logged episode can be replayed from the seed alone.
    """
    cfg = run_config
    seed = _as_seed_sequence(seed)
    gamma = float(env.gamma)
    safe_theta = np.array(pi_safe_theta, dtype=float)
    safe = SoftmaxPolicy(safe_theta, cfg.temperature)
    log = DeploymentLog(policies={SAFE_POLICY_ID: safe_theta.copy()})

    current_id, current = SAFE_POLICY_ID, safe
    train: List[Trajectory] = []
    test: List[Trajectory] = []
    min_points = cfg.basis.dim + 1
    k = 0
    try:
        while k < cfg.episode_budget:
            batch = []
            for _ in range(min(cfg.delta, cfg.episode_budget - k)):
                k += 1
                h = rollout(env, current, k, episode_rng(seed, k))
                log.episodes.append(EpisodeRecord(k, current_id, h.discounted_return(gamma)))
                batch.append(h)
            if k >= cfg.episode_budget:
                break

            n_dec = len(log.decisions)
            d1, d2 = split_batch(batch, cfg.train_fraction,
                                 _stream(seed, _DECISION_STREAM, n_dec, 0))
            train.extend(d1)
            test.extend(d2)
            tau = list(range(k + 1, k + min(cfg.delta, cfg.episode_budget - k) + 1))

            record = DecisionRecord(k, False, math.nan, math.nan, SAFE_POLICY_ID)
            if len(train) < min_points:
                record.error = f"only {len(train)} training trajectories"
            else:
                search = SearchConfig(
                    n_steps=cfg.n_steps, learning_rate=cfg.learning_rate,
                    entropy_coeff=cfg.entropy_coeff, alpha=cfg.alpha, B=cfg.B_candidate,
                    basis=cfg.basis, horizon=tau, gamma=gamma, temperature=cfg.temperature)
                try:
                    theta_c = candidate_search(current.theta, train, search,
                                               _stream(seed, _DECISION_STREAM, n_dec, 1))
                except (SpinError, ValueError, FloatingPointError) as exc:
                    record.error = f"search: {type(exc).__name__}: {exc}"
                else:
                    record.theta_candidate = theta_c
                    result = safety_test(test, theta_c, safe_theta, cfg.alpha, cfg.basis, tau,
                                         cfg.B_safety, _stream(seed, _DECISION_STREAM, n_dec, 2),
                                         gamma=gamma, temperature=cfg.temperature)
                    record.passed = result.passed
                    record.lb_candidate, record.ub_safe = result.lb_candidate, result.ub_safe
                    record.error = result.error
                    if not cfg.reuse_test_data and result.error is None:
                        test = []

            if record.passed:
                current_id = n_dec + 1
                log.policies[current_id] = record.theta_candidate.copy()
                current = SoftmaxPolicy(record.theta_candidate, cfg.temperature)
            else:
                current_id, current = SAFE_POLICY_ID, safe
            record.deployed_policy_id = current_id
            log.decisions.append(record)
    except Exception as exc:  # abort with a partial log
        logger.exception("run aborted at episode %d", k)
        log.error = f"{type(exc).__name__}: {exc}"
    return log


def baseline_run(env, pi_safe_theta, run_config: RunConfig,
                 seed: Union[int, np.random.SeedSequence] = 0) -> DeploymentLog:
    """``spin_run`` with the constant basis (stationarity assumption)."""
    basis = FourierBasis(0, run_config.basis.time_scale)
    return spin_run(env, pi_safe_theta, replace(run_config, basis=basis), seed)
