"""Experiment plumbing: configs, single runs, metrics, seeded sweeps.

A run writes plain CSVs and nothing else; figures are left to whoever
reads them. Config values are resolved in increasing priority from the
dataclass defaults, a flat ``key = value`` file, ``SPIN_<KEY>`` environment
variables and explicit overrides (the CLI flags).
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .envsim import (SeasonalRecoSys, TabularNSMDP, appendix_b_env, make_recosys, optimal_performance,
                     random_tabular_nsmdp, true_performance)
from .errors import ConfigError, UnsupportedOracleError
from .forecast import FourierBasis
from .policy import SoftmaxPolicy
from .spinloop import (SAFE_POLICY_ID, DecisionRecord, DeploymentLog, EpisodeRecord, RunConfig,
                       baseline_run, spin_run)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ENV_PREFIX = "SPIN_"
DOMAINS = ("recosys", "tabular", "appendix-b")
ALGORITHMS = ("spin", "baseline")

EPISODE_COLUMNS = ("episode", "policy_id", "return", "true_perf", "safe_true_perf")
DECISION_COLUMNS = ("k", "passed", "lb_candidate", "ub_safe", "deployed_policy_id")
METRIC_COLUMNS = ("algorithm", "speed", "seed", "violation_rate",
                  "mean_normalized_improvement", "deploy_rate")
IMPROVEMENT_NOTE = ("normalized improvement = mean over episodes of "
                    "(rho(deployed,k) - rho(safe,k)) / (rho(optimal,k) - rho(safe,k))")


@dataclass(frozen=True)
class ExperimentConfig:
    domain: str = "recosys"
    algorithm: str = "spin"
    speed: int = 0
    alpha: float = 0.05
    delta: int = 8
    n_steps: int = 16
    learning_rate: float = 0.1
    entropy_coeff: float = 0.01
    B_candidate: int = 200
    B_safety: int = 500
    fourier_order: int = 3
    train_fraction: float = 0.5
    episode_budget: int = 2000
    seed: int = 0
    reuse_test_data: bool = True
    # domain knobs; 0 means "derive from the budget"
    n_items: int = 10
    season_length: float = 0.0
    time_scale: float = 0.0
    reward_scale: float = 10.0
    noise_scale: float = -1.0  # negative: 5% of r_max

    def __post_init__(self):
        _validate(self)

    @property
    def resolved_season_length(self) -> float:
        return self.season_length or float(max(self.episode_budget, 1))

    @property
    def resolved_time_scale(self) -> float:
        return self.time_scale or float(max(self.episode_budget, 1))

    def run_config(self) -> RunConfig:
        return RunConfig(
            alpha=self.alpha, delta=self.delta, n_steps=self.n_steps,
            learning_rate=self.learning_rate, entropy_coeff=self.entropy_coeff,
            B_candidate=self.B_candidate, B_safety=self.B_safety,
            basis=FourierBasis(self.fourier_order, self.resolved_time_scale),
            train_fraction=self.train_fraction, episode_budget=self.episode_budget,
            reuse_test_data=self.reuse_test_data)

    def to_text(self) -> str:
        lines = [f"# spin config v{SCHEMA_VERSION}"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _validate(cfg: ExperimentConfig) -> None:
    checks = [
        ("domain", cfg.domain in DOMAINS, f"must be one of {', '.join(DOMAINS)}"),
        ("algorithm", cfg.algorithm in ALGORITHMS, f"must be one of {', '.join(ALGORITHMS)}"),
        ("speed", cfg.speed >= 0, "must be >= 0"),
        ("alpha", 0 < cfg.alpha <= 1, "must lie in (0, 1]"),
        ("delta", cfg.delta >= 1, "must be >= 1"),
        ("n_steps", cfg.n_steps >= 1, "must be >= 1"),
        ("learning_rate", cfg.learning_rate >= 0, "must be >= 0"),
        ("entropy_coeff", cfg.entropy_coeff >= 0, "must be >= 0"),
        ("B_candidate", cfg.B_candidate * cfg.alpha / 2 >= 1 - 1e-9,
         "too small for alpha (need B * alpha / 2 >= 1)"),
        ("B_safety", cfg.B_safety * cfg.alpha / 2 >= 1 - 1e-9,
         "too small for alpha (need B * alpha / 2 >= 1)"),
        ("fourier_order", cfg.fourier_order >= 0, "must be >= 0"),
        ("train_fraction", 0 < cfg.train_fraction < 1, "must lie in (0, 1)"),
        ("train_fraction", cfg.delta * min(cfg.train_fraction, 1 - cfg.train_fraction) >= 1 - 1e-9,
         "leaves an empty side when splitting delta episodes"),
        ("episode_budget", cfg.episode_budget >= 0, "must be >= 0"),
        ("seed", cfg.seed >= 0, "must be >= 0"),
        ("n_items", cfg.n_items >= 2, "must be >= 2"),
        ("season_length", cfg.season_length >= 0, "must be >= 0"),
        ("time_scale", cfg.time_scale >= 0, "must be >= 0"),
        ("reward_scale", cfg.reward_scale > 0, "must be > 0"),
    ]
    for key, ok, message in checks:
        if not ok:
            raise ConfigError(key, message)


# --------------------------------------------------------------------------- #
# Loading
# --------------------------------------------------------------------------- #

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, raw: str, kind):
    text = str(raw).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            number = float(text)
            if number != int(number):
                raise ValueError(text)
            return int(number)
        if kind is float:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {kind.__name__}") from None


_FIELD_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type]
                for f in fields(ExperimentConfig)}


def parse_config_text(text: str) -> Dict[str, str]:
    """Flat ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def load_config(path: Union[str, Path, None] = None, overrides: Optional[Mapping] = None,
                environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Resolve defaults < file < SPIN_* environment < overrides, then validate."""
    raw: Dict[str, object] = {}
    if path is not None:
        raw.update(parse_config_text(Path(path).read_text()))
    env = os.environ if environ is None else environ
    for name in _FIELD_TYPES:
        key = ENV_PREFIX + name.upper()
        if key in env:
            raw[name] = env[key]
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_mapping(raw)


def config_from_mapping(raw: Mapping) -> ExperimentConfig:
    values = {}
    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(key, "unknown config key")
        kind = _FIELD_TYPES[key]
        if isinstance(value, str) or kind is bool and not isinstance(value, bool):
            value = _parse_value(key, str(value), kind)
        values[key] = value
    return ExperimentConfig(**values)


# --------------------------------------------------------------------------- #
# Domains
# --------------------------------------------------------------------------- #

def build_domain(cfg: ExperimentConfig):
    """(environment, safe policy parameters) for a config."""
    if cfg.domain == "recosys":
        noise = None if cfg.noise_scale < 0 else cfg.noise_scale
        env = make_recosys(cfg.speed, cfg.n_items, cfg.resolved_season_length,
                           cfg.reward_scale, noise)
        # safe policy: item probabilities proportional to the first episode's rewards
        safe = SoftmaxPolicy.from_probs(env.item_rewards(1)[None, :])
        return env, safe.theta
    if cfg.domain == "tabular":
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
        env = random_tabular_nsmdp(rng, speed=cfg.speed,
                                   season_length=cfg.resolved_season_length)
        return env, SoftmaxPolicy.uniform(env.n_states, env.n_actions).theta
    env = appendix_b_env()
    return env, SoftmaxPolicy.uniform(env.n_states, env.n_actions).theta


# --------------------------------------------------------------------------- #
# Metrics
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class MetricsRow:
    algorithm: str
    speed: int
    seed: int
    violation_rate: float
    mean_normalized_improvement: float
    deploy_rate: float

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)


def _policies(log: DeploymentLog) -> Dict[int, SoftmaxPolicy]:
    return {pid: SoftmaxPolicy(theta) for pid, theta in log.policies.items()}


def evaluate_safety(log: DeploymentLog, env) -> float:
    """Fraction of decisions that deployed a candidate worse than the safe policy.

    A candidate counts as unsafe when its true performance, averaged over
    the episodes it was deployed for, is below the safe policy's over the
    same episodes. Decisions that keep the safe policy are never unsafe, so
    the result equals (unsafe fraction among deployments) * (deploy rate).
    """
    if not isinstance(env, (SeasonalRecoSys, TabularNSMDP)):
        raise UnsupportedOracleError(f"no performance oracle for {type(env).__name__}")
    if not log.decisions:
        return 0.0
    policies = _policies(log)
    safe = policies[SAFE_POLICY_ID]
    unsafe = 0
    for decision in log.decisions:
        if not decision.passed:
            continue
        episodes = [e.episode for e in log.deployed_episodes(decision)] or [decision.k + 1]
        cand = policies[decision.deployed_policy_id]
        rho_c = np.mean([true_performance(env, cand, k) for k in episodes])
        rho_s = np.mean([true_performance(env, safe, k) for k in episodes])
        unsafe += bool(rho_c < rho_s)
    return unsafe / len(log.decisions)


def normalized_improvement(log: DeploymentLog, env) -> float:
    """Mean over episodes of the deployed policy's share of the attainable gain.

    Episodes where the safe policy is already optimal contribute 0.
    """
    if not log.episodes:
        return 0.0
    policies = _policies(log)
    safe = policies[SAFE_POLICY_ID]
    total = 0.0
    for e in log.episodes:
        if e.policy_id == SAFE_POLICY_ID:
            continue
        rho_s = true_performance(env, safe, e.episode)
        gap = optimal_performance(env, e.episode) - rho_s
        if gap > 1e-12:
            total += (true_performance(env, policies[e.policy_id], e.episode) - rho_s) / gap
    return total / len(log.episodes)


def compute_metrics(log: DeploymentLog, env, cfg: ExperimentConfig) -> MetricsRow:
    n = len(log.decisions)
    deploy = sum(d.passed for d in log.decisions) / n if n else 0.0
    return MetricsRow(cfg.algorithm, cfg.speed, cfg.seed, evaluate_safety(log, env),
                      normalized_improvement(log, env), deploy)


# --------------------------------------------------------------------------- #
# Single runs
# --------------------------------------------------------------------------- #

def execute(cfg: ExperimentConfig) -> Tuple[DeploymentLog, object]:
    env, safe_theta = build_domain(cfg)
    algorithm = spin_run if cfg.algorithm == "spin" else baseline_run
    return algorithm(env, safe_theta, cfg.run_config(), cfg.seed), env


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, header: str, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(x) for x in row])
    path.write_text(buf.getvalue())


def _read_csv(path: Path) -> List[Dict[str, str]]:
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def write_run(out: Union[str, Path], cfg: ExperimentConfig, log: DeploymentLog, env) -> MetricsRow:
    out = Path(out)
    (out / "policies").mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    policies = _policies(log)
    safe = policies[SAFE_POLICY_ID]
    rows = []
    for e in log.episodes:
        rows.append((e.episode, e.policy_id, e.ret,
                     true_performance(env, policies[e.policy_id], e.episode),
                     true_performance(env, safe, e.episode)))
    _write_csv(out / "episodes.csv", f"spin episodes v{SCHEMA_VERSION}", EPISODE_COLUMNS, rows)
    _write_csv(out / "decisions.csv", f"spin decisions v{SCHEMA_VERSION}", DECISION_COLUMNS,
               [(d.k, d.passed, d.lb_candidate, d.ub_safe, d.deployed_policy_id)
                for d in log.decisions])
    for pid, policy in sorted(policies.items()):
        policy.to_csv(out / "policies" / f"policy_{pid}.csv")
    metrics = compute_metrics(log, env, cfg)
    _write_csv(out / "metrics.csv", f"spin metrics v{SCHEMA_VERSION}; {IMPROVEMENT_NOTE}",
               METRIC_COLUMNS, [metrics.as_tuple()])
    if log.error:
        (out / "error.txt").write_text(log.error + "\n")
    return metrics


def run_experiment(cfg: ExperimentConfig, out: Union[str, Path, None] = None):
    """Run one configuration; write its CSVs to ``out`` if given.

    Returns (log, metrics).
    """
    log, env = execute(cfg)
    if out is not None:
        metrics = write_run(out, cfg, log, env)
    else:
        metrics = compute_metrics(log, env, cfg)
    return log, metrics


def read_run(run_dir: Union[str, Path]) -> Tuple[ExperimentConfig, DeploymentLog]:
    """Rebuild the config and deployment log from a run directory."""
    run_dir = Path(run_dir)
    cfg = config_from_mapping(parse_config_text((run_dir / "config.txt").read_text()))
    log = DeploymentLog()
    for row in _read_csv(run_dir / "episodes.csv"):
        log.episodes.append(EpisodeRecord(int(row["episode"]), int(row["policy_id"]),
                                          float(row["return"])))
    for row in _read_csv(run_dir / "decisions.csv"):
        log.decisions.append(DecisionRecord(int(row["k"]), row["passed"] == "1",
                                            float(row["lb_candidate"]), float(row["ub_safe"]),
                                            int(row["deployed_policy_id"])))
    for path in sorted((run_dir / "policies").glob("policy_*.csv")):
        pid = int(path.stem.split("_")[1])
        log.policies[pid] = SoftmaxPolicy.from_csv(path).theta
    return cfg, log


def evaluate_run(run_dir: Union[str, Path]) -> MetricsRow:
    cfg, log = read_run(run_dir)
    env, _ = build_domain(cfg)
    return compute_metrics(log, env, cfg)


# --------------------------------------------------------------------------- #
# Sweeps
# --------------------------------------------------------------------------- #

def cell_seed(master_seed: int, cell_index: int) -> int:
    """Run seed for one sweep cell, a pure function of (master seed, cell index)."""
    state = np.random.SeedSequence(master_seed, spawn_key=(cell_index,)).generate_state(2)
    return int(state[0]) << 32 | int(state[1])


def _run_cell(cfg: ExperimentConfig):
    try:
        _, metrics = run_experiment(cfg)
        return metrics, None
    except Exception as exc:  # one failed cell must not stop the sweep
        return None, f"{type(exc).__name__}: {exc}"


def sweep(grid: Sequence[ExperimentConfig], n_seeds: int, master_seed: int = 0,
          workers: int = 1, out: Union[str, Path, None] = None):
    """Run every (config, seed) cell and aggregate per (algorithm, speed).

    Cell i gets seed ``cell_seed(master_seed, i)`` no matter which worker
    runs it, and results are collected in cell order, so the output does
    not depend on ``workers``. Returns (cells, aggregate) as lists of rows.
    """
    if not grid:
        raise ValueError("sweep needs a non-empty grid")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    cells = []
    for cfg in grid:
        for _ in range(n_seeds):
            cells.append(replace(cfg, seed=cell_seed(master_seed, len(cells))))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(cfg) for cfg in cells]

    cell_rows = []
    groups: Dict[Tuple[str, int], List[MetricsRow]] = {}
    for i, (cfg, (metrics, error)) in enumerate(zip(cells, results)):
        if metrics is None:
            logger.warning("cell %d failed: %s", i, error)
            cell_rows.append((i, cfg.algorithm, cfg.speed, cfg.seed, "nan", "nan", "nan", error))
            continue
        groups.setdefault((cfg.algorithm, cfg.speed), []).append(metrics)
        cell_rows.append((i,) + metrics.as_tuple() + ("",))

    agg_rows = []
    for (algorithm, speed), rows in sorted(groups.items()):
        row = [algorithm, speed, len(rows)]
        for col in METRIC_COLUMNS[3:]:
            vals = np.array([getattr(r, col) for r in rows], dtype=float)
            se = vals.std(ddof=1) / math.sqrt(vals.size) if vals.size > 1 else math.nan
            row += [float(vals.mean()), float(se)]
        agg_rows.append(tuple(row))

    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "cells.csv", f"spin sweep cells v{SCHEMA_VERSION}; master_seed={master_seed}",
                   ("cell",) + METRIC_COLUMNS + ("error",), cell_rows)
        _write_csv(out / "aggregate.csv",
                   f"spin sweep aggregate v{SCHEMA_VERSION}; {IMPROVEMENT_NOTE}",
                   AGGREGATE_COLUMNS, agg_rows)
    return cell_rows, agg_rows


AGGREGATE_COLUMNS = ("algorithm", "speed", "n",
                     "violation_rate", "violation_rate_se",
                     "mean_normalized_improvement", "mean_normalized_improvement_se",
                     "deploy_rate", "deploy_rate_se")
