"""Safe policy improvement when the environment drifts over time.

The package fits a Fourier trend to off-policy performance estimates,
bounds future performance with a wild bootstrap, and only deploys a new
policy when its lower bound beats the safe policy's upper bound.
"""
from .candidate import SearchConfig, candidate_search, objective_with_grad
from .envsim import (SeasonalRecoSys, TabularNSMDP, Trajectory, appendix_b_env, lipschitz_bound,
                     make_recosys, optimal_performance, rollout, true_performance)
from .errors import (ConfigError, FullSupportError, SingularDesignError, SpinError,
                     UnsupportedOracleError)
from .forecast import FourierBasis, fit, forecast
from .ope import PerformanceSeries, TrajectoryBatch, pdis, pdis_with_grad
from .policy import SoftmaxPolicy
from .spinloop import DeploymentLog, RunConfig, baseline_run, safety_test, spin_run, split_batch
from .wildboot import PredictionInterval, prediction_interval_percentile, prediction_interval_t

__version__ = "0.1.0"
