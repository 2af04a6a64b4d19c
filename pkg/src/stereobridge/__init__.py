"""Iterative stereo matching with a bridge-style refinement process.

Correlation cost volumes provide an initial disparity field; a
time-conditioned multi-scale recurrent operator then transports that
field toward the ground truth, one velocity step at a time.
"""

from .bridge import (
    SCHEDULE_PRESETS,
    BridgeState,
    ScheduleParams,
    beta,
    cumulative_update,
    euler_step,
    forward_interpolate,
    sample_reverse,
    velocity_target,
)
from .config import ConfigError, RunConfig, config_hash, load_config
from .harness import NumericalError, ablate, evaluate, infer, train
from .model import MatchState, ModelConfig, StereoMatcher
from .objectives import MetricReport, compute_metrics, infill_nearest
from .volume import CostVolume, all_pairs_correlation, group_correlation

__version__ = "0.1.0"

__all__ = [
    "SCHEDULE_PRESETS",
    "BridgeState",
    "ScheduleParams",
    "beta",
    "cumulative_update",
    "euler_step",
    "forward_interpolate",
    "sample_reverse",
    "velocity_target",
    "ConfigError",
    "RunConfig",
    "config_hash",
    "load_config",
    "NumericalError",
    "ablate",
    "evaluate",
    "infer",
    "train",
    "MatchState",
    "ModelConfig",
    "StereoMatcher",
    "MetricReport",
    "compute_metrics",
    "infill_nearest",
    "CostVolume",
    "all_pairs_correlation",
    "group_correlation",
    "__version__",
]
