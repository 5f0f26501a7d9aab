"""Cooperative fleet sensor fusion with an edge-side noise-estimation service.

A deterministic, seedable simulation of connected vehicles that share
object-level detections, an edge server that estimates each vehicle's
measurement-noise covariance from the pooled uploads, and the pub/sub
protocol that feeds those estimates back into every vehicle's on-board
fusion.
"""

from .association import Assignment, associate, hungarian
from .errors import ConfigError, DecodeError
from .fusion import (
    FilterModel,
    MeasurementBundle,
    TrackEstimate,
    batch_reestimate,
    cv_model,
    predict,
    update_multi,
)
from .harness import (
    ImprovementSummary,
    MetricSeries,
    RunConfig,
    emit,
    improvement_rate,
    run_scenario,
    summarize,
    sweep,
)
from .noise_estimation import (
    EdgeNoiseEstimator,
    NoiseEstimate,
    WindowConfig,
    WindowState,
    adapt_residual_window,
    adapt_target_window,
    estimate_noise,
)
from .protocol import (
    BandwidthLedger,
    EdgeServer,
    MessageBus,
    NoisePublish,
    Register,
    RegisterAck,
    Schedule,
    Subscribe,
    Upload,
    VehicleAgent,
    decode,
    encode,
)
from .sensing import Detection, ObjectList, sample_gaussian, sense
from .tracking import MultiTargetFilter
from .world import TargetState, World, WorldConfig, generate_world, neighbors, step_world

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "BandwidthLedger",
    "ConfigError",
    "DecodeError",
    "Detection",
    "EdgeNoiseEstimator",
    "EdgeServer",
    "FilterModel",
    "ImprovementSummary",
    "MeasurementBundle",
    "MessageBus",
    "MetricSeries",
    "MultiTargetFilter",
    "NoiseEstimate",
    "NoisePublish",
    "ObjectList",
    "Register",
    "RegisterAck",
    "RunConfig",
    "Schedule",
    "Subscribe",
    "TargetState",
    "TrackEstimate",
    "Upload",
    "VehicleAgent",
    "WindowConfig",
    "WindowState",
    "World",
    "WorldConfig",
    "adapt_residual_window",
    "adapt_target_window",
    "associate",
    "batch_reestimate",
    "cv_model",
    "decode",
    "emit",
    "encode",
    "estimate_noise",
    "generate_world",
    "hungarian",
    "improvement_rate",
    "neighbors",
    "predict",
    "run_scenario",
    "sample_gaussian",
    "sense",
    "step_world",
    "summarize",
    "sweep",
    "update_multi",
]
