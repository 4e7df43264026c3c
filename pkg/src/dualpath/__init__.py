"""Two-path parameter-efficient image-to-video adaptation toolkit.

Built on a from-scratch reverse-mode tensor engine (:mod:`dualpath.tensor`,
:mod:`dualpath.ops`), with a frozen ViT backbone (:mod:`dualpath.vit`),
baseline adaptation methods (:mod:`dualpath.adapters`), the two-path model
(:mod:`dualpath.dual_path`), synthetic video tasks (:mod:`dualpath.datagen`),
and analytic cost accounting (:mod:`dualpath.costing`).
"""

from . import ops
from .adapters import (
    AdaptationSpec,
    Adapter,
    TemporalClassifier,
    bottleneck_adapter,
    build_adapted_model,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .costing import (
    CostReport,
    ViewSchedule,
    compare_methods,
    count_trainable,
    estimate_flops,
)
from .datagen import SyntheticTaskSpec, VideoClip, generate_clip, make_splits
from .dual_path import (
    DualPathModel,
    SamplingPlan,
    build_dualpath_model,
    fixed_3d_positions,
    make_grid_frameset,
    sample_frames,
)
from .tensor import ConfigError, GraphError, ShapeError, Tensor
from .vit import VIT_B_16, Backbone, BackboneSpec

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ShapeError", "ConfigError", "GraphError", "ops",
    "BackboneSpec", "Backbone", "VIT_B_16",
    "AdaptationSpec", "Adapter", "bottleneck_adapter", "TemporalClassifier",
    "build_adapted_model",
    "DualPathModel", "build_dualpath_model", "SamplingPlan", "sample_frames",
    "make_grid_frameset", "fixed_3d_positions",
    "SyntheticTaskSpec", "VideoClip", "generate_clip", "make_splits",
    "ViewSchedule", "CostReport", "count_trainable", "estimate_flops",
    "compare_methods",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
    "__version__",
]
