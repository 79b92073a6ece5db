"""Functional image correspondence at desk scale.

Query a point in one image, get its partner in the other: a small
transformer conditioned on both images answers arbitrary query points,
trained end to end on procedurally generated warps, refined at inference
time by recursive zoom-ins, filtered by cycle consistency, and densified by
barycentric interpolation when a full flow field is wanted.
"""

from .model import ModelConfig, QueryPoint, forward_correspondence, make_matcher
from .inference import (
    CropWindow,
    InferenceConfig,
    MatchEstimate,
    ZoomSchedule,
    densify_delaunay,
    match_sparse,
    refine_recursive,
)
from .flowio import FlowField, read_flo, write_flo
from .metrics import aepe, fl_ratio, pck
from .training import TrainingPlan, load_checkpoint, run_staged_training, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "QueryPoint",
    "forward_correspondence",
    "make_matcher",
    "CropWindow",
    "InferenceConfig",
    "MatchEstimate",
    "ZoomSchedule",
    "densify_delaunay",
    "match_sparse",
    "refine_recursive",
    "FlowField",
    "read_flo",
    "write_flo",
    "aepe",
    "fl_ratio",
    "pck",
    "TrainingPlan",
    "load_checkpoint",
    "run_staged_training",
    "save_checkpoint",
    "__version__",
]
