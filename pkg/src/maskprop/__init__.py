"""Video semantic segmentation by propagating key-frame masks with
segment-aware, query-based flow."""
from .datamodel import (
    FlowMapSet,
    KeyFrameSchedule,
    MaskPredictionSet,
    ModelConfig,
    SegmentQuerySet,
    SemanticMap,
    ValidationError,
    VideoClip,
)
from .kernels import BACKEND

__all__ = [
    "BACKEND",
    "FlowMapSet",
    "KeyFrameSchedule",
    "MaskPredictionSet",
    "ModelConfig",
    "SegmentQuerySet",
    "SemanticMap",
    "ValidationError",
    "VideoClip",
]
__version__ = "0.1.0"
