"""Anchor-based 3D lesion detection toolkit.

Box geometry and anchors, anchor labelling, the detector losses with their
analytic gradients, tiled inference, evaluation metrics, a synthetic data
generator with a linear stand-in detector, and the ``anchor3d`` CLI.
"""

from .assignment import AssignmentConfig, Category, GroundTruth, assign_anchors
from .geometry import AnchorSpec, Box3, BoxDelta, ConfigError, decode, encode, generate_anchors, iou3d
from .inference import Detection, PipelineConfig, nms, run_inference, tile_volume
from .losses import DegenerateBatchError, DomainError, LossParams, rpn_loss
from .metrics import VolumeResult, aggregate, froc, roc_auc

__all__ = [
    "AnchorSpec", "AssignmentConfig", "Box3", "BoxDelta", "Category", "ConfigError",
    "DegenerateBatchError", "Detection", "DomainError", "GroundTruth", "LossParams",
    "PipelineConfig", "VolumeResult", "aggregate", "assign_anchors", "decode", "encode",
    "froc", "generate_anchors", "iou3d", "nms", "roc_auc", "rpn_loss", "run_inference",
    "tile_volume",
]
