"""Decompose-and-integrate learning for multi-class segmentation."""
from .decomposition import (
    DecompositionResult,
    ObjectComponent,
    connected_components,
    convexity_ratio,
    decompose,
    decompose_by_class,
    decompose_by_image_level,
    decompose_by_shape,
    decompose_identity,
    verify_partition,
)
from .estimator import AnnotationDecomposer, KTo1Segmenter
from .metrics import adb, dice, evaluate, hausdorff, iou, object_dice, object_hausdorff, object_match
from .network import KTo1Spec, SegModuleSpec, build, composite_loss, forward_all, make_spec
from .training import TrainConfig, fit, load_checkpoint, predict, save_checkpoint, train_step

__version__ = "0.1.0"

__all__ = [
    "AnnotationDecomposer",
    "DecompositionResult",
    "KTo1Segmenter",
    "KTo1Spec",
    "ObjectComponent",
    "SegModuleSpec",
    "TrainConfig",
    "adb",
    "build",
    "composite_loss",
    "connected_components",
    "convexity_ratio",
    "decompose",
    "decompose_by_class",
    "decompose_by_image_level",
    "decompose_by_shape",
    "decompose_identity",
    "dice",
    "evaluate",
    "fit",
    "forward_all",
    "hausdorff",
    "iou",
    "load_checkpoint",
    "make_spec",
    "object_dice",
    "object_hausdorff",
    "object_match",
    "predict",
    "save_checkpoint",
    "train_step",
    "verify_partition",
]
