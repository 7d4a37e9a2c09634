"""Few-shot detection with black-box multimodal models: per-class prompt optimization and evaluation."""

from .dataset import ClassSpec, DatasetSplit, GroundTruthBox, ImageRecord, load_coco, subsample_k_shot
from .evaluation import Detection, EvalResult, coco_map, confusion_matrix, greedy_match, tide_decompose
from .geometry import BoundingBox, CoordinateSpace, convert, iou
from .optimizer import OptimizerConfig, PromptCandidate, optimize_dataset

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "ClassSpec",
    "CoordinateSpace",
    "DatasetSplit",
    "Detection",
    "EvalResult",
    "GroundTruthBox",
    "ImageRecord",
    "OptimizerConfig",
    "PromptCandidate",
    "coco_map",
    "confusion_matrix",
    "convert",
    "greedy_match",
    "iou",
    "load_coco",
    "optimize_dataset",
    "subsample_k_shot",
    "tide_decompose",
]
