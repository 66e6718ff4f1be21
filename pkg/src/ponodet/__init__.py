"""Dense anchor-based detector training at desk scale.

Per-class anchor clustering, normalized-overlap anchor assignment with
ambiguity-managed labels, an IoU localization loss, automatically learned
class/size balance weights, and a minimal reverse-mode autodiff engine to
train toy predictors on synthetic scenes.
"""

from .geometry import Box, Detection, Offsets, decode, encode, iou, nms
from .anchors import AnchorGrid, AnchorSet, build_grid, kmeans_anchors
from .assignment import (GroundTruth, LabelMap, PonoMap, PredIoUMap,
                         ams_labels, assign_ao, compute_pono, pono_labels,
                         pred_iou_map)
from .loss import BalanceWeights, LossReport, balanced_totals, weight_gradients
from .data import GenSpec, Scene, generate, hflip, load_dataset, save_dataset
from .model import PredictorOutput, TabularPredictor, ToyNet, ToyNetConfig
from .train import RunState, TrainConfig, lr_at, run_training, sgd_step, train_iteration
from .evaluation import average_precision, extract_detections, map_eval

__version__ = "0.1.0"

__all__ = [
    "Box", "Detection", "Offsets", "decode", "encode", "iou", "nms",
    "AnchorGrid", "AnchorSet", "build_grid", "kmeans_anchors",
    "GroundTruth", "LabelMap", "PonoMap", "PredIoUMap",
    "ams_labels", "assign_ao", "compute_pono", "pono_labels", "pred_iou_map",
    "BalanceWeights", "LossReport", "balanced_totals", "weight_gradients",
    "GenSpec", "Scene", "generate", "hflip", "load_dataset", "save_dataset",
    "PredictorOutput", "TabularPredictor", "ToyNet", "ToyNetConfig",
    "RunState", "TrainConfig", "lr_at", "run_training", "sgd_step",
    "train_iteration",
    "average_precision", "extract_detections", "map_eval",
]
