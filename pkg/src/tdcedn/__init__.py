"""Top-down fully convolutional encoder-decoder contour detection in numpy."""
from .estimator import ContourDetector, EdgeThinner, FusedContourDetector
from .evaluation import MatchConfig, nms_thin, ods_ois_ap, pr_sweep
from .inference import FusionConfig, fuse, predict
from .losses import LossConfig, balanced_bce, compute_beta, total_loss
from .network import TDCEDN, build_tdcedn, load_checkpoint, save_checkpoint
from .tensor import Precision, Tensor
from .trainer import TrainConfig, poly_lr, train

__all__ = [
    "ContourDetector",
    "EdgeThinner",
    "FusedContourDetector",
    "FusionConfig",
    "LossConfig",
    "MatchConfig",
    "Precision",
    "TDCEDN",
    "Tensor",
    "TrainConfig",
    "balanced_bce",
    "build_tdcedn",
    "compute_beta",
    "fuse",
    "load_checkpoint",
    "nms_thin",
    "ods_ois_ap",
    "poly_lr",
    "pr_sweep",
    "predict",
    "save_checkpoint",
    "total_loss",
    "train",
]
