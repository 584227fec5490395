"""Multi point-voxel convolution in numpy.

Point features are processed by two cooperating branches: a shared MLP on
the points themselves and small 3D convolutions on an averaged voxel grid,
interpolated back to the points. ``MPVConvLayer`` stacks two such stages,
and ``MPVCNN`` wraps the layers into a PointNet-style part segmentation
network with a hand-written backward pass.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, SyntheticSpec, generate_synthetic, load_cloud, load_dataset, save_cloud
from .gradcheck import GradCheckReport, finite_diff_check
from .layer import COMBINATIONS, MPVConvConfig, MPVConvLayer, combine_features
from .metrics import dataset_miou, mean_accuracy, shape_iou
from .model import MPVCNN, LayerSpec, MPVCNNConfig, build_mpvcnn, forward, predict
from .train import Adam, TrainConfig, evaluate, train
from .transform import NormalizedCloud, RawCloud, normalize_coords

__all__ = [
    "COMBINATIONS",
    "Adam",
    "Checkpoint",
    "Dataset",
    "GradCheckReport",
    "LayerSpec",
    "MPVCNN",
    "MPVCNNConfig",
    "MPVConvConfig",
    "MPVConvLayer",
    "NormalizedCloud",
    "RawCloud",
    "SyntheticSpec",
    "TrainConfig",
    "build_mpvcnn",
    "combine_features",
    "dataset_miou",
    "evaluate",
    "finite_diff_check",
    "forward",
    "generate_synthetic",
    "load_checkpoint",
    "load_cloud",
    "load_dataset",
    "mean_accuracy",
    "normalize_coords",
    "predict",
    "save_checkpoint",
    "save_cloud",
    "shape_iou",
    "train",
]
