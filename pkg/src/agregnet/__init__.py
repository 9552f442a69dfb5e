"""Point-annotation density regression toolkit: ground-truth generation,
segmentation-gated density network, training, localization, and metrics."""

__version__ = "0.1.0"

from .annotations import (
    AnnotatedImage,
    DatasetSplit,
    PointAnnotation,
    find_near_duplicates,
    load_annotations,
    save_annotations,
    split_dataset,
)
from .groundtruth import (
    DensityMap,
    SegmentationMap,
    SigmaPolicy,
    compute_adaptive_sigmas,
    make_density_map,
    make_ground_truth,
    make_segmentation_map,
)
from .localization import (
    LocalizeParams,
    MatchResult,
    count_from_density,
    detect_peaks,
    localize,
    match_peaks,
)
from .metrics import (
    MetricsReport,
    PerImageRecord,
    aggregate_report,
    ap_ar_sweep,
    count_errors,
    psnr,
    ssim,
    threshold_grid,
)
from .network import (
    AgRegNet,
    ModelOutput,
    NetworkConfig,
    build_model,
    load_checkpoint,
    load_encoder_weights,
    save_checkpoint,
    variant_name,
)
from .synthdata import SceneConfig, generate_dataset, generate_scene
from .training import (
    LossConfig,
    TrainConfig,
    TrainResult,
    dice_coefficient,
    mse_loss,
    total_loss,
    train,
)

__all__ = [
    "AgRegNet",
    "AnnotatedImage",
    "DatasetSplit",
    "DensityMap",
    "LocalizeParams",
    "LossConfig",
    "MatchResult",
    "MetricsReport",
    "ModelOutput",
    "NetworkConfig",
    "PerImageRecord",
    "PointAnnotation",
    "SceneConfig",
    "SegmentationMap",
    "SigmaPolicy",
    "TrainConfig",
    "TrainResult",
    "aggregate_report",
    "ap_ar_sweep",
    "build_model",
    "compute_adaptive_sigmas",
    "count_errors",
    "count_from_density",
    "detect_peaks",
    "dice_coefficient",
    "find_near_duplicates",
    "generate_dataset",
    "generate_scene",
    "load_annotations",
    "load_checkpoint",
    "load_encoder_weights",
    "localize",
    "make_density_map",
    "make_ground_truth",
    "make_segmentation_map",
    "match_peaks",
    "mse_loss",
    "psnr",
    "save_annotations",
    "save_checkpoint",
    "split_dataset",
    "ssim",
    "threshold_grid",
    "total_loss",
    "train",
    "variant_name",
]
