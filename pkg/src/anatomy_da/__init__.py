"""Anatomy-guided domain adaptation for point-cloud human pose estimation."""

__version__ = "0.1.0"

from .anatomy import anat_loss, angle_loss, filter_pseudo_label, filter_variant, length_loss, sym_loss
from .estimator import AnatomyPoseEstimator
from .skeleton import AnatomicalBounds, SkeletonSpec, default_skeleton, derive_bounds
from .trainer import TrainConfig, adapt_sfda, adapt_uda, train_source

__all__ = [
    "__version__",
    "AnatomicalBounds",
    "AnatomyPoseEstimator",
    "SkeletonSpec",
    "TrainConfig",
    "adapt_sfda",
    "adapt_uda",
    "anat_loss",
    "angle_loss",
    "default_skeleton",
    "derive_bounds",
    "filter_pseudo_label",
    "filter_variant",
    "length_loss",
    "sym_loss",
    "train_source",
]
