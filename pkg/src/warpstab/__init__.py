"""Pixel-level online video stabilization.

Modules: ``core`` (transforms, warp fields, sampling), ``motion`` (features,
RANSAC affine), ``losses``, ``network`` (forward-only generator and
discriminator), ``stabilizer`` (sliding window, predictors, crop),
``metrics`` (C/D/S), ``synth`` (procedural scenes and shake) and ``cli``.
"""

from .core import (
    AffineTransform,
    affine_to_homography,
    affine_to_warp_field,
    apply_warp,
    compose_affine,
    invert_homography,
)
from .exceptions import (
    DegenerateGeometryError,
    FrameIOError,
    InsufficientPointsError,
    InvalidInputError,
    NoModelError,
    NoValidRegionError,
    ShapeMismatchError,
    SingularMatrixError,
    WarpstabError,
    WeightFormatError,
)
from .metrics import MetricsReport, StabilityConfig, evaluate
from .motion import RansacAffineEstimator, RansacConfig, ransac_affine
from .stabilizer import (
    ClassicalPredictor,
    CropRegion,
    IdentityPredictor,
    SlidingWindowConfig,
    VideoStabilizer,
    compute_crop_region,
    stabilize_sequence,
)

__version__ = "0.1.0"

__all__ = [
    "AffineTransform",
    "ClassicalPredictor",
    "CropRegion",
    "DegenerateGeometryError",
    "FrameIOError",
    "IdentityPredictor",
    "InsufficientPointsError",
    "InvalidInputError",
    "MetricsReport",
    "NoModelError",
    "NoValidRegionError",
    "RansacAffineEstimator",
    "RansacConfig",
    "ShapeMismatchError",
    "SingularMatrixError",
    "SlidingWindowConfig",
    "StabilityConfig",
    "VideoStabilizer",
    "WarpstabError",
    "WeightFormatError",
    "affine_to_homography",
    "affine_to_warp_field",
    "apply_warp",
    "compose_affine",
    "compute_crop_region",
    "evaluate",
    "invert_homography",
    "ransac_affine",
    "stabilize_sequence",
]
