"""Serial-section affine registration: keypoint + intensity stages, propagation to the middle section."""

from .geometry import (
    Affine2D,
    ImageGrid,
    apply_point,
    apply_points,
    compose,
    corner_error,
    fit_affine_least_squares,
    invert,
    warp_image,
)
from .features import FeatureConfig, detect_keypoints, estimate_affine_ransac, match_keypoints, register_pair_features
from .intensity import RefineConfig, SimilarityMetric, build_pyramid, cross_correlation, mutual_information, refine_affine
from .propagation import PairConfig, SeriesRegistration, assemble_series, propagate, register_pair, select_middle
from .metrics import (
    BoundingBox,
    BoundingCircle,
    GlomerulusTrack,
    box_iou,
    center_distance,
    circle_iou,
    evaluate_series,
    inscribed_circle,
    transform_box,
)
from .pipeline import PipelineConfig, load_manifest, preprocess, render_overlay, run_pipeline
from .synthetic import Artifacts, PhantomSpec, generate_phantom, make_series, random_affine, write_case

__version__ = "0.1.0"
