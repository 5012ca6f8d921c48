"""Volumetric blob detection with a learned convolutional surrogate.

The package covers the full desk-scale pipeline: synthetic phantoms,
scale-normalized LoG candidate detection with grid-searched parameters,
a small conv net trained to reproduce the LoG candidate map in a single
fused pass, a crop classifier that scores candidates, FROC evaluation,
and wall-clock benchmarks of the two candidate stages.
"""

from .bench import (
    StageTiming,
    TimingReport,
    compare_pipelines,
    load_timing_report,
    save_timing_report,
    time_stage,
)
from .cropcls import (
    CropAugmentation,
    CropSpec,
    augment_crop,
    build_classifier_net,
    classify_candidates,
    eligible_negatives,
    extract_crop,
    sample_paired_batch,
    train_classifier,
)
from .errors import (
    BlobSurrogateError,
    CapacityError,
    ConfigError,
    FormatError,
    GeometryError,
    KernelTooLargeError,
    NumericsError,
    SamplingError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from .estimators import (
    CropProbabilityClassifier,
    LogCandidateDetector,
    SurrogateCandidateDetector,
)
from .evaluation import (
    Detections,
    ExperimentConfig,
    FrocCurve,
    FrocPoint,
    MatchResult,
    dice_coefficient,
    froc,
    load_detections,
    match_detections,
    operating_point,
    report_to_json,
    run_experiment,
    save_detections,
    strip_timing,
    sweep_candidate_values,
)
from .logs import save_training_log, training_log_from_csv, training_log_to_csv
from .phantom import (
    DIAMETER_LOG_MU,
    DIAMETER_LOG_SIGMA,
    FWHM_FACTOR,
    PhantomConfig,
    generate_phantom,
    generate_split,
    load_phantom_config,
    sample_diameter,
    save_phantom_config,
)
from .plotting import render_bar_plot, render_line_plot
from .scalespace import (
    DEFAULT_HIT_RADIUS_MM,
    CandidateSet,
    LoGParams,
    OptimizeGrid,
    OptimizeLogResult,
    detect_candidates,
    gaussian_filter_3d,
    gaussian_kernel_1d,
    load_candidates,
    load_log_params,
    log_response,
    optimize_log_params,
    radius_for_sigma,
    save_candidates,
    save_log_params,
    sensitivity,
    smooth_array,
)
from .surrogate import (
    SurrogateModel,
    SurrogateSpec,
    ThresholdSelection,
    build_surrogate_net,
    build_target,
    build_training_targets,
    conv_receptive_field,
    depth_for_receptive_field,
    extract_candidates_from_response,
    load_surrogate,
    predict_response,
    receptive_field_for_log,
    save_surrogate,
    select_threshold,
    smooth_target,
    train_surrogate,
)
from .volume import (
    GroundTruth,
    Lesion,
    Point3,
    Volume3D,
    load_ground_truth,
    load_volume,
    resample_isotropic,
    sample_trilinear,
    save_ground_truth,
    save_volume,
)

__version__ = "0.1.0"

__all__ = [
    "BlobSurrogateError",
    "CandidateSet",
    "CapacityError",
    "ConfigError",
    "CropAugmentation",
    "CropProbabilityClassifier",
    "CropSpec",
    "DEFAULT_HIT_RADIUS_MM",
    "DIAMETER_LOG_MU",
    "DIAMETER_LOG_SIGMA",
    "Detections",
    "ExperimentConfig",
    "FWHM_FACTOR",
    "FormatError",
    "FrocCurve",
    "FrocPoint",
    "GeometryError",
    "GroundTruth",
    "KernelTooLargeError",
    "Lesion",
    "LoGParams",
    "LogCandidateDetector",
    "MatchResult",
    "NumericsError",
    "OptimizeGrid",
    "OptimizeLogResult",
    "PhantomConfig",
    "Point3",
    "SamplingError",
    "StageTiming",
    "SurrogateCandidateDetector",
    "SurrogateModel",
    "SurrogateSpec",
    "ThresholdSelection",
    "TimingReport",
    "TrainingDivergedError",
    "UndefinedMetricError",
    "Volume3D",
    "augment_crop",
    "build_classifier_net",
    "build_surrogate_net",
    "build_target",
    "build_training_targets",
    "classify_candidates",
    "compare_pipelines",
    "conv_receptive_field",
    "depth_for_receptive_field",
    "detect_candidates",
    "dice_coefficient",
    "eligible_negatives",
    "extract_candidates_from_response",
    "extract_crop",
    "froc",
    "gaussian_filter_3d",
    "gaussian_kernel_1d",
    "generate_phantom",
    "generate_split",
    "load_candidates",
    "load_detections",
    "load_ground_truth",
    "load_log_params",
    "load_phantom_config",
    "load_surrogate",
    "load_timing_report",
    "load_volume",
    "log_response",
    "match_detections",
    "operating_point",
    "optimize_log_params",
    "predict_response",
    "radius_for_sigma",
    "receptive_field_for_log",
    "render_bar_plot",
    "render_line_plot",
    "report_to_json",
    "resample_isotropic",
    "run_experiment",
    "sample_diameter",
    "sample_paired_batch",
    "sample_trilinear",
    "save_candidates",
    "save_detections",
    "save_ground_truth",
    "save_log_params",
    "save_phantom_config",
    "save_surrogate",
    "save_timing_report",
    "save_training_log",
    "save_volume",
    "select_threshold",
    "sensitivity",
    "smooth_array",
    "smooth_target",
    "strip_timing",
    "sweep_candidate_values",
    "time_stage",
    "train_classifier",
    "train_surrogate",
    "training_log_from_csv",
    "training_log_to_csv",
]
