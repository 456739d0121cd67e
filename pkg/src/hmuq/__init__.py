"""Landmark localization by heatmap regression with anisotropic Gaussian
targets whose covariances are learned from the data, Gaussian fitting of
predicted heatmaps as per-image uncertainty, Monte-Carlo-dropout baselines,
and propagation of landmark uncertainty into downstream measurements."""

from .clinical import (
    ClassificationResult,
    ClassThresholds,
    DegenerateGeometryError,
    ExpressionError,
    MeasurementDef,
    accuracy_uncertainty_curve,
    classify,
    entropy_nats,
    evaluate_measurement,
    load_measurements,
    mc_classify,
)
from .dataio import (
    AnnotationRow,
    DataFormatError,
    Dataset,
    load_dataset,
    read_annotations,
    read_pgm,
    write_annotations,
    write_dataset,
    write_pgm,
)
from .fitting import FitConfig, FitDegenerateError, FitResult, argmax_coord, fit_gaussian
from .gauss import (
    AnisotropicGaussian,
    CovarianceDecomposition,
    HeatmapGrid,
    InvalidParameterError,
    axis_angle_difference_deg,
    compose_covariance,
    decompose_covariance,
    render_anisotropic,
    render_isotropic,
    sample_gaussian,
    wrap_axis_angle,
)
from .metrics import (
    AggregateStats,
    aggregate_stats,
    circular_axis_mean_deg,
    error_offsets,
    fit_annotation_distribution,
    interobserver_decomps,
    point_error,
    report_row,
    sdr,
    write_report_csv,
)
from .nets import ReferencePredictor
from .svgplot import (
    PLOT_KINDS,
    PlotSpec,
    render_accuracy_curve,
    render_ellipse_overlay,
    render_offset_scatter,
    render_sigma_vs_error,
)
from .synthdata import LandmarkSpec, SynthConfig, SynthDataset, generate, write_synth_dataset
from .trainer import (
    AugmentConfig,
    TrainConfig,
    TrainDivergedError,
    TrainedModel,
    augment,
    loss_fixed,
    loss_learned_aniso,
    loss_learned_iso,
    predict,
    read_checkpoint,
    train,
    write_checkpoint,
)
from .uncertainty import (
    LandmarkPrediction,
    McdConfig,
    dataset_uncertainty,
    mcd_heatmap_fit,
    mcd_max,
    mcd_predict,
    sample_uncertainty,
)

__version__ = "0.1.0"
