"""Multi-view cine survival pipeline on synthetic cardiac phantoms.

Stages: synthetic 4D data (synthcine), optical-flow ROI extraction (flowroi),
motion encoding (encoder), cross-view distillation (distill), dual codebook
quantization (codebook), Cox survival modeling (survival), evaluation metrics
(metrics), and orchestration (runner).
"""

from .codebook import (
    Codebook,
    ReconstructionDecoder,
    Stage2Config,
    Stage2Result,
    export_representation,
    fuse,
    quantize_st,
    stage2_loss,
    train_stage2,
    vec_quant,
)
from .distill import (
    Stage1Result,
    StageIConfig,
    ema_update,
    kl_distill_loss,
    motion_contrastive_loss,
    train_stage1,
    video_to_tensor,
)
from .encoder import EncoderConfig, MotionEncoder, MotionQueries
from .flowroi import FlowConfig, MotionField, ROIWindow, crop_roi, farneback_flow, locate_roi
from .metrics import (
    KMCurve,
    SurvivalOutcome,
    c_index,
    chi2_sf,
    km_curve,
    log_rank,
    regularized_gamma_q,
    stratify_median,
)
from .runner import (
    DataConfig,
    ExperimentConfig,
    RoiConfig,
    RunReport,
    SurvivalConfig,
    ablate,
    run,
)
from .survival import (
    AttributionReport,
    CoxModel,
    FusedSample,
    correlation_filter,
    cox_neg_log_likelihood,
    cumulative_hazard,
    fit_cox,
    linear_attribution,
    predict_risk,
    samples_from_arrays,
)
from .synthcine import (
    FormatError,
    PhantomParams,
    StudyRecord,
    VoxelVideo,
    generate_dataset,
    generate_study,
    load_manifest,
    load_study,
    read_view_binary,
    write_view_binary,
)

__all__ = [
    "AttributionReport",
    "Codebook",
    "CoxModel",
    "DataConfig",
    "EncoderConfig",
    "ExperimentConfig",
    "FlowConfig",
    "FormatError",
    "FusedSample",
    "KMCurve",
    "MotionEncoder",
    "MotionField",
    "MotionQueries",
    "PhantomParams",
    "ROIWindow",
    "ReconstructionDecoder",
    "RoiConfig",
    "RunReport",
    "Stage1Result",
    "Stage2Config",
    "Stage2Result",
    "StageIConfig",
    "StudyRecord",
    "SurvivalConfig",
    "SurvivalOutcome",
    "VoxelVideo",
    "ablate",
    "c_index",
    "chi2_sf",
    "correlation_filter",
    "cox_neg_log_likelihood",
    "crop_roi",
    "cumulative_hazard",
    "ema_update",
    "export_representation",
    "farneback_flow",
    "fit_cox",
    "fuse",
    "generate_dataset",
    "generate_study",
    "kl_distill_loss",
    "km_curve",
    "linear_attribution",
    "load_manifest",
    "load_study",
    "locate_roi",
    "log_rank",
    "motion_contrastive_loss",
    "predict_risk",
    "quantize_st",
    "read_view_binary",
    "regularized_gamma_q",
    "run",
    "samples_from_arrays",
    "stage2_loss",
    "stratify_median",
    "train_stage1",
    "train_stage2",
    "vec_quant",
    "video_to_tensor",
    "write_view_binary",
]

__version__ = "0.1.0"
