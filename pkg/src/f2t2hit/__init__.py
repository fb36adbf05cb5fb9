"""Single-image reflection removal with a U-shaped network mixing channel
attention, hierarchical window attention, and frequency-domain mixing."""

from .blocks import (
    ChannelFFN,
    DualFeatureExtraction,
    F2T2Block,
    FFTLayer,
    HiTBlock,
    HiTWindowAttention,
    LayerNorm2d,
    NAFBlock,
    SimpleGate,
    SimplifiedChannelAttention,
    SpatialFFN,
    channel_self_correlation,
    layer_norm_2d,
    simple_gate,
    spatial_self_correlation,
    window_merge,
    window_partition,
)
from .data import (
    DatasetSpec,
    ReflectionTriple,
    SynthesisParams,
    augment,
    gaussian_blur,
    load_eval_pairs,
    load_image,
    random_crop,
    save_image,
    synthesize_pair,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    ShapeError,
    TrainingError,
)
from .metrics import MetricReport, evaluate_dataset, psnr, ssim, ssim_value
from .network import (
    F2T2HiTNet,
    ModelConfig,
    VARIANTS,
    build_model,
    count_params,
    desk_model_config,
    load_model_checkpoint,
    full_scale_model_config,
    save_model_checkpoint,
)
from .training import (
    TrainConfig,
    TrainState,
    cosine_restart_lr,
    desk_train_config,
    fit,
    load_checkpoint,
    loss,
    save_checkpoint,
    train_step,
)
from .verify import (
    GradCheckReport,
    attention_oracle,
    finite_diff_grad_check,
    run_checks,
    spectral_roundtrip_check,
)

__version__ = "0.1.0"

__all__ = [
    "ChannelFFN", "DualFeatureExtraction", "F2T2Block", "FFTLayer",
    "HiTBlock", "HiTWindowAttention", "LayerNorm2d", "NAFBlock",
    "SimpleGate", "SimplifiedChannelAttention", "SpatialFFN",
    "channel_self_correlation", "layer_norm_2d", "simple_gate",
    "spatial_self_correlation", "window_merge", "window_partition",
    "DatasetSpec", "ReflectionTriple", "SynthesisParams", "augment",
    "gaussian_blur", "load_eval_pairs", "load_image", "random_crop",
    "save_image", "synthesize_pair",
    "CheckpointError", "ConfigError", "DatasetError", "ShapeError",
    "TrainingError",
    "MetricReport", "evaluate_dataset", "psnr", "ssim", "ssim_value",
    "F2T2HiTNet", "ModelConfig", "VARIANTS", "build_model", "count_params",
    "desk_model_config", "load_model_checkpoint", "full_scale_model_config",
    "save_model_checkpoint",
    "TrainConfig", "TrainState", "cosine_restart_lr", "desk_train_config",
    "fit", "load_checkpoint", "loss", "save_checkpoint", "train_step",
    "GradCheckReport", "attention_oracle", "finite_diff_grad_check",
    "run_checks", "spectral_roundtrip_check",
    "__version__",
]
