"""Desk-scale diffusion ConvNet: autodiff tensors, a U-shaped conv denoiser
with compact channel attention, iDDPM training and sampling, and analytic
compute-cost diagnostics."""

from .costing import (
    CostReport,
    CostRow,
    REFERENCE_SPECS,
    TransformerSpec,
    attention_macs_per_token,
    conv_module_macs_per_token,
    count_macs_params,
)
from .diagnostics import (
    BenchRow,
    ChannelActivationReport,
    MacRecorder,
    SelfAttentionReference,
    channel_activation_scores,
    measure_forward_macs,
    self_attention_reference,
    throughput_bench,
)
from .diffusion import (
    DiffusionSchedule,
    GuidanceConfig,
    LossTerms,
    cfg_combine,
    discretized_gaussian_nll,
    gaussian_kl,
    losses,
    make_schedule,
    model_mean_var,
    p_sample_loop,
    posterior_mean_var,
    q_sample,
    respaced_view,
)
from .errors import (
    ConfigError,
    DicoError,
    DimensionError,
    NumericError,
    SerializationError,
    UsageError,
)
from .modules import (
    DiCoModel,
    ModelConfig,
    NetOutput,
    PRESETS,
    build_model,
    config_replace,
    get_preset,
    sinusoidal_embedding,
)
from .runconfig import RunConfig, config_to_text, parse_config
from .serialization import (
    load_checkpoint,
    load_dataset,
    read_checkpoint_config,
    save_checkpoint,
    save_dataset,
)
from .tensor import (
    Tensor,
    backward,
    conv2d,
    finite_diff_grad,
    matmul,
    no_grad,
    softmax,
)
from .train import (
    AdamW,
    Ema,
    ToyDataSpec,
    ToyDataset,
    hflip_augment,
    make_toy_data,
    train_loop,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "BenchRow",
    "ChannelActivationReport",
    "ConfigError",
    "CostReport",
    "CostRow",
    "DiCoModel",
    "DicoError",
    "DiffusionSchedule",
    "DimensionError",
    "Ema",
    "GuidanceConfig",
    "LossTerms",
    "MacRecorder",
    "ModelConfig",
    "NetOutput",
    "NumericError",
    "PRESETS",
    "REFERENCE_SPECS",
    "RunConfig",
    "SelfAttentionReference",
    "SerializationError",
    "Tensor",
    "ToyDataSpec",
    "ToyDataset",
    "TransformerSpec",
    "UsageError",
    "attention_macs_per_token",
    "backward",
    "build_model",
    "cfg_combine",
    "channel_activation_scores",
    "config_replace",
    "config_to_text",
    "conv2d",
    "conv_module_macs_per_token",
    "count_macs_params",
    "discretized_gaussian_nll",
    "finite_diff_grad",
    "gaussian_kl",
    "get_preset",
    "hflip_augment",
    "load_checkpoint",
    "load_dataset",
    "losses",
    "make_schedule",
    "make_toy_data",
    "matmul",
    "measure_forward_macs",
    "model_mean_var",
    "no_grad",
    "p_sample_loop",
    "parse_config",
    "posterior_mean_var",
    "q_sample",
    "read_checkpoint_config",
    "respaced_view",
    "save_checkpoint",
    "save_dataset",
    "self_attention_reference",
    "sinusoidal_embedding",
    "softmax",
    "throughput_bench",
    "train_loop",
    "train_step",
]
