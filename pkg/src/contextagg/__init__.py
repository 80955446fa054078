"""Context aggregation networks: self-attention, depthwise convolution and token MLPs
expressed as affinity matrices, plus a small numpy autodiff to train them."""
from .affinity import (
    AffinityMatrix,
    ConvAffinityParams,
    MixCoeffs,
    MlpAffinityParams,
    aggregate,
    conv_affinity,
    mix_affinity,
    mlp_affinity,
    sa_affinity,
)
from .blocks import AggregatorConfig, ContextBlock, FeedForward, PatchEmbed, context_block_forward, ffn_forward, pam_block, patch_embed
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    ContextAggError,
    ContractError,
    DivergenceError,
    NumericError,
    ShapeError,
    TruncatedError,
    UnknownTensorError,
    VersionError,
)
from .metrics import CostReport, bench_throughput, count_flops, count_params
from .network import Network, NetworkConfig, StageConfig, build_network, forward, load_checkpoint, preset, save_checkpoint
from .tensor import Param, Tensor, backward, no_grad
from .trainer import TrainConfig, adamw_step, gen_synthetic, lr_at, lr_scaled, train

__version__ = "0.1.0"

__all__ = [
    "AffinityMatrix",
    "ConvAffinityParams",
    "MixCoeffs",
    "MlpAffinityParams",
    "aggregate",
    "conv_affinity",
    "mix_affinity",
    "mlp_affinity",
    "sa_affinity",
    "AggregatorConfig",
    "ContextBlock",
    "FeedForward",
    "PatchEmbed",
    "context_block_forward",
    "ffn_forward",
    "pam_block",
    "patch_embed",
    "BadMagicError",
    "CheckpointError",
    "ConfigError",
    "ContextAggError",
    "ContractError",
    "DivergenceError",
    "NumericError",
    "ShapeError",
    "TruncatedError",
    "UnknownTensorError",
    "VersionError",
    "CostReport",
    "bench_throughput",
    "count_flops",
    "count_params",
    "Network",
    "NetworkConfig",
    "StageConfig",
    "build_network",
    "forward",
    "load_checkpoint",
    "preset",
    "save_checkpoint",
    "Param",
    "Tensor",
    "backward",
    "no_grad",
    "TrainConfig",
    "adamw_step",
    "gen_synthetic",
    "lr_at",
    "lr_scaled",
    "train",
]
