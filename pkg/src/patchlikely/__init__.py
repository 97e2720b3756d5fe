"""patchlikely: exact-likelihood flow model of image patches, with
visual-illusion analysis and generation."""

__version__ = "0.1.0"

from . import analysis, data_io, generation, numerics
from .errors import (CheckpointError, ConfigError, GraphError,
                     ImageFormatError, NumericsError, PatchLikelyError,
                     ShapeError)
from .flow import (FlowParams, bits_per_dim, flow_forward, flow_inverse,
                   init_flow_params, log_likelihood, sample_patch)
from .numerics import Rng
from .training import (Checkpoint, PatchDataset, TrainConfig, dequantize,
                       dequantize_deterministic, load_checkpoint, nll_loss,
                       quantize, sample_patches, save_checkpoint, train)

__all__ = [
    "Checkpoint", "CheckpointError", "ConfigError", "FlowParams",
    "GraphError", "ImageFormatError", "NumericsError", "PatchDataset",
    "PatchLikelyError", "Rng", "ShapeError", "TrainConfig", "bits_per_dim",
    "dequantize", "dequantize_deterministic", "flow_forward", "flow_inverse",
    "init_flow_params", "load_checkpoint", "log_likelihood", "nll_loss",
    "quantize", "sample_patch", "sample_patches", "save_checkpoint", "train",
]
