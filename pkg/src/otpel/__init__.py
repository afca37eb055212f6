"""Parameter-efficient adaptation of a frozen miniature TTS backbone.

Input reprogramming, latent adapters and latent reprogramming trained with an
optional optimal-transport regularizer (sliced Wasserstein or MMD), on a
numpy reverse-mode autodiff core.
"""

from .backbone import Backbone, BackboneConfig, load_checkpoint, pretrain, save_checkpoint
from .errors import (
    ConfigError,
    ConfigHashError,
    ContractError,
    FileFormatError,
    MagicError,
    MissingArtifactError,
    OtpelError,
    ShapeError,
    TrainingError,
    TruncationError,
    VersionError,
    VocabularyError,
)
from .evaluate import MCDResult, dtw_align, mcd
from .losses import mae_loss
from .nn import ParamRegistry, count_params, freeze
from .ot import DistanceMetric, median_heuristic_bandwidth, mmd, ot_loss, swd
from .pel import AdaptedModel, PELConfig, assemble, input_reprogram, latent_adapt, latent_reprogram
from .synth import CorpusSpec, generate, load_corpus, save_corpus, source_spec, split, target_spec
from .tensor import Tensor, conv1d, finite_diff_grad, matmul, no_grad
from .train import FeatureBank, LossBreakdown, TrainConfig, adapt, build_feature_bank, ot_coefficient

__version__ = "0.1.0"

__all__ = [
    "adapt",
    "AdaptedModel",
    "assemble",
    "Backbone",
    "BackboneConfig",
    "build_feature_bank",
    "ConfigError",
    "ConfigHashError",
    "ContractError",
    "conv1d",
    "CorpusSpec",
    "count_params",
    "DistanceMetric",
    "dtw_align",
    "FeatureBank",
    "FileFormatError",
    "finite_diff_grad",
    "freeze",
    "generate",
    "input_reprogram",
    "latent_adapt",
    "latent_reprogram",
    "load_checkpoint",
    "load_corpus",
    "LossBreakdown",
    "mae_loss",
    "MagicError",
    "matmul",
    "mcd",
    "MCDResult",
    "median_heuristic_bandwidth",
    "MissingArtifactError",
    "mmd",
    "no_grad",
    "ot_coefficient",
    "ot_loss",
    "OtpelError",
    "ParamRegistry",
    "PELConfig",
    "pretrain",
    "save_checkpoint",
    "save_corpus",
    "ShapeError",
    "source_spec",
    "split",
    "swd",
    "target_spec",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "TruncationError",
    "VersionError",
    "VocabularyError",
]
