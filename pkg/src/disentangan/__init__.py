"""Disentangling GAN with a compete-free generator, one-hot code sampling and
orthogonally regularised code extractor."""
from .checkpoint import load_checkpoint, load_models, save_checkpoint
from .config import TrainConfig
from .critic import Critic, CriticConfig, QMode, QPrediction, build_critic, discriminate, extract_code
from .data import FactorDataset, load_archive, load_dsprites, save_archive, synth_factors
from .errors import (CheckpointError, CheckpointVersionError, DatasetFormatError, DegenerateEncoderError,
                     ModeError, NonFiniteLossError)
from .generator import Generator, GeneratorConfig, build_generator, generate, latent_traversal
from .latent import (CodeKind, LatentCode, SamplingSchedule, sample_noise, sample_onehot_code,
                     sample_uniform_code)
from .metrics import MetricReport, kim_score, perceptual_diversity, tc_estimate
from .objectives import (LossWeights, g_adv_loss, hinge_d_loss, mi_loss, onehot_ce_loss, orthogonal_reg)
from .trainer import TrainState, train, train_step

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "CheckpointVersionError", "CodeKind", "Critic", "CriticConfig", "DatasetFormatError",
    "DegenerateEncoderError", "FactorDataset", "Generator", "GeneratorConfig", "LatentCode", "LossWeights",
    "MetricReport", "ModeError", "NonFiniteLossError", "QMode", "QPrediction", "SamplingSchedule",
    "TrainConfig", "TrainState", "build_critic", "build_generator", "discriminate", "extract_code",
    "g_adv_loss", "generate", "hinge_d_loss", "kim_score", "latent_traversal", "load_archive",
    "load_checkpoint", "load_dsprites", "load_models", "mi_loss", "onehot_ce_loss", "orthogonal_reg",
    "perceptual_diversity", "sample_noise", "sample_onehot_code", "sample_uniform_code", "save_archive",
    "save_checkpoint", "synth_factors", "tc_estimate", "train", "train_step",
]
