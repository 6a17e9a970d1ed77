"""Paired cross-modality image synthesis with a UNet generator, a global
Wasserstein critic and a local per-pixel discriminator, on a small
numpy reverse-mode autodiff engine."""

from . import autodiff, data, losses, metrics, networks, trainer
from .autodiff import Tensor, backward, grad, precision
from .data import PhantomSpec, Volume, generate_phantom, load_volume, save_volume, synthesize_volume
from .losses import LossWeights
from .metrics import mae, psnr
from .trainer import TrainConfig, load_checkpoint, run_training, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "data",
    "losses",
    "metrics",
    "networks",
    "trainer",
    "Tensor",
    "backward",
    "grad",
    "precision",
    "PhantomSpec",
    "Volume",
    "generate_phantom",
    "load_volume",
    "save_volume",
    "synthesize_volume",
    "LossWeights",
    "mae",
    "psnr",
    "TrainConfig",
    "load_checkpoint",
    "run_training",
    "save_checkpoint",
]
