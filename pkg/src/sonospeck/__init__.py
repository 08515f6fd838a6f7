"""Self-supervised despeckling toolkit for multiplicative-speckle imagery.

Subpackages:
  tensor    rank-4 tensors with reverse-mode autodiff
  speckle   Gamma speckle physics, trigamma targets, synthetic scenes
  model     residual prediction network and checkpoints
  losses    statistical / structural / curriculum objective
  training  patch-based AdamW training loop and sweeps
  metrics   ratio-image M-score, EPI, PSNR, throughput
  imgio     grayscale image file I/O
  config    flat key = value run configuration
  cli       command-line entry points
"""

from .losses import LossConfig
from .model import RpnParams, build_rpn, despeckle, forward, load_checkpoint, save_checkpoint
from .speckle import SpeckleSpec, looks_from_variance, make_scene, sample_speckle, trigamma
from .tensor import Tensor
from .training import TrainConfig, train

__all__ = [
    "LossConfig", "RpnParams", "SpeckleSpec", "Tensor", "TrainConfig",
    "build_rpn", "despeckle", "forward", "load_checkpoint", "looks_from_variance",
    "make_scene", "sample_speckle", "save_checkpoint", "train", "trigamma",
]

__version__ = "0.1.0"
