"""Desk-scale workbench for two time-series encoder architectures.

Library surface: a small autodiff tensor engine, deterministic signal
preprocessing, the two encoders (channel-independent contrastive encoder and
criss-cross masked autoencoder), a training harness with early stopping and a
wall-clock cap, evaluation metrics with pinned conventions, and dataset /
checkpoint file formats.  The ``tsfm`` CLI orchestrates experiments.
"""

from .autodiff import DropoutRng, Tensor, grad_check, no_grad
from .cbramod import CBraModConfig, CBraModEncoder, MaskSpec, mae_loss, mask_patches
from .data import Dataset, DatasetManifest, Splits, SynthSpec, gen_synthetic
from .errors import (CheckpointError, ConfigError, DataError, GraphError,
                     ShapeError, WorkbenchError)
from .mantis import MantisConfig, MantisEncoder, augment, sinusoidal_position_encoding
from .metrics import (auc_pr, auroc, balanced_accuracy, cohens_kappa,
                      multiclass_ovr, weighted_f1)
from .training import (ClassifierHead, FitReport, HeadConfig, TrainConfig,
                       adamw_step, clip_grad_norm, cosine_warmup_lr, cross_entropy,
                       fit, info_nce, pretrain_contrastive, pretrain_mae, scos)

__version__ = "0.1.0"
