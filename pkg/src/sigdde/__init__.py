"""Signature-transform encoders for learning delay-differential dynamics.

Everything is built on numpy: a small reverse-mode autodiff engine, the
truncated path signature, a method-of-steps DDE solver with four benchmark
systems, encoder/decoder models, training, and an experiment harness.
"""

from .autodiff import Tape, Tensor, backward, grad, gradient_check
from .data import DatasetSplit, corrupt, generate_dataset, load_dataset, save_dataset
from .dde import SYSTEMS, DDESpec, TimeSeries, integrate, make_system
from .models import Checkpoint, DecoderConfig, EncoderConfig, Model
from .signature import TruncatedSignature, chen_concat, sig_dimension, signature, time_augment
from .training import RunRecord, TrainConfig, evaluate_rmse, train

__version__ = "0.1.0"
