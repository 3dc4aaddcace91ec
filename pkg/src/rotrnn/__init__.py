"""RotRNN: linear recurrences with rotation-parameterised state matrices.

Modules
    rotor    rotation algebra (skew, expm, Frechet derivative, Theta powers)
    scan     associative scan over (decay, angle, state) elements
    layer    multi-head RotRNN layer and its reference forms
    model    sequence classifier built from RotRNN blocks
    lru_ref  diagonal complex reference recurrence and the 2x2-head embedding
    grad     hand-written gradients, finite-difference checks, Adam
    tasks    synthetic copy / majority / white-noise data
    harness  configs, training loop, checkpoints, CLI
"""

from .errors import CheckpointError, ConfigError, ContractError, DimensionError, InputError, NumericError
from .layer import (
    HeadParams,
    RotRNNLayerParams,
    SequenceBatch,
    conv_forward,
    gamma_of,
    head_forward,
    init_layer,
    layer_forward,
    xi_of,
)
from .model import ModelConfig, ModelParams, cross_entropy_loss, init_model, model_forward
from .rotor import RotationFactor, expm, expm_frechet, make_p, rotate, skew, theta_apply
from .scan import ScanElement, combine, parallel_scan, sequential_scan

__version__ = "0.1.0"
