"""Crystal graph encoders pre-trained with self-supervised node and graph
level objectives, and property predictors distilled from them.

Everything runs on numpy in 64-bit floats with a small reverse-mode
autodiff engine (:mod:`crystalkd.tensor`).
"""
from .checkpoint import load_checkpoint, load_student, load_teacher, save_checkpoint, save_student
from .config import ABLATIONS, TrainConfig
from .distill import (
    DistillConfig, Student, Teacher, eval_mae, init_student, kd_loss, predict, prop_loss, train_predictor,
)
from .encoder import EncoderConfig, GraphBatch, conv_layer, encode, init_encoder, pool
from .errors import (
    CheckpointError, ConfigError, CorruptionError, CrystalKDError, DataError, DimensionError,
    DomainError, FormatError, NumericalError, ParseError, StateError, UsageError, ValidationError,
    VersionError,
)
from .graph import (
    AtomPropertyRaw, CrystalGraph, CrystalSystem, FeatureLayout, encode_atom_features,
    generate_synthetic, load_dataset, save_dataset, space_group_to_system, validate_graph,
)
from .pretrain import (
    PretrainWeights, connectivity_recon_loss, feature_recon_loss, init_teacher, ntxent_loss,
    pretrain_loss, run_pretrain, space_group_loss,
)
from .rng import rng_stream
from .tensor import AdamHyper, ParamStore, Tensor, adam_step, grad_check

__version__ = "0.1.0"
