"""Multi-center medication recommendation at desk scale.

A two-stage pipeline over multi-center clinical records: self-supervised
pretraining of a shared transformer set-encoder (masked-code reconstruction
plus diagnosis/procedure contrastive alignment), then per-center prompt
tuning of the frozen backbone. Ships with its own float64 autodiff engine, a
synthetic data generator with a heterogeneity knob, evaluation metrics and a
CLI for the full experiment matrix.
"""

from .autodiff import NumericError, Tensor
from .data import MultiCenterDataset, Record, Vocabularies
from .encoder import BackboneParams, EncoderConfig
from .generator import GeneratorConfig, generate
from .metrics import GroupThresholds, average_precision, f1, jaccard, jsd
from .pretrain import PretrainConfig, run_pretrain
from .tune import CenterAdapter, CenterModelStore, TuneConfig, run_tune

__version__ = "0.1.0"

__all__ = [
    "BackboneParams", "CenterAdapter", "CenterModelStore", "EncoderConfig",
    "GeneratorConfig", "GroupThresholds", "MultiCenterDataset", "NumericError",
    "PretrainConfig", "Record", "Tensor", "TuneConfig", "Vocabularies",
    "average_precision", "f1", "generate", "jaccard", "jsd", "run_pretrain",
    "run_tune",
]
