"""Sequence labeling with sum-product network factors in MEMMs and
linear-chain CRFs."""

from .chain import ChainModel, LocalFactor, NGramDictionary
from .data import Dataset, LabeledSequence
from .memm import MemmModel
from .spn import PathPrefix, Semiring, SpnTopology, SpnWeights
from .training import TrainConfig, TrainReport, train

__all__ = [
    "ChainModel", "LocalFactor", "NGramDictionary", "Dataset", "LabeledSequence",
    "MemmModel", "PathPrefix", "Semiring", "SpnTopology", "SpnWeights",
    "TrainConfig", "TrainReport", "train",
]
__version__ = "0.1.0"
