"""Coarse-to-fine memory matching for claim verification, with exemplar auditing."""

from .corpus import ClaimRecord, EvidencePointer, Label, SynthConfig, WikiStore, generate_synthetic
from .encoder import EncoderConfig, Vocabulary
from .model import MemoryModel
from .searcher import SearchConfig, search_many
from .trainer import TrainConfig, train

__all__ = [
    "ClaimRecord", "EvidencePointer", "Label", "SynthConfig", "WikiStore", "generate_synthetic",
    "EncoderConfig", "Vocabulary", "MemoryModel", "SearchConfig", "search_many", "TrainConfig", "train",
]
