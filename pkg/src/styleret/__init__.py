"""Style-diversified retrieval with a frozen dual-tower encoder and a learnable prompt bank."""

from .encoder import Backbone, BackboneConfig, load_backbone, save_backbone
from .promptbank import PromptBank, load_bank, lookup, new_bank, save_bank
from .prototype import PrototypeEncoder, style_prototypes
from .retrieval import (RetrievalIndex, build_index, fuse_queries, load_index, measure_latency, query,
                        rank, recall_at_k, save_index)
from .synthdata import DataConfig, StyleTag, build_dataset, generate_dataset, load_dataset
from .training import TrainConfig, fit, gradient_check, warmup_backbone

__all__ = [
    "Backbone", "BackboneConfig", "DataConfig", "PromptBank", "PrototypeEncoder", "RetrievalIndex",
    "StyleTag", "TrainConfig", "build_dataset", "build_index", "fit", "fuse_queries", "generate_dataset",
    "gradient_check", "load_backbone", "load_bank", "load_dataset", "load_index", "lookup",
    "measure_latency", "new_bank", "query", "rank", "recall_at_k", "save_backbone", "save_bank",
    "save_index", "style_prototypes", "warmup_backbone",
]
