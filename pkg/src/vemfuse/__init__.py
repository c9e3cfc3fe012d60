"""Fusing structure and text knowledge for sparse knowledge-graph completion.

A structure model (relational message passing + DistMult) and a text model
(query text encoder + entity classifier) are pre-trained separately and then
trained against each other: mutual-learning KL terms on observed queries and
variational-EM terms on generated, densified unobserved queries.
"""
from .kg import (KnowledgeGraph, TextStore, TripleSplit, augment_inverse, degree_stats,
                 load_dataset, neighbors, relation_jaccard, sparsify)
from .losses import FusionConfig, preset
from .structure import GraphOverlay, StructConfig, StructureModel
from .text import TextConfig, TextModel, Vocab, assemble_input, build_vocab
from .trainer import TrainConfig, fuse, pretrain
from .evaluation import Metrics, evaluate, filtered_rank

__version__ = "0.1.0"

__all__ = [
    "KnowledgeGraph", "TextStore", "TripleSplit", "augment_inverse", "degree_stats",
    "load_dataset", "neighbors", "relation_jaccard", "sparsify", "FusionConfig", "preset",
    "GraphOverlay", "StructConfig", "StructureModel", "TextConfig", "TextModel", "Vocab",
    "assemble_input", "build_vocab", "TrainConfig", "fuse", "pretrain", "Metrics",
    "evaluate", "filtered_rank",
]
