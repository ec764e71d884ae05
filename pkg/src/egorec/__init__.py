"""Multimodal graph recommendation with ego/neighbor contrastive alignment."""

__version__ = "0.1.0"

from .config import TrainConfig, load_config
from .dataset import InteractionDataset, ModalityFeatures, kcore_filter, load_interactions, split
from .graphs import SparseGraph, build_bipartite, build_item_graphs, cosine_topk
from .metrics import evaluate
from .model import ModelParameters, Recommender
from .trainer import fit

__all__ = [
    "TrainConfig", "load_config", "InteractionDataset", "ModalityFeatures", "kcore_filter",
    "load_interactions", "split", "SparseGraph", "build_bipartite", "build_item_graphs",
    "cosine_topk", "evaluate", "ModelParameters", "Recommender", "fit",
]
