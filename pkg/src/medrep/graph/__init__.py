"""Graph-enhanced concept representations: R = g(X, A)."""
from ..descriptions import RepresentationMatrix
from .encoder import GcnEncoder, gcn_forward, normalized_adjacency, prelu
from .losses import contrastive_loss, contrastive_loss_and_grad, kd_loss, kd_loss_and_grad, ntxent_pair_loss
from .sampling import GraphView, Subgraph, generate_view, khop_nodes, sample_subgraph
from .train import (
    AdamW,
    TrainConfig,
    TrainResult,
    encode_full,
    load_checkpoint,
    save_checkpoint,
    train_representations,
)

__all__ = [
    "AdamW",
    "GcnEncoder",
    "GraphView",
    "RepresentationMatrix",
    "Subgraph",
    "TrainConfig",
    "TrainResult",
    "contrastive_loss",
    "contrastive_loss_and_grad",
    "encode_full",
    "gcn_forward",
    "generate_view",
    "kd_loss",
    "kd_loss_and_grad",
    "khop_nodes",
    "load_checkpoint",
    "normalized_adjacency",
    "ntxent_pair_loss",
    "prelu",
    "sample_subgraph",
    "save_checkpoint",
    "train_representations",
]
