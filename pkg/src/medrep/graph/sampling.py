"""Stochastic graph views and hop-wise neighbor sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..vocab import RelationGraph


@dataclass
class GraphView:
    masked_features: np.ndarray
    kept_edges: np.ndarray
    feature_mask_rate: float
    edge_drop_rate: float


def _check_rate(name: str, rate: float) -> None:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {rate}")


def generate_view(
    edges: np.ndarray, X: np.ndarray, feature_mask_rate: float, edge_drop_rate: float, rng: np.random.Generator
) -> GraphView:
    """Drop each undirected edge and zero each feature column independently."""
    _check_rate("feature_mask_rate", feature_mask_rate)
    _check_rate("edge_drop_rate", edge_drop_rate)
    if isinstance(edges, RelationGraph):
        edges = edges.edges
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    keep_cols = rng.random(X.shape[1]) >= feature_mask_rate
    keep_edges = rng.random(len(edges)) >= edge_drop_rate
    return GraphView(X * keep_cols, edges[keep_edges], feature_mask_rate, edge_drop_rate)


@dataclass
class Subgraph:
    nodes: np.ndarray  # local -> global, sorted ascending
    edges: np.ndarray  # induced edges in local indices
    seeds: np.ndarray  # local indices of the seed nodes, in seed order

    def to_local(self, global_ids) -> np.ndarray:
        global_ids = np.asarray(global_ids)
        local = np.searchsorted(self.nodes, global_ids)
        if np.any(local >= len(self.nodes)) or np.any(self.nodes[np.minimum(local, len(self.nodes) - 1)] != global_ids):
            raise KeyError("node not in subgraph")
        return local

    def to_global(self, local_ids) -> np.ndarray:
        return self.nodes[np.asarray(local_ids)]


def sample_subgraph(
    graph: RelationGraph, seed_nodes: Sequence[int], fanouts: Sequence[int], rng: np.random.Generator
) -> Subgraph:
    """Expand the seeds hop by hop; each frontier node adds up to ``fanouts[d]`` unvisited neighbors.

    Neighbors are drawn uniformly without replacement. The returned edge set
    is the full induced subgraph on the visited nodes.
    """
    seeds = np.asarray(list(seed_nodes), dtype=np.int64)
    if len(seeds) == 0:
        raise ValueError("seed set must be non-empty")
    visited = np.zeros(graph.num_nodes, dtype=bool)
    visited[seeds] = True
    frontier = np.unique(seeds)
    for fanout in fanouts:
        if fanout <= 0:
            raise ValueError("fanouts must be positive")
        added = []
        for node in frontier:
            cand = graph.neighbors(node)
            cand = cand[~visited[cand]]
            if len(cand) > fanout:
                cand = rng.choice(cand, size=fanout, replace=False)
            if len(cand):
                visited[cand] = True
                added.append(cand)
        if not added:
            break
        frontier = np.unique(np.concatenate(added))
    nodes = np.flatnonzero(visited)
    return Subgraph(nodes, graph.subgraph_edges(nodes), np.searchsorted(nodes, seeds))


def khop_nodes(graph: RelationGraph, seeds: Sequence[int], hops: int) -> np.ndarray:
    """All nodes within ``hops`` of the seeds (no sampling), sorted."""
    visited = np.zeros(graph.num_nodes, dtype=bool)
    frontier = np.unique(np.asarray(list(seeds), dtype=np.int64))
    visited[frontier] = True
    a = graph.adjacency
    for _ in range(hops):
        if len(frontier) == 0:
            break
        reach = np.unique(a[frontier].indices)
        frontier = reach[~visited[reach]]
        visited[frontier] = True
    return np.flatnonzero(visited)
