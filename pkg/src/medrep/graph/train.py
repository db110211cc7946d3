"""Alternating contrastive / distillation training of the GCN encoder."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..descriptions import RepresentationMatrix, read_embedding_file, save_embedding_matrix
from ..errors import ContainerError, DivergedError, ShapeError
from ..vocab import RelationGraph
from .encoder import GcnEncoder, normalized_adjacency
from .losses import contrastive_loss_and_grad, kd_loss_and_grad
from .sampling import generate_view, khop_nodes, sample_subgraph

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 2048
    learning_rate: float = 5e-4
    feature_mask_rate: float = 0.2
    edge_drop_rate: float = 0.2
    tau: float = 0.5
    max_iterations: int = 200
    patience: int = 20
    hop_fanouts: tuple[int, ...] = (30, 20, 10)
    seed: int = 0
    weight_decay: float = 0.01
    # contrastive steps, then distillation steps, per alternation cycle
    alternation: tuple[int, int] = (1, 1)
    inference_batch_size: int = 4096

    def __post_init__(self):
        self.hop_fanouts = tuple(int(f) for f in self.hop_fanouts)
        self.alternation = tuple(int(a) for a in self.alternation)
        for name in ("feature_mask_rate", "edge_drop_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if any(f <= 0 for f in self.hop_fanouts):
            raise ValueError("fanouts must be positive")
        if self.batch_size <= 0 or self.max_iterations < 0 or self.patience <= 0:
            raise ValueError("batch_size and patience must be positive, max_iterations non-negative")
        if len(self.alternation) != 2 or min(self.alternation) < 0 or sum(self.alternation) == 0:
            raise ValueError("alternation must be two non-negative step counts, not both zero")


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            p *= 1.0 - self.lr * self.weight_decay
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class LogRow:
    iteration: int
    phase: str
    loss: float
    best_g: float
    patience_left: int

    def tsv(self) -> str:
        return f"{self.iteration}\t{self.phase}\t{self.loss:.17g}\t{self.best_g:.17g}\t{self.patience_left}"


LOG_HEADER = "iter\tphase\tloss\tbest_G\tpatience_left"


@dataclass
class TrainResult:
    representations: RepresentationMatrix
    encoder: GcnEncoder
    history: list[LogRow] = field(default_factory=list)
    iterations: int = 0
    stopped_early: bool = False
    rng_state: Optional[dict] = None

    def log_text(self) -> str:
        return "\n".join([LOG_HEADER] + [row.tsv() for row in self.history]) + "\n"


def _grad_add(a: dict, b: dict) -> dict:
    return {k: a[k] + b[k] for k in a}


def contrastive_step(encoder, Xs, edges, seeds, config, rng):
    """L_G and encoder gradients on one subgraph batch (loss measured on seed rows)."""
    n = Xs.shape[0]
    v1 = generate_view(edges, Xs, config.feature_mask_rate, config.edge_drop_rate, rng)
    v2 = generate_view(edges, Xs, config.feature_mask_rate, config.edge_drop_rate, rng)
    H1, c1 = encoder.forward(v1.masked_features, normalized_adjacency(n, v1.kept_edges))
    H2, c2 = encoder.forward(v2.masked_features, normalized_adjacency(n, v2.kept_edges))
    U, V = H1[seeds], H2[seeds]
    ok = (np.linalg.norm(U, axis=1) > 0) & (np.linalg.norm(V, axis=1) > 0)
    rows = seeds[ok]
    loss, dU, dV = contrastive_loss_and_grad(U[ok], V[ok], config.tau)
    g1 = np.zeros_like(H1)
    g2 = np.zeros_like(H2)
    g1[rows] = dU
    g2[rows] = dV
    return loss, _grad_add(encoder.backward(g1, c1), encoder.backward(g2, c2))


def distillation_step(encoder, Xs, edges, seeds):
    """L_KD between text rows and encoder output rows of the batch seeds."""
    n = Xs.shape[0]
    H, cache = encoder.forward(Xs, normalized_adjacency(n, edges))
    loss, dR = kd_loss_and_grad(Xs[seeds], H[seeds])
    g = np.zeros_like(H)
    g[seeds] = dR
    return loss, encoder.backward(g, cache)


def encode_full(encoder: GcnEncoder, X: np.ndarray, graph: RelationGraph, batch_size: int = 4096) -> np.ndarray:
    """R = g(X, A) on the un-dropped graph, in batches over 2-hop neighborhoods."""
    if X.shape[0] != graph.num_nodes:
        raise ShapeError(f"{X.shape[0]} feature rows for a graph of {graph.num_nodes} nodes")
    degrees = graph.degrees()
    out = np.empty((X.shape[0], encoder.W2.shape[1]))
    for start in range(0, X.shape[0], batch_size):
        targets = np.arange(start, min(start + batch_size, X.shape[0]))
        nodes = khop_nodes(graph, targets, 2)
        a_hat = normalized_adjacency(len(nodes), graph.subgraph_edges(nodes), degrees[nodes])
        H, _ = encoder.forward(X[nodes], a_hat)
        out[targets] = H[np.searchsorted(nodes, targets)]
    return out


def _batches(nodes: np.ndarray, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(nodes)
        for start in range(0, len(order), batch_size):
            yield np.sort(order[start:start + batch_size])


def train_representations(
    X: RepresentationMatrix,
    graph: RelationGraph,
    config: TrainConfig,
    train_nodes: Optional[Sequence[int]] = None,
) -> TrainResult:
    """Alternate L_G and L_KD steps on sampled subgraph batches; early-stop on stalled L_G.

    ``train_nodes`` restricts the batch seeds (default: every node with a
    non-zero feature row).
    """
    if X.kind != "text":
        raise ValueError("training expects text representations as input")
    feats = X.values
    if feats.shape[0] != graph.num_nodes:
        raise ShapeError(f"{feats.shape[0]} feature rows for a graph of {graph.num_nodes} nodes")
    rng = np.random.default_rng(config.seed)
    encoder = GcnEncoder.init(feats.shape[1], rng)
    if train_nodes is None:
        train_nodes = np.flatnonzero(np.any(feats != 0, axis=1))
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    result = TrainResult(None, encoder)
    if config.max_iterations > 0 and len(train_nodes) > 0:
        opt = AdamW(encoder.params(), config.learning_rate, config.weight_decay)
        schedule = ["G"] * config.alternation[0] + ["KD"] * config.alternation[1]
        batches = _batches(train_nodes, config.batch_size, rng)
        best_g = np.inf
        stale = 0
        it = 0
        done = False
        while not done:
            batch = next(batches)
            sub = sample_subgraph(graph, batch, config.hop_fanouts, rng)
            Xs = feats[sub.nodes]
            for phase in schedule:
                if it >= config.max_iterations:
                    done = True
                    break
                it += 1
                if phase == "G":
                    loss, grads = contrastive_step(encoder, Xs, sub.edges, sub.seeds, config, rng)
                else:
                    loss, grads = distillation_step(encoder, Xs, sub.edges, sub.seeds)
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise DivergedError(it, loss)
                opt.step(grads)
                if phase == "G":
                    if loss < best_g:
                        best_g, stale = loss, 0
                    else:
                        stale += 1
                result.history.append(LogRow(it, phase, loss, best_g, config.patience - stale))
                log.debug("iter %d %s loss=%.6f", it, phase, loss)
                if stale >= config.patience:
                    result.stopped_early = True
                    done = True
                    break
        result.iterations = it
    R = encode_full(encoder, feats, graph, config.inference_batch_size)
    if not np.all(np.isfinite(R)):
        raise DivergedError(result.iterations, float("nan"))
    result.representations = RepresentationMatrix(R, "graph")
    result.rng_state = rng.bit_generator.state
    return result


def save_checkpoint(path, result: TrainResult, config: TrainConfig, meta: Optional[dict] = None, catalog=None) -> None:
    enc = result.encoder
    info = dict(meta or {})
    info.update(
        kind="graph",
        iteration=result.iterations,
        stopped_early=result.stopped_early,
        rng_state=result.rng_state,
        train_config=asdict(config),
    )
    save_embedding_matrix(
        path,
        result.representations.values,
        catalog=catalog,
        meta=info,
        arrays={"W1": enc.W1, "W2": enc.W2, "slopes": enc.slopes},
    )


def load_checkpoint(path) -> tuple[GcnEncoder, RepresentationMatrix, dict]:
    mf = read_embedding_file(path)
    try:
        encoder = GcnEncoder(mf.arrays["W1"], mf.arrays["W2"], mf.arrays["slopes"])
    except KeyError as exc:
        raise ContainerError(f"{path}: not a checkpoint (missing {exc})") from None
    return encoder, RepresentationMatrix(mf.values.astype(np.float64), "graph"), mf.meta
