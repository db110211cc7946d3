"""Two-layer GCN encoder with pReLU activations and hand-written backprop."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ..errors import ShapeError

PRELU_INIT = 0.25


def normalized_adjacency(num_nodes: int, edges: np.ndarray, degrees: Optional[np.ndarray] = None) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 as a sparse matrix.

    ``degrees`` overrides the node degrees (without the self loop) used for
    normalization; passing full-graph degrees for an induced subgraph makes
    rows of nodes whose whole neighborhood is present match the full graph.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(num_nodes)])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(num_nodes)])
    if degrees is None:
        degrees = np.bincount(edges.ravel(), minlength=num_nodes)
    inv_sqrt = 1.0 / np.sqrt(np.asarray(degrees, dtype=np.float64) + 1.0)
    data = inv_sqrt[rows] * inv_sqrt[cols]
    a = sp.csr_matrix((data, (rows, cols)), shape=(num_nodes, num_nodes))
    a.sort_indices()
    return a


def prelu(z: np.ndarray, a: float) -> np.ndarray:
    return np.where(z > 0, z, a * z)


@dataclass
class GcnEncoder:
    W1: np.ndarray
    W2: np.ndarray
    slopes: np.ndarray = field(default_factory=lambda: np.array([PRELU_INIT, PRELU_INIT]))

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.slopes = np.asarray(self.slopes, dtype=np.float64).reshape(2)
        if self.W1.ndim != 2 or self.W2.ndim != 2 or self.W1.shape[1] != self.W2.shape[0]:
            raise ShapeError(f"incompatible weights {self.W1.shape} and {self.W2.shape}")
        if not (np.all(np.isfinite(self.W1)) and np.all(np.isfinite(self.W2))):
            raise ValueError("encoder weights must be finite")

    @classmethod
    def init(cls, h: int, rng: np.random.Generator) -> "GcnEncoder":
        bound = 1.0 / np.sqrt(h)
        W1 = rng.uniform(-bound, bound, size=(h, h))
        W2 = rng.uniform(-bound, bound, size=(h, h))
        return cls(W1, W2)

    @property
    def h(self) -> int:
        return self.W1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "W2": self.W2, "slopes": self.slopes}

    def copy(self) -> "GcnEncoder":
        return GcnEncoder(self.W1.copy(), self.W2.copy(), self.slopes.copy())

    def forward(self, X: np.ndarray, a_hat: sp.spmatrix) -> tuple[np.ndarray, dict]:
        if X.ndim != 2 or X.shape[1] != self.W1.shape[0]:
            raise ShapeError(f"features of width {X.shape[-1]} do not match encoder width {self.W1.shape[0]}")
        if a_hat.shape != (X.shape[0], X.shape[0]):
            raise ShapeError("adjacency does not match feature rows")
        AX = a_hat @ X
        Z1 = AX @ self.W1
        H1 = prelu(Z1, self.slopes[0])
        AH1 = a_hat @ H1
        Z2 = AH1 @ self.W2
        H = prelu(Z2, self.slopes[1])
        return H, {"a_hat": a_hat, "AX": AX, "Z1": Z1, "AH1": AH1, "Z2": Z2}

    def backward(self, grad_out: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        a1, a2 = self.slopes
        Z1, Z2 = cache["Z1"], cache["Z2"]
        dZ2 = np.where(Z2 > 0, grad_out, a2 * grad_out)
        da2 = np.sum(grad_out * np.minimum(Z2, 0.0))
        dW2 = cache["AH1"].T @ dZ2
        # a_hat is symmetric
        dH1 = cache["a_hat"] @ (dZ2 @ self.W2.T)
        dZ1 = np.where(Z1 > 0, dH1, a1 * dH1)
        da1 = np.sum(dH1 * np.minimum(Z1, 0.0))
        dW1 = cache["AX"].T @ dZ1
        return {"W1": dW1, "W2": dW2, "slopes": np.array([da1, da2])}


def gcn_forward(
    encoder: GcnEncoder, X: np.ndarray, edges: np.ndarray, degrees: Optional[np.ndarray] = None
) -> np.ndarray:
    """H = pReLU(Â pReLU(Â X W1) W2) with Â the self-looped symmetric normalization."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("features must be a 2-D matrix")
    a_hat = normalized_adjacency(X.shape[0], edges, degrees)
    return encoder.forward(X, a_hat)[0]
