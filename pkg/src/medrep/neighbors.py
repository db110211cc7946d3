"""Exact top-M Euclidean nearest neighbors over concept representations."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .container import expect_magic, read_file, read_trailer, write_trailer
from .errors import ContainerError, NotIndexed, ShapeError, TooFewConcepts

MNBR_MAGIC = b"MNBR"
_MNBR_HEADER = "<QI"
_NO_ROW = np.iinfo(np.uint32).max

# rows x candidates distance entries held at once
_BLOCK_ELEMS = 1 << 24


@dataclass
class NeighborSets:
    table: np.ndarray  # (N, M) int64 dense indices; -1 rows are not indexed
    M: int
    distances: Optional[np.ndarray] = field(default=None, repr=False)
    distance_metric: str = "euclidean"

    @property
    def N(self) -> int:
        return self.table.shape[0]

    @property
    def indexed(self) -> np.ndarray:
        return self.table[:, 0] >= 0 if self.M > 0 else np.zeros(self.N, dtype=bool)

    def query(self, k: int) -> list[int]:
        return query_neighbors(self, k)


def _select(d: np.ndarray, cand: np.ndarray, M: int) -> np.ndarray:
    """Positions of the M smallest distances, ties broken by ascending candidate index."""
    if len(d) > M:
        kth = np.partition(d, M - 1)[M - 1]
        pool = np.flatnonzero(d <= kth)
    else:
        pool = np.arange(len(d))
    order = np.lexsort((cand[pool], d[pool]))
    return pool[order[:M]]


def build_neighbor_sets(
    R,
    M: int,
    eligible: Sequence[int],
    domains: Optional[np.ndarray] = None,
    same_domain: bool = False,
) -> NeighborSets:
    """For each eligible k, the M eligible i != k minimizing ||r_k - r_i||, ties by index.

    With ``same_domain`` the candidates are restricted to the query's domain
    (``domains`` must then be given).
    """
    values = np.asarray(getattr(R, "values", R), dtype=np.float64)
    eligible = np.unique(np.asarray(eligible, dtype=np.int64))
    if M <= 0:
        raise ValueError("M must be positive")
    if M >= len(eligible):
        raise TooFewConcepts(f"M={M} needs more than {len(eligible)} eligible concepts")
    if same_domain and domains is None:
        raise ValueError("same_domain filtering needs the domain array")
    n, h = values.shape
    table = np.full((n, M), -1, dtype=np.int64)
    dist = np.full((n, M), np.nan)
    E = values[eligible]
    sq_norm = np.einsum("nh,nh->n", E, E)
    # Gram-identity distances only screen candidates; the final ordering uses
    # exact difference-based distances on the screened pool.
    slack = 1e-9 * (sq_norm.max() + 1.0)
    rows_per_block = max(1, _BLOCK_ELEMS // max(1, len(eligible)))
    for start in range(0, len(eligible), rows_per_block):
        block = eligible[start:start + rows_per_block]
        approx = sq_norm[start:start + len(block), None] + sq_norm[None, :] - 2.0 * (values[block] @ E.T)
        for b, k in enumerate(block):
            mask = eligible != k
            if same_domain:
                mask &= domains[eligible] == domains[k]
            cand = eligible[mask]
            if len(cand) < M:
                raise TooFewConcepts(f"concept row {k} has only {len(cand)} candidates for M={M}")
            rough = approx[b, mask]
            kth = np.partition(rough, M - 1)[M - 1]
            pool = np.flatnonzero(rough <= kth + slack)
            diff = values[cand[pool]] - values[k]
            d = np.einsum("nh,nh->n", diff, diff)
            pick = _select(d, cand[pool], M)
            table[k] = cand[pool][pick]
            dist[k] = np.sqrt(d[pick])
    return NeighborSets(table, M, dist)


def query_neighbors(sets: NeighborSets, k: int) -> list[int]:
    if not 0 <= k < sets.N or sets.table[k, 0] < 0:
        raise NotIndexed(f"concept row {k} has no neighbor row")
    return sets.table[k].tolist()


def save_neighbor_sets(sets: NeighborSets, path, meta: Optional[dict] = None) -> None:
    if sets.N >= _NO_ROW:
        raise ShapeError("too many concepts for u32 indices")
    table = np.where(sets.table < 0, _NO_ROW, sets.table).astype("<u4")
    with open(path, "wb") as f:
        f.write(MNBR_MAGIC)
        f.write(struct.pack(_MNBR_HEADER, sets.N, sets.M))
        f.write(table.tobytes())
        write_trailer(f, meta)


def load_neighbor_sets(path) -> tuple[NeighborSets, dict]:
    reader = read_file(path)
    expect_magic(reader, MNBR_MAGIC)
    n, m = reader.unpack(_MNBR_HEADER)
    raw = reader.array("<u4", n * m).reshape(n, m)
    meta, _ = read_trailer(reader)
    table = np.where(raw == _NO_ROW, -1, raw.astype(np.int64))
    if np.any(table >= n):
        raise ContainerError(f"{path}: neighbor index out of range")
    return NeighborSets(table, int(m)), meta
