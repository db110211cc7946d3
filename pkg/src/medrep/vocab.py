"""Concept catalog, decile expansion and the concept relation graph."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp

from .container import escape_text, sha256_bytes, unescape_text
from .errors import BadDomain, DuplicateConcept, IoError, ParseError, UnknownConcept


class Domain(enum.IntEnum):
    """Concept domains; the integer value is the trajectory domain index."""

    SPECIAL = 0
    CONDITION = 1
    DRUG = 2
    MEASUREMENT = 3
    PROCEDURE = 4

    @classmethod
    def parse(cls, text: str) -> "Domain":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise BadDomain(f"unknown domain {text!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


CLINICAL_DOMAINS = (Domain.CONDITION, Domain.DRUG, Domain.MEASUREMENT, Domain.PROCEDURE)

SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")
PAD, CLS, SEP, UNK = 0, 1, 2, 3
NUM_SPECIALS = len(SPECIAL_TOKENS)

CONCEPT_HEADER = ("concept_id", "name", "domain")
EDGE_HEADER = ("concept_id_1", "concept_id_2")


def ordinal(n: int) -> str:
    if 10 <= n % 100 <= 20:
        suffix = "th"
    else:
        suffix = {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def format_key(concept_id: int, decile: Optional[int] = None) -> str:
    """Text form of a concept key: ``3004410`` or, for a decile variant, ``3004410_9``."""
    return str(concept_id) if decile is None else f"{concept_id}_{decile}"


def parse_key(text: str) -> tuple[int, Optional[int]]:
    text = text.strip()
    base, sep, dec = text.partition("_")
    try:
        concept_id = int(base)
        decile = int(dec) if sep else None
    except ValueError:
        raise ParseError(f"bad concept key {text!r}") from None
    if decile is not None and not 0 <= decile <= 9:
        raise ParseError(f"decile out of range in {text!r}")
    return concept_id, decile


@dataclass(frozen=True)
class Concept:
    concept_id: int
    name: str
    domain: Domain
    decile: Optional[int] = None

    def __post_init__(self):
        if self.decile is not None:
            if self.domain != Domain.MEASUREMENT:
                raise BadDomain(f"decile variant {self.concept_id} must be a measurement")
            if not 0 <= self.decile <= 9:
                raise ValueError(f"decile {self.decile} outside [0, 9]")

    @property
    def key(self) -> tuple[int, Optional[int]]:
        return (self.concept_id, self.decile)

    @property
    def is_special(self) -> bool:
        return self.domain == Domain.SPECIAL


def special_concepts() -> list[Concept]:
    return [Concept(i, tok, Domain.SPECIAL) for i, tok in enumerate(SPECIAL_TOKENS)]


class ConceptCatalog:
    """Ordered concepts with a dense row index.

    Concepts are keyed by ``(concept_id, decile)`` so decile variants of one
    measurement share their base id. Rows 0-3 always hold the special tokens.
    """

    def __init__(self, concepts: Iterable[Concept]):
        self.concepts: list[Concept] = list(concepts)
        self.index: dict[tuple[int, Optional[int]], int] = {}
        for row, concept in enumerate(self.concepts):
            if concept.key in self.index:
                raise DuplicateConcept(f"duplicate concept {format_key(*concept.key)}")
            self.index[concept.key] = row
        for row, tok in enumerate(SPECIAL_TOKENS):
            if row >= len(self.concepts) or self.concepts[row].name != tok or not self.concepts[row].is_special:
                raise ValueError("special tokens must occupy rows 0-3")
        self._variants: dict[int, list[int]] = {}
        for row, concept in enumerate(self.concepts):
            self._variants.setdefault(concept.concept_id, []).append(row)
        self.domains = np.array([int(c.domain) for c in self.concepts], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.concepts)

    def __iter__(self):
        return iter(self.concepts)

    def __getitem__(self, row: int) -> Concept:
        return self.concepts[row]

    def __eq__(self, other) -> bool:
        return isinstance(other, ConceptCatalog) and self.concepts == other.concepts

    @property
    def N(self) -> int:
        return len(self.concepts)

    def row(self, concept_id: int, decile: Optional[int] = None) -> int:
        try:
            return self.index[(concept_id, decile)]
        except KeyError:
            raise UnknownConcept(f"concept {format_key(concept_id, decile)} not in catalog") from None

    def get(self, concept_id: int, decile: Optional[int] = None, default=None):
        return self.index.get((concept_id, decile), default)

    def rows_for(self, concept_id: int) -> list[int]:
        """All rows sharing a base id (one row, or ten decile variants)."""
        try:
            return self._variants[concept_id]
        except KeyError:
            raise UnknownConcept(f"concept {concept_id} not in catalog") from None

    def has_deciles(self, concept_id: int) -> bool:
        return (concept_id, 0) in self.index

    def eligible(self) -> np.ndarray:
        """Dense indices of all non-special concepts."""
        return np.flatnonzero(self.domains != Domain.SPECIAL)

    def checksum(self) -> str:
        return sha256_bytes(catalog_bytes(self))


def _read_tsv(path, header: tuple[str, ...]) -> list[list[str]]:
    try:
        with open(path, encoding="utf-8", newline="") as f:
            lines = f.read().split("\n")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(f"{path}: empty file, expected header")
    got = tuple(lines[0].rstrip("\r").split("\t"))
    if got != header:
        raise ParseError(f"{path}: header {got!r}, expected {header!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
        rows.append(parts)
    return rows


def load_catalog(concept_file) -> ConceptCatalog:
    """Read a concept table; the four special tokens are injected at rows 0-3 if absent."""
    rows = _read_tsv(concept_file, CONCEPT_HEADER)
    specials = {c.name: c for c in special_concepts()}
    seen_specials: set[str] = set()
    regular: list[Concept] = []
    seen: set[tuple[int, Optional[int]]] = set()
    for key_text, name, domain_text in rows:
        concept_id, decile = parse_key(key_text)
        domain = Domain.parse(domain_text)
        name = unescape_text(name)
        if domain == Domain.SPECIAL:
            ref = specials.get(name)
            if ref is None or ref.concept_id != concept_id or decile is not None:
                raise BadDomain(f"unexpected special concept {key_text} {name!r}")
            if name in seen_specials:
                raise DuplicateConcept(f"duplicate concept {key_text}")
            seen_specials.add(name)
            continue
        key = (concept_id, decile)
        if key in seen or (decile is None and concept_id < NUM_SPECIALS):
            raise DuplicateConcept(f"duplicate concept {key_text}")
        seen.add(key)
        regular.append(Concept(concept_id, name, domain, decile))
    return ConceptCatalog(special_concepts() + regular)


def catalog_bytes(catalog: ConceptCatalog) -> bytes:
    lines = ["\t".join(CONCEPT_HEADER)]
    for c in catalog:
        lines.append(f"{format_key(c.concept_id, c.decile)}\t{escape_text(c.name)}\t{c.domain.label}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_catalog(catalog: ConceptCatalog, path) -> None:
    Path(path).write_bytes(catalog_bytes(catalog))


def expand_measurement_deciles(catalog: ConceptCatalog, numeric_measurement_ids) -> ConceptCatalog:
    """Replace each listed measurement concept with ten decile variants, in place of the original row."""
    ids = set(numeric_measurement_ids)
    for cid in ids:
        rows = catalog.rows_for(cid)
        for row in rows:
            concept = catalog[row]
            if concept.domain != Domain.MEASUREMENT:
                raise BadDomain(f"concept {cid} is {concept.domain.label}, not a measurement")
            if concept.decile is not None:
                raise DuplicateConcept(f"concept {cid} is already decile-expanded")
    if not ids:
        return catalog
    out: list[Concept] = []
    for concept in catalog:
        if concept.concept_id in ids and not concept.is_special:
            out.extend(
                Concept(concept.concept_id, f"{concept.name} ({ordinal(d)} decile)", concept.domain, d)
                for d in range(10)
            )
        else:
            out.append(concept)
    return ConceptCatalog(out)


@dataclass
class RelationGraph:
    """Undirected, self-loop-free concept graph over dense indices."""

    num_nodes: int
    edges: np.ndarray  # (E, 2) int64, i < j, lexicographically sorted
    adjacency: sp.csr_matrix = field(repr=False, default=None)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.adjacency is None:
            self.adjacency = adjacency_matrix(self.num_nodes, self.edges)

    @classmethod
    def from_pairs(cls, num_nodes: int, pairs) -> "RelationGraph":
        return cls(num_nodes, canonical_edges(num_nodes, pairs))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def subgraph_edges(self, nodes: np.ndarray) -> np.ndarray:
        """Edges induced on ``nodes`` (sorted global ids), in local coordinates."""
        sub = sp.triu(self.adjacency[nodes][:, nodes], k=1).tocoo()
        e = np.stack([sub.row, sub.col], axis=1).astype(np.int64)
        return e[np.lexsort((e[:, 1], e[:, 0]))] if len(e) else e.reshape(0, 2)


def canonical_edges(num_nodes: int, pairs) -> np.ndarray:
    e = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(e) and (e.min() < 0 or e.max() >= num_nodes):
        raise UnknownConcept("edge endpoint outside [0, N)")
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if len(e) == 0:
        return e.reshape(0, 2)
    return np.unique(e, axis=0)


def adjacency_matrix(num_nodes: int, edges: np.ndarray) -> sp.csr_matrix:
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    data = np.ones(len(rows), dtype=np.float64)
    a = sp.csr_matrix((data, (rows, cols)), shape=(num_nodes, num_nodes))
    a.sort_indices()
    return a


def load_graph(edge_file, catalog: ConceptCatalog) -> RelationGraph:
    """Read an edge list of concept ids; decile variants inherit their base concept's edges."""
    rows = _read_tsv(edge_file, EDGE_HEADER)
    pairs = []
    for a_text, b_text in rows:
        try:
            a, b = int(a_text), int(b_text)
        except ValueError:
            raise ParseError(f"{edge_file}: malformed edge {a_text!r}\t{b_text!r}") from None
        for i in catalog.rows_for(a):
            for j in catalog.rows_for(b):
                pairs.append((i, j))
    return RelationGraph.from_pairs(catalog.N, pairs)


def save_graph(graph: RelationGraph, catalog: ConceptCatalog, path) -> None:
    """Write the graph as base-concept-id pairs (variant edges collapse onto their base)."""
    ids = np.array([c.concept_id for c in catalog], dtype=np.int64)
    pairs = np.sort(ids[graph.edges], axis=1) if graph.num_edges else np.zeros((0, 2), dtype=np.int64)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(pairs, axis=0) if len(pairs) else pairs
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("\t".join(EDGE_HEADER) + "\n")
        for a, b in pairs:
            f.write(f"{a}\t{b}\n")
