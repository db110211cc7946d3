"""Per-domain LLM prompts and text-based concept representations.

The language-model stage itself is external. Representations either come from
an ``MREP`` matrix file produced elsewhere or from :func:`stub_embed`, a
deterministic feature-hashing stand-in that keeps the rest of the pipeline
testable.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Mapping, Optional

import numpy as np

from .container import (
    Reader,
    code_dtype,
    dtype_code,
    escape_text,
    expect_magic,
    read_file,
    read_trailer,
    unescape_text,
    write_trailer,
)
from .errors import BadDimension, BadDomain, ContainerError, IoError, ParseError, ShapeError, UnknownConcept
from .vocab import PAD, ConceptCatalog, Domain, format_key, parse_key

CONCEPT_MARKER = "Concept name: "

_PREAMBLE = "Instruction: Briefly explain the clinical background and {focus} of each concept name ({domain}) with less than 5 sentences. "
_ORDINARY = (
    'Do not include sentences that are too ordinary (such as "further details would depend on the '
    'specific situation) and focus on describing the representative clinical features of the concept. '
)

PROMPTS: dict[Domain, str] = {
    Domain.CONDITION: _PREAMBLE.format(focus="regarding treatments", domain="condition") + _ORDINARY + CONCEPT_MARKER,
    Domain.DRUG: (
        _PREAMBLE.format(focus="purpose", domain="drug")
        + _ORDINARY
        + "For explanation, if it exists in the concept name, take into account the detailed items of the "
        "concept such as ingredient, dosage form, and strength. If several drugs are contained in a concept, "
        "do not explain those drugs separately, but explain the concept name comprehensively and finish the "
        "answer with less than 5 sentences. "
        + CONCEPT_MARKER
    ),
    Domain.MEASUREMENT: (
        _PREAMBLE.format(focus="context", domain="measurement")
        + _ORDINARY
        + "For explanation, if it exists in the concept name, describe what the decile means clinically. "
        + CONCEPT_MARKER
    ),
    Domain.PROCEDURE: _PREAMBLE.format(focus="purpose", domain="procedure") + _ORDINARY + CONCEPT_MARKER,
}


@dataclass(frozen=True)
class PromptTemplate:
    domain: Domain
    instruction_text: str

    def __post_init__(self):
        if not self.instruction_text.endswith(CONCEPT_MARKER):
            raise ValueError("instruction text must end with the concept-name marker")

    def render(self, concept_name: str) -> str:
        return self.instruction_text + concept_name


def template(domain: Domain) -> PromptTemplate:
    if domain not in PROMPTS:
        raise BadDomain(f"no prompt for domain {Domain(domain).label}")
    return PromptTemplate(Domain(domain), PROMPTS[Domain(domain)])


def build_prompt(domain: Domain, concept_name: str) -> str:
    return template(domain).render(concept_name)


@dataclass(frozen=True)
class DescriptionRecord:
    concept_id: str  # concept key text, e.g. "3004410" or "3004410_9"
    description: str

    def __post_init__(self):
        if not self.description:
            raise ValueError(f"empty description for {self.concept_id}")


def load_descriptions(path) -> dict[str, str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not lines or lines[0].rstrip("\r") != "concept_id\tdescription":
        raise ParseError(f"{path}: bad description table header")
    out = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        key, sep, text = line.rstrip("\r").partition("\t")
        if not sep:
            raise ParseError(f"{path}:{lineno}: expected two fields")
        rec = DescriptionRecord(format_key(*parse_key(key)), unescape_text(text))
        out[rec.concept_id] = rec.description
    return out


def save_descriptions(descriptions: Mapping[str, str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("concept_id\tdescription\n")
        for key, text in descriptions.items():
            f.write(f"{key}\t{escape_text(DescriptionRecord(key, text).description)}\n")


def _token_hash(token: str, seed: int) -> tuple[int, int]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=struct.pack("<q", seed)).digest()
    value = int.from_bytes(digest, "little")
    return value >> 1, value & 1


def stub_embed(concept_name: str, description: str, h: int, seed: int = 0) -> np.ndarray:
    """Seeded signed feature hashing of the whitespace tokens of name + description, L2-normalized.

    Falls back to unsigned counts when signs cancel exactly, so the output
    always has unit norm.
    """
    if h <= 0:
        raise BadDimension(f"embedding width must be positive, got {h}")
    tokens = f"{concept_name} {description}".lower().split() or ["[empty]"]
    signed = np.zeros(h)
    counts = np.zeros(h)
    for tok in tokens:
        bucket, sign = _token_hash(tok, seed)
        signed[bucket % h] += 1.0 if sign else -1.0
        counts[bucket % h] += 1.0
    v = signed if np.any(signed) else counts
    return v / np.linalg.norm(v)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@dataclass(frozen=True)
class RepresentationMatrix:
    values: np.ndarray
    kind: Literal["text", "graph"] = "text"

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError("representation matrix must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("representation matrix has non-finite entries")

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def h(self) -> int:
        return self.values.shape[1]


def text_representations(
    catalog: ConceptCatalog, descriptions: Mapping[str, str], h: int = 768, seed: int = 0
) -> RepresentationMatrix:
    """Stub text representations for a whole catalog; [PAD] is the zero vector."""
    X = np.zeros((catalog.N, h))
    for row, concept in enumerate(catalog):
        if row == PAD:
            continue
        desc = descriptions.get(format_key(concept.concept_id, concept.decile), "")
        X[row] = stub_embed(concept.name, desc, h, seed)
    return RepresentationMatrix(X, "text")


@dataclass(frozen=True)
class EmbeddingSource:
    kind: Literal["file", "stub"]
    h: int = 768
    path: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.h <= 0:
            raise BadDimension(f"embedding width must be positive, got {self.h}")
        if self.kind == "file" and self.path is None:
            raise ValueError("file embedding source needs a path")

    def load(self, catalog: ConceptCatalog, descriptions: Optional[Mapping[str, str]] = None) -> RepresentationMatrix:
        if self.kind == "file":
            return load_embedding_matrix(self.path, catalog, h=self.h)
        return text_representations(catalog, descriptions or {}, self.h, self.seed)


# -- MREP matrix container ---------------------------------------------------

MREP_MAGIC = b"MREP"
MREP_VERSION = 1
_MREP_HEADER = "<IQIB"


def save_embedding_matrix(
    path,
    values: np.ndarray,
    *,
    catalog: Optional[ConceptCatalog] = None,
    dtype="<f8",
    meta: Optional[dict] = None,
    arrays: Optional[dict[str, np.ndarray]] = None,
) -> None:
    """Write an ``MREP`` file. With a catalog, row keys are stored so the file can be re-indexed."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError("matrix must be 2-D")
    n, h = values.shape
    code = dtype_code(dtype)
    if code not in (0, 1):
        raise ValueError("matrix dtype must be f32 or f64")
    extra = dict(arrays or {})
    meta = dict(meta or {})
    if catalog is not None:
        if catalog.N != n:
            raise ShapeError(f"catalog has {catalog.N} rows, matrix has {n}")
        extra["row_concept_id"] = np.array([c.concept_id for c in catalog], dtype="<i8")
        extra["row_decile"] = np.array([-1 if c.decile is None else c.decile for c in catalog], dtype="i1")
    with open(path, "wb") as f:
        f.write(MREP_MAGIC)
        f.write(struct.pack(_MREP_HEADER, MREP_VERSION, n, h, code))
        f.write(np.ascontiguousarray(values, dtype=code_dtype(code)).tobytes())
        write_trailer(f, meta, extra)


@dataclass
class MatrixFile:
    values: np.ndarray
    meta: dict
    arrays: dict[str, np.ndarray]


def read_embedding_file(path) -> MatrixFile:
    reader: Reader = read_file(path)
    expect_magic(reader, MREP_MAGIC)
    version, n, h, code = reader.unpack(_MREP_HEADER)
    if version != MREP_VERSION:
        raise ContainerError(f"{path}: unsupported MREP version {version}")
    values = reader.array(code_dtype(code), n * h).reshape(n, h)
    meta, arrays = read_trailer(reader)
    return MatrixFile(values, meta, arrays)


def load_embedding_matrix(path, catalog: ConceptCatalog, h: Optional[int] = None, kind="text") -> RepresentationMatrix:
    """Load a matrix aligned to ``catalog``.

    Files carrying row keys are re-indexed to the catalog's dense order (every
    catalog concept must be present); files without keys must match N exactly.
    """
    mf = read_embedding_file(path)
    values = mf.values.astype(np.float64)
    if h is not None and values.shape[1] != h:
        raise ShapeError(f"{path}: width {values.shape[1]}, expected {h}")
    if "row_concept_id" in mf.arrays:
        ids, decs = mf.arrays["row_concept_id"], mf.arrays["row_decile"]
        if len(ids) != values.shape[0]:
            raise ShapeError(f"{path}: key count does not match row count")
        lookup = {(int(i), None if d < 0 else int(d)): r for r, (i, d) in enumerate(zip(ids, decs))}
        order = np.empty(catalog.N, dtype=np.int64)
        for row, concept in enumerate(catalog):
            src = lookup.get(concept.key)
            if src is None:
                raise UnknownConcept(f"{path}: no row for concept {format_key(*concept.key)}")
            order[row] = src
        values = values[order]
    elif values.shape[0] != catalog.N:
        raise ShapeError(f"{path}: {values.shape[0]} rows, catalog has {catalog.N}")
    return RepresentationMatrix(values, mf.meta.get("kind", kind))
