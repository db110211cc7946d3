"""Patient trajectories: five aligned index streams built from clinical records."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .container import expect_magic, read_file, read_trailer, write_trailer
from .errors import ContainerError, IoError, NotBinned, OrderError, ParseError, TooLong
from .vocab import CLS, PAD, SEP, UNK, ConceptCatalog, Domain

MAX_LEN = 2048
MAX_AGE = 119
MAX_RECORD_INDEX = 2047
MIN_BIN_COUNT = 10
STREAMS = ("concept", "age", "visit", "record", "domain")

RECORD_HEADER = ("patient_id", "concept_id", "domain", "timestamp", "value", "visit_id")
VISIT_HEADER = ("patient_id", "visit_id", "admission", "discharge", "died", "birth_date")


@dataclass(frozen=True, slots=True)
class ClinicalRecord:
    patient_id: str
    concept_id: int
    domain: Domain
    timestamp: datetime
    value: Optional[float] = None
    visit_id: str = ""

    def __post_init__(self):
        if self.value is not None and self.domain != Domain.MEASUREMENT:
            raise ValueError("numeric values are only allowed on measurement records")


@dataclass(frozen=True, slots=True)
class Visit:
    patient_id: str
    visit_id: str
    admission: datetime
    discharge: datetime
    died: bool = False
    birth_date: Optional[date] = None


def _fmt_time(ts: datetime) -> str:
    return ts.strftime("%Y-%m-%dT%H:%M")


def _parse_time(text: str) -> datetime:
    try:
        return datetime.fromisoformat(text.strip()).replace(second=0, microsecond=0, tzinfo=None)
    except ValueError:
        raise ParseError(f"bad timestamp {text!r}") from None


def _read_rows(path, header) -> list[list[str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    lines = text.split("\n")
    if not lines or tuple(lines[0].rstrip("\r").split("\t")) != header:
        raise ParseError(f"{path}: expected header {header!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields")
        rows.append(parts)
    return rows


def load_records(path) -> list[ClinicalRecord]:
    out = []
    for pid, cid, dom, ts, value, vid in _read_rows(path, RECORD_HEADER):
        try:
            concept_id = int(cid)
            val = float(value) if value.strip() else None
        except ValueError:
            raise ParseError(f"{path}: bad record fields {cid!r}/{value!r}") from None
        out.append(ClinicalRecord(pid, concept_id, Domain.parse(dom), _parse_time(ts), val, vid))
    return out


def save_records(records: Iterable[ClinicalRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("\t".join(RECORD_HEADER) + "\n")
        for r in records:
            value = "" if r.value is None else repr(float(r.value))
            f.write(f"{r.patient_id}\t{r.concept_id}\t{r.domain.label}\t{_fmt_time(r.timestamp)}\t{value}\t{r.visit_id}\n")


def load_visits(path) -> list[Visit]:
    out = []
    for pid, vid, adm, dis, died, birth in _read_rows(path, VISIT_HEADER):
        if died not in ("0", "1"):
            raise ParseError(f"{path}: died flag must be 0 or 1, got {died!r}")
        bdate = date.fromisoformat(birth) if birth.strip() else None
        out.append(Visit(pid, vid, _parse_time(adm), _parse_time(dis), died == "1", bdate))
    return out


def save_visits(visits: Iterable[Visit], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("\t".join(VISIT_HEADER) + "\n")
        for v in visits:
            birth = v.birth_date.isoformat() if v.birth_date else ""
            f.write(f"{v.patient_id}\t{v.visit_id}\t{_fmt_time(v.admission)}\t{_fmt_time(v.discharge)}\t{int(v.died)}\t{birth}\n")


# -- deciles -----------------------------------------------------------------

@dataclass
class DecileBins:
    """Nine non-decreasing cut points per binned measurement concept."""

    cuts: dict[int, np.ndarray] = field(default_factory=dict)

    def __contains__(self, concept_id: int) -> bool:
        return concept_id in self.cuts

    def to_json(self) -> dict:
        return {str(k): [float(x) for x in v] for k, v in sorted(self.cuts.items())}

    @classmethod
    def from_json(cls, obj: Mapping[str, Sequence[float]]) -> "DecileBins":
        return cls({int(k): np.asarray(v, dtype=np.float64) for k, v in obj.items()})


def fit_decile_bins(training_records: Iterable[ClinicalRecord], min_count: int = MIN_BIN_COUNT) -> DecileBins:
    """Cut points at the 10%..90% empirical quantiles (linear interpolation) of each concept's values.

    Concepts with fewer than ``min_count`` numeric values stay unbinned.
    """
    values: dict[int, list[float]] = {}
    for r in training_records:
        if r.domain == Domain.MEASUREMENT and r.value is not None:
            values.setdefault(r.concept_id, []).append(r.value)
    qs = np.arange(1, 10) / 10.0
    return DecileBins({cid: np.quantile(np.asarray(v), qs) for cid, v in sorted(values.items()) if len(v) >= min_count})


def bin_measurement(bins: DecileBins, concept_id: int, value: float) -> int:
    """Number of cut points strictly below ``value`` (0-9)."""
    try:
        cuts = bins.cuts[concept_id]
    except KeyError:
        raise NotBinned(f"concept {concept_id} has no fitted bins") from None
    return int(min(9, max(0, np.searchsorted(cuts, value, side="left"))))


def dedup_hourly_measurements(records: Sequence[ClinicalRecord]) -> list[ClinicalRecord]:
    """Keep the earliest measurement per (patient, concept, clock hour); other domains pass through."""
    order = sorted(range(len(records)), key=lambda i: records[i].timestamp)
    seen = set()
    keep = np.ones(len(records), dtype=bool)
    for i in order:
        r = records[i]
        if r.domain != Domain.MEASUREMENT:
            continue
        key = (r.patient_id, r.concept_id, r.timestamp.replace(minute=0, second=0, microsecond=0))
        if key in seen:
            keep[i] = False
        else:
            seen.add(key)
    return [r for r, k in zip(records, keep) if k]


# -- trajectories ------------------------------------------------------------

@dataclass
class PatientTrajectory:
    concept: np.ndarray
    age: np.ndarray
    visit: np.ndarray
    record: np.ndarray
    domain: np.ndarray
    patient_id: str = ""
    labels: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for name in STREAMS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if len({len(getattr(self, s)) for s in STREAMS}) != 1:
            raise ValueError("trajectory streams must have equal length")

    def __len__(self) -> int:
        return len(self.concept)

    def streams(self) -> np.ndarray:
        return np.stack([getattr(self, s) for s in STREAMS])

    def unpadded_length(self) -> int:
        nonpad = np.flatnonzero(self.concept != PAD)
        return int(nonpad[-1]) + 1 if len(nonpad) else 0

    def slice(self, start: int, stop: int) -> "PatientTrajectory":
        return replace(self, **{s: getattr(self, s)[start:stop] for s in STREAMS}, labels=dict(self.labels))

    def equals(self, other: "PatientTrajectory") -> bool:
        return (
            self.patient_id == other.patient_id
            and self.labels == other.labels
            and np.array_equal(self.streams(), other.streams())
        )


def age_in_years(birth: Optional[date], when: datetime) -> int:
    if birth is None:
        return 0
    years = when.year - birth.year - ((when.month, when.day) < (birth.month, birth.day))
    return min(MAX_AGE, max(0, years))


def resolve_token(record: ClinicalRecord, catalog: ConceptCatalog, bins: Optional[DecileBins]) -> int:
    """Dense row for a record: decile variant when binned and present, else base concept, else [UNK]."""
    cid = record.concept_id
    if record.domain == Domain.MEASUREMENT and record.value is not None and bins is not None and cid in bins:
        row = catalog.get(cid, bin_measurement(bins, cid, record.value))
        if row is not None:
            return row
    row = catalog.get(cid)
    return UNK if row is None or catalog[row].is_special else row


def build_trajectory(
    records: Sequence[ClinicalRecord],
    catalog: ConceptCatalog,
    bins: Optional[DecileBins] = None,
    as_of: Optional[datetime] = None,
    birth_date: Optional[date] = None,
    patient_id: Optional[str] = None,
    labels: Optional[Mapping[str, int]] = None,
) -> PatientTrajectory:
    """[CLS], then each visit's concepts in time order closed by [SEP].

    Records at or after ``as_of`` are ignored. Visits keep the order of their
    first record; the record index is 1 + days since the visit's first record.
    """
    for prev, cur in zip(records, records[1:]):
        if cur.timestamp < prev.timestamp:
            raise OrderError(f"records out of time order at {cur.timestamp.isoformat()}")
    if as_of is not None:
        records = [r for r in records if r.timestamp < as_of]
    visits: dict[str, list[ClinicalRecord]] = {}
    for r in records:
        visits.setdefault(r.visit_id, []).append(r)
    concept, age, visit, rec, dom = [CLS], [0], [1], [1], [0]
    for vi, visit_records in enumerate(visits.values(), start=1):
        start = visit_records[0].timestamp.date()
        for r in visit_records:
            row = resolve_token(r, catalog, bins)
            concept.append(row)
            age.append(age_in_years(birth_date, r.timestamp))
            visit.append(vi)
            rec.append(min(MAX_RECORD_INDEX, (r.timestamp.date() - start).days + 1))
            dom.append(int(catalog.domains[row]))
        concept.append(SEP)
        age.append(age[-1])
        visit.append(vi)
        rec.append(rec[-1])
        dom.append(int(Domain.SPECIAL))
    pid = patient_id if patient_id is not None else (records[0].patient_id if records else "")
    return PatientTrajectory(concept, age, visit, rec, dom, pid, dict(labels or {}))


def truncate_trajectory(full: PatientTrajectory, n_records: int) -> PatientTrajectory:
    """What :func:`build_trajectory` returns for only the first ``n_records`` records.

    Valid when each visit's records are contiguous in time order, so that the
    token order of the full trajectory follows the record order.
    """
    if n_records == 0:
        return full.slice(0, 1)
    record_pos = np.flatnonzero(full.concept != SEP)[1:]
    end = int(record_pos[n_records - 1]) + 1
    if end < len(full) and full.concept[end] == SEP:
        return full.slice(0, end + 1)
    head = full.slice(0, end)
    return PatientTrajectory(
        np.append(head.concept, SEP),
        np.append(head.age, head.age[-1]),
        np.append(head.visit, head.visit[-1]),
        np.append(head.record, head.record[-1]),
        np.append(head.domain, int(Domain.SPECIAL)),
        full.patient_id,
        dict(full.labels),
    )


def slice_trajectory(t: PatientTrajectory, max_len: int = MAX_LEN) -> list[PatientTrajectory]:
    """Split into non-overlapping chunks of at most ``max_len``, each starting with [CLS].

    Only the final chunk (the one ending at the prediction time) keeps the labels.
    """
    length = t.unpadded_length()
    t = t.slice(0, length)
    if length <= max_len:
        return [t]
    body = max_len - 1
    chunks = []
    for start in range(1, length, body):
        part = t.slice(start, min(start + body, length))
        if start == 1:
            head = t.slice(0, 1)
        else:
            head = PatientTrajectory([CLS], part.age[:1], part.visit[:1], part.record[:1], [0], t.patient_id)
        chunk = PatientTrajectory(
            *(np.concatenate([getattr(head, s), getattr(part, s)]) for s in STREAMS),
            patient_id=t.patient_id,
            labels={},
        )
        chunks.append(chunk)
    chunks[-1].labels = dict(t.labels)
    return chunks


def pad_trajectory(t: PatientTrajectory, max_len: int = MAX_LEN) -> PatientTrajectory:
    """Extend every stream to ``max_len`` with [PAD] / zero fill."""
    if len(t) > max_len:
        raise TooLong(f"trajectory of length {len(t)} exceeds {max_len}")
    if len(t) == 0:
        t = PatientTrajectory([CLS], [0], [1], [1], [0], t.patient_id, dict(t.labels))
    fill = max_len - len(t)
    return replace(
        t,
        **{s: np.concatenate([getattr(t, s), np.full(fill, PAD if s == "concept" else 0, dtype=np.int64)]) for s in STREAMS},
        labels=dict(t.labels),
    )


# -- MTRJ dataset container --------------------------------------------------

MTRJ_MAGIC = b"MTRJ"
MTRJ_VERSION = 1
_MTRJ_HEADER = "<IQI"


def save_trajectories(path, trajectories: Sequence[PatientTrajectory], max_len: int = MAX_LEN, meta: Optional[dict] = None) -> None:
    """Write an ``MTRJ`` dataset; streams are stored unpadded (length-prefixed)."""
    with open(path, "wb") as f:
        f.write(MTRJ_MAGIC)
        f.write(struct.pack(_MTRJ_HEADER, MTRJ_VERSION, len(trajectories), max_len))
        for t in trajectories:
            n = t.unpadded_length()
            if n > max_len:
                raise TooLong(f"trajectory of length {n} exceeds {max_len}")
            f.write(struct.pack("<I", n))
            f.write(np.ascontiguousarray(t.streams()[:, :n], dtype="<u4").tobytes())
            pid = t.patient_id.encode("utf-8")
            f.write(struct.pack("<H", len(pid)))
            f.write(pid)
            f.write(struct.pack("<B", len(t.labels)))
            for task in sorted(t.labels):
                name = task.encode("utf-8")
                f.write(struct.pack("<B", len(name)))
                f.write(name)
                f.write(struct.pack("<b", int(t.labels[task])))
        write_trailer(f, meta)


def load_trajectories(path) -> tuple[list[PatientTrajectory], dict]:
    reader = read_file(path)
    expect_magic(reader, MTRJ_MAGIC)
    version, count, max_len = reader.unpack(_MTRJ_HEADER)
    if version != MTRJ_VERSION:
        raise ContainerError(f"{path}: unsupported MTRJ version {version}")
    out = []
    for _ in range(count):
        (n,) = reader.unpack("<I")
        if n > max_len:
            raise ContainerError(f"{path}: trajectory longer than declared max_len")
        streams = reader.array("<u4", 5 * n).reshape(5, n).astype(np.int64)
        (plen,) = reader.unpack("<H")
        pid = reader.take(plen).decode("utf-8")
        (nlab,) = reader.unpack("<B")
        labels = {}
        for _ in range(nlab):
            (tlen,) = reader.unpack("<B")
            task = reader.take(tlen).decode("utf-8")
            (labels[task],) = reader.unpack("<b")
        out.append(PatientTrajectory(*streams, patient_id=pid, labels=labels))
    meta, _ = read_trailer(reader)
    meta.setdefault("max_len", max_len)
    return out, meta
