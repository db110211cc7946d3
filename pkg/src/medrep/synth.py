"""Deterministic synthetic vocabularies, ontologies, cohorts and vocabulary shift.

Concepts fall into clusters that share description tokens (so their stub
text representations correlate) and are densely linked in the ontology. A
fixed fraction of every (cluster, domain) cell is reserved as external-only
codes: internal cohorts never use them, and :func:`apply_vocabulary_shift`
swaps them in to mimic another institution coding the same facts under
different concept ids.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .descriptions import RepresentationMatrix, text_representations
from .trajectory import ClinicalRecord, Visit
from .vocab import CLINICAL_DOMAINS, NUM_SPECIALS, Concept, ConceptCatalog, Domain, RelationGraph, special_concepts

log = logging.getLogger(__name__)

CONCEPT_ID_BASE = 10_000
TASKS = ("MT", "LLOS", "RA")
# spawn-key streams shared by all cohorts of one SynthSpec
VOCAB_STREAM, OUTCOME_STREAM, VALUE_STREAM = 0, 98, 99


@dataclass
class SynthSpec:
    num_clusters: int = 4
    concepts_per_cluster: int = 50
    intra_edge_prob: float = 0.3
    inter_edge_prob: float = 0.01
    num_patients: int = 5000
    visits_per_patient: tuple[int, int] = (2, 5)
    records_per_visit: tuple[int, int] = (4, 12)
    signal_strength: float = 2.0
    shift_rate: float = 0.36
    seed: int = 0
    h: int = 32
    holdout_fraction: float = 0.2
    core_tokens: int = 12
    noise_tokens: int = 6
    cluster_concentration: float = 0.5
    incidence: dict[str, float] = field(default_factory=lambda: {"MT": 0.0368, "LLOS": 0.309, "RA": 0.0211})
    repeat_measurement_prob: float = 0.3

    def __post_init__(self):
        self.visits_per_patient = tuple(int(v) for v in self.visits_per_patient)
        self.records_per_visit = tuple(int(v) for v in self.records_per_visit)
        if not self.intra_edge_prob > self.inter_edge_prob:
            raise ValueError("intra_edge_prob must exceed inter_edge_prob")
        if not 0.0 <= self.shift_rate <= 1.0:
            raise ValueError("shift_rate must lie in [0, 1]")
        if self.num_clusters < 1 or self.concepts_per_cluster < 1 or self.h <= 0:
            raise ValueError("cluster counts and h must be positive")
        if not 1 <= self.visits_per_patient[0] <= self.visits_per_patient[1]:
            raise ValueError("visits_per_patient must be an ordered positive range")
        if not 1 <= self.records_per_visit[0] <= self.records_per_visit[1]:
            raise ValueError("records_per_visit must be an ordered positive range")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        unknown = set(self.incidence) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown incidence task(s) {sorted(unknown)}")
        for task, rate in self.incidence.items():
            if not 0.0 < rate < 1.0:
                raise ValueError(f"incidence for {task} must lie in (0, 1)")


def _rng(spec: SynthSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(stream,)))


@dataclass
class SynthVocabulary:
    catalog: ConceptCatalog
    graph: RelationGraph
    text: RepresentationMatrix
    cluster: np.ndarray  # per dense row, -1 for specials
    holdout: np.ndarray  # per dense row, True for external-only codes
    descriptions: dict[str, str]

    def pool(self, cluster: int, internal: bool = True) -> np.ndarray:
        mask = self.cluster == cluster
        mask &= ~self.holdout if internal else self.holdout
        return np.flatnonzero(mask)


def generate_vocabulary(spec: SynthSpec) -> SynthVocabulary:
    rng = _rng(spec, VOCAB_STREAM)
    C, K = spec.num_clusters, spec.concepts_per_cluster
    concepts = special_concepts()
    descriptions = {}
    cluster = [-1] * NUM_SPECIALS
    for c in range(C):
        core = [f"k{c}w{t}" for t in range(spec.core_tokens)]
        for j in range(K):
            idx = c * K + j
            cid = CONCEPT_ID_BASE + idx
            domain = CLINICAL_DOMAINS[j % len(CLINICAL_DOMAINS)]
            concepts.append(Concept(cid, f"synthetic {domain.label} {idx}", domain))
            noise = [f"n{idx}w{t}" for t in range(spec.noise_tokens)]
            descriptions[str(cid)] = " ".join(rng.permutation(core + noise).tolist())
            cluster.append(c)
    catalog = ConceptCatalog(concepts)
    cluster = np.array(cluster, dtype=np.int64)

    n = catalog.N
    iu, ju = np.triu_indices(n, k=1)
    regular = (iu >= NUM_SPECIALS) & (ju >= NUM_SPECIALS)
    iu, ju = iu[regular], ju[regular]
    prob = np.where(cluster[iu] == cluster[ju], spec.intra_edge_prob, spec.inter_edge_prob)
    keep = rng.random(len(iu)) < prob
    graph = RelationGraph.from_pairs(n, np.stack([iu[keep], ju[keep]], axis=1))

    holdout = np.zeros(n, dtype=bool)
    domains = catalog.domains
    for c in range(C):
        for d in CLINICAL_DOMAINS:
            cell = np.flatnonzero((cluster == c) & (domains == d))
            k = int(round(spec.holdout_fraction * len(cell)))
            if k:
                holdout[rng.choice(cell, size=k, replace=False)] = True

    text = text_representations(catalog, descriptions, spec.h, spec.seed)
    return SynthVocabulary(catalog, graph, text, cluster, holdout, descriptions)


@dataclass
class Cohort:
    records: list[ClinicalRecord]
    visits: list[Visit]
    # latent per-patient risk score per task (standardized), for oracle checks
    risk: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def _calibrate(target: float, z: np.ndarray, weight_fn, beta: float) -> float:
    """Intercept b with weighted mean incidence (as computed by ``weight_fn``) equal to ``target``."""
    lo, hi = -30.0, 30.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if weight_fn(expit(mid + beta * z)) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def outcome_weights(spec: SynthSpec) -> dict[str, np.ndarray]:
    """Standardized per-cluster risk weights per task, shared by every cohort generated from one SynthSpec."""
    rng = _rng(spec, OUTCOME_STREAM)
    weights = {}
    for task in TASKS:
        w = rng.normal(size=spec.num_clusters)
        weights[task] = (w - w.mean()) / (w.std() + 1e-12)
    return weights


def generate_cohort(
    spec: SynthSpec, vocab: SynthVocabulary, stream: int = 1, id_prefix: str = "p"
) -> Cohort:
    """Patients whose outcome log-odds rise with ``signal_strength`` times a latent
    score set by their cluster mix; their recorded concepts are drawn from the same mix."""
    rng = _rng(spec, stream)
    C = spec.num_clusters
    n_pat = spec.num_patients
    weights = outcome_weights(spec)
    mix = rng.dirichlet(np.full(C, spec.cluster_concentration), size=n_pat)
    risk = {}
    for task in TASKS:
        z = mix @ weights[task]
        risk[task] = (z - z.mean()) / (z.std() + 1e-12)
    lo, hi = spec.visits_per_patient
    planned = rng.integers(lo, hi + 1, size=n_pat)
    beta = spec.signal_strength

    def mt_rate(p):
        deaths = 1.0 - (1.0 - p) ** planned
        stays = np.where(p > 0, (1.0 - (1.0 - p) ** planned) / np.where(p > 0, p, 1.0), planned)
        return deaths.sum() / stays.sum()

    def visit_rate(p):
        return float(np.sum(p * planned) / planned.sum())

    b = {
        "MT": _calibrate(spec.incidence["MT"], risk["MT"], mt_rate, beta),
        "LLOS": _calibrate(spec.incidence["LLOS"], risk["LLOS"], visit_rate, beta),
        "RA": _calibrate(spec.incidence["RA"], risk["RA"], visit_rate, beta),
    }
    pools = [vocab.pool(c, internal=True) for c in range(C)]
    domains = vocab.catalog.domains
    concept_ids = np.array([c.concept_id for c in vocab.catalog], dtype=np.int64)
    value_mean = 20.0 + 60.0 * _rng(spec, VALUE_STREAM).random(vocab.catalog.N)

    records: list[ClinicalRecord] = []
    visits: list[Visit] = []
    epoch = datetime(2015, 1, 1)
    width = len(str(n_pat))
    for p in range(n_pat):
        pid = f"{id_prefix}{p:0{width}d}"
        admit = epoch + timedelta(minutes=int(rng.integers(0, 4 * 365 * 24 * 60)))
        birth = (admit - timedelta(days=int(rng.integers(20 * 365, 85 * 365)))).date()
        prob = {t: float(expit(b[t] + beta * risk[t][p])) for t in TASKS}
        v = 0
        while True:
            long_stay = rng.random() < prob["LLOS"]
            hours = int(rng.integers(7 * 24 + 1, 20 * 24 + 1)) if long_stay else int(rng.integers(6, 7 * 24 + 1))
            discharge = admit + timedelta(hours=hours)
            died = bool(rng.random() < prob["MT"])
            vid = f"{pid}-v{v + 1}"
            visits.append(Visit(pid, vid, admit, discharge, died, birth))
            n_rec = int(rng.integers(spec.records_per_visit[0], spec.records_per_visit[1] + 1))
            offsets = np.sort(rng.integers(0, hours * 60, size=n_rec))
            clusters = rng.choice(C, size=n_rec, p=mix[p])
            for off, c in zip(offsets, clusters):
                row = int(rng.choice(pools[c]))
                ts = admit + timedelta(minutes=int(off))
                dom = Domain(int(domains[row]))
                value = None
                if dom == Domain.MEASUREMENT:
                    value = round(float(rng.normal(value_mean[row], 10.0)), 1)
                records.append(ClinicalRecord(pid, int(concept_ids[row]), dom, ts, value, vid))
                if dom == Domain.MEASUREMENT and rng.random() < spec.repeat_measurement_prob:
                    again = ts + timedelta(minutes=int(rng.integers(1, 50)))
                    if again < discharge:
                        value2 = round(float(rng.normal(value_mean[row], 10.0)), 1)
                        records.append(ClinicalRecord(pid, int(concept_ids[row]), dom, again, value2, vid))
            v += 1
            if died:
                break
            readmit = rng.random() < prob["RA"]
            if not readmit and v >= planned[p]:
                break
            if v >= hi + 2:
                break
            gap = int(rng.integers(1, 31)) if readmit else int(rng.integers(31, 366))
            next_day = datetime.combine(discharge.date() + timedelta(days=gap), datetime.min.time())
            admit = next_day + timedelta(minutes=int(rng.integers(0, 24 * 60)))
    records.sort(key=lambda r: (r.patient_id, r.timestamp))
    return Cohort(records, visits, risk)


def apply_vocabulary_shift(
    records: Sequence[ClinicalRecord], vocab: SynthVocabulary, s: float, rng: np.random.Generator
) -> list[ClinicalRecord]:
    """With probability ``s`` recode each record to an external-only sibling of the same cluster and domain."""
    if not 0.0 <= s <= 1.0:
        raise ValueError("shift rate must lie in [0, 1]")
    catalog = vocab.catalog
    domains = catalog.domains
    siblings: dict[tuple[int, int], np.ndarray] = {}
    for c in np.unique(vocab.cluster[vocab.cluster >= 0]):
        for d in CLINICAL_DOMAINS:
            siblings[(int(c), int(d))] = np.flatnonzero((vocab.cluster == c) & (domains == d) & vocab.holdout)
    draws = rng.random(len(records))
    out = []
    missing = 0
    for r, u in zip(records, draws):
        if u >= s:
            out.append(r)
            continue
        row = catalog.get(r.concept_id)
        pool = siblings.get((int(vocab.cluster[row]), int(domains[row]))) if row is not None else None
        if pool is None or len(pool) == 0:
            missing += 1
            out.append(r)
            continue
        new = catalog[int(pool[rng.integers(len(pool))])]
        out.append(ClinicalRecord(r.patient_id, new.concept_id, r.domain, r.timestamp, r.value, r.visit_id))
    if missing:
        log.info("vocabulary shift: %d record(s) without external siblings left unchanged", missing)
    return out
