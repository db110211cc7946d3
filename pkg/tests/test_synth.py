from datetime import datetime

import numpy as np
import pytest

from medrep.evaluate import auroc, derive_labels
from medrep.synth import SynthSpec, apply_vocabulary_shift, generate_cohort, generate_vocabulary
from medrep.trajectory import ClinicalRecord
from medrep.vocab import NUM_SPECIALS, Domain

T0 = datetime(2020, 1, 1)


@pytest.fixture(scope="module")
def vocab():
    return generate_vocabulary(SynthSpec())


@pytest.fixture(scope="module")
def cohort(vocab):
    return generate_cohort(SynthSpec(), vocab)


def test_vocabulary_size(vocab):
    assert vocab.catalog.N == 4 * 50 + NUM_SPECIALS
    assert np.all(vocab.cluster[:NUM_SPECIALS] == -1)
    assert np.bincount(vocab.cluster[NUM_SPECIALS:]).tolist() == [50] * 4


def test_intra_cluster_edges_denser(vocab):
    edges = vocab.graph.edges
    same = vocab.cluster[edges[:, 0]] == vocab.cluster[edges[:, 1]]
    sizes = np.bincount(vocab.cluster[NUM_SPECIALS:])
    intra_pairs = int(np.sum(sizes * (sizes - 1) // 2))
    inter_pairs = int(sizes.sum() * (sizes.sum() - 1) // 2) - intra_pairs
    intra, inter = same.sum() / intra_pairs, (~same).sum() / inter_pairs
    assert intra > inter
    assert abs(intra - 0.3) < 0.05 and abs(inter - 0.01) < 0.005


def test_text_features_follow_clusters(vocab):
    T = vocab.text.values[NUM_SPECIALS:]
    T = T / np.linalg.norm(T, axis=1, keepdims=True)
    S = T @ T.T
    same = vocab.cluster[NUM_SPECIALS:, None] == vocab.cluster[None, NUM_SPECIALS:]
    assert S[same].mean() > S[~same].mean() + 0.3


def test_holdout_fraction_per_cell(vocab):
    for c in range(4):
        for d in (1, 2, 3, 4):
            cell = (vocab.cluster == c) & (vocab.catalog.domains == d)
            assert vocab.holdout[cell].sum() == round(0.2 * cell.sum())


def test_vocabulary_deterministic(vocab):
    again = generate_vocabulary(SynthSpec())
    assert again.catalog == vocab.catalog
    np.testing.assert_array_equal(again.graph.edges, vocab.graph.edges)
    np.testing.assert_array_equal(again.text.values, vocab.text.values)
    other = generate_vocabulary(SynthSpec(seed=1))
    assert not np.array_equal(other.graph.edges, vocab.graph.edges)


def test_mortality_incidence_target(cohort):
    labels = derive_labels(cohort.visits, "MT")
    rate = np.mean([l.label for l in labels])
    assert abs(rate - 0.0368) < 0.005


def test_cohort_uses_internal_codes_only(vocab, cohort):
    rows = {vocab.catalog.row(r.concept_id) for r in cohort.records}
    assert not any(vocab.holdout[r] for r in rows)


def test_cohort_records_consistent(cohort):
    spans = {v.visit_id: (v.admission, v.discharge) for v in cohort.visits}
    for r in cohort.records[:5000]:
        lo, hi = spans[r.visit_id]
        assert lo <= r.timestamp <= hi
        assert (r.value is not None) == (r.domain == Domain.MEASUREMENT)
    keys = [(r.patient_id, r.timestamp) for r in cohort.records]
    assert keys == sorted(keys)


def test_cohort_deterministic(vocab):
    spec = SynthSpec(num_patients=200)
    a = generate_cohort(spec, vocab)
    b = generate_cohort(spec, vocab)
    assert a.records == b.records and a.visits == b.visits


def test_no_signal_gives_chance_auroc(vocab):
    spec = SynthSpec(num_patients=3000, signal_strength=0.0)
    cohort = generate_cohort(spec, vocab)
    index = {f"p{p:04d}": p for p in range(spec.num_patients)}
    labels = derive_labels(cohort.visits, "LLOS")
    y = np.array([l.label for l in labels])
    risk = np.array([cohort.risk["LLOS"][index[l.patient_id]] for l in labels])
    assert abs(auroc(risk, y) - 0.5) < 0.03


def test_signal_makes_risk_predictive(cohort):
    labels = derive_labels(cohort.visits, "LLOS")
    y = np.array([l.label for l in labels])
    risk = np.array([cohort.risk["LLOS"][int(l.patient_id[1:])] for l in labels])
    assert auroc(risk, y) > 0.75


def test_shift_rate_on_many_records(vocab):
    rng = np.random.default_rng(0)
    internal = np.flatnonzero(~vocab.holdout & (vocab.cluster >= 0))
    rows = rng.choice(internal, 100_000)
    records = [
        ClinicalRecord("p", vocab.catalog[r].concept_id, vocab.catalog[r].domain, T0, None, "v")
        for r in rows
    ]
    shifted = apply_vocabulary_shift(records, vocab, 0.36, np.random.default_rng(1))
    changed = np.array([a.concept_id != b.concept_id for a, b in zip(records, shifted)])
    assert abs(changed.mean() - 0.36) < 0.01
    for a, b in zip(records[:2000], shifted[:2000]):
        ra, rb = vocab.catalog.row(a.concept_id), vocab.catalog.row(b.concept_id)
        if ra != rb:
            assert vocab.holdout[rb]
            assert vocab.cluster[ra] == vocab.cluster[rb]
            assert vocab.catalog.domains[ra] == vocab.catalog.domains[rb]
        assert (a.patient_id, a.timestamp, a.visit_id, a.value) == (b.patient_id, b.timestamp, b.visit_id, b.value)


def test_zero_shift_is_identity(vocab, cohort):
    records = cohort.records[:3000]
    assert apply_vocabulary_shift(records, vocab, 0.0, np.random.default_rng(0)) == records


def test_shift_without_siblings_keeps_record(vocab):
    spec = SynthSpec(holdout_fraction=0.0)
    v = generate_vocabulary(spec)
    records = [ClinicalRecord("p", v.catalog[10].concept_id, v.catalog[10].domain,
                              T0, None, "v")] * 20
    if records[0].domain == Domain.MEASUREMENT:
        records = [ClinicalRecord("p", r.concept_id, r.domain, r.timestamp, 1.0, "v") for r in records]
    assert apply_vocabulary_shift(records, v, 1.0, np.random.default_rng(0)) == records


@pytest.mark.parametrize("kwargs", [
    {"intra_edge_prob": 0.01, "inter_edge_prob": 0.3},
    {"shift_rate": 1.5},
    {"visits_per_patient": (3, 2)},
    {"incidence": {"XX": 0.1}},
])
def test_synthspec_validation(kwargs):
    with pytest.raises(ValueError):
        SynthSpec(**kwargs)
