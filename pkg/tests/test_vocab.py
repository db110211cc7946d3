import numpy as np
import pytest
from hypothesis import given, strategies as st

from medrep.errors import BadDomain, DuplicateConcept, IoError, ParseError, UnknownConcept
from medrep.vocab import (
    CLS,
    NUM_SPECIALS,
    PAD,
    SEP,
    UNK,
    Concept,
    ConceptCatalog,
    Domain,
    RelationGraph,
    catalog_bytes,
    expand_measurement_deciles,
    format_key,
    load_catalog,
    load_graph,
    parse_key,
    save_catalog,
    save_graph,
    special_concepts,
)

from conftest import write_tsv

HEADER = ("concept_id", "name", "domain")
EDGE_HEADER = ("concept_id_1", "concept_id_2")


def small_catalog(tmp_path):
    rows = [(100, "Neutropenic fever", "condition"), (200, "Aspirin 81 MG", "drug"),
            (300, "Hemoglobin", "measurement"), (400, "Chest X-ray", "procedure")]
    return load_catalog(write_tsv(tmp_path / "c.tsv", HEADER, rows))


def test_specials_injected(tmp_path):
    cat = load_catalog(write_tsv(tmp_path / "c.tsv", HEADER, [(100, "Neutropenic fever", "condition")]))
    assert cat.N == 5
    assert [c.name for c in cat][:4] == ["[PAD]", "[CLS]", "[SEP]", "[UNK]"]
    assert (PAD, CLS, SEP, UNK) == (0, 1, 2, 3)
    assert cat.row(100) == 4
    assert cat[4].domain == Domain.CONDITION


def test_explicit_specials_accepted_once(tmp_path):
    rows = [(0, "[PAD]", "special"), (100, "x", "drug")]
    assert load_catalog(write_tsv(tmp_path / "c.tsv", HEADER, rows)).N == 5
    with pytest.raises(DuplicateConcept):
        load_catalog(write_tsv(tmp_path / "d.tsv", HEADER, rows + [(0, "[PAD]", "special")]))


def test_duplicate_concept(tmp_path):
    rows = [(100, "a", "condition"), (100, "b", "drug")]
    with pytest.raises(DuplicateConcept):
        load_catalog(write_tsv(tmp_path / "c.tsv", HEADER, rows))


def test_bad_domain_and_io(tmp_path):
    with pytest.raises(BadDomain):
        load_catalog(write_tsv(tmp_path / "c.tsv", HEADER, [(100, "a", "device")]))
    with pytest.raises(IoError):
        load_catalog(tmp_path / "missing.tsv")
    with pytest.raises(ParseError):
        load_catalog(write_tsv(tmp_path / "h.tsv", ("id", "name", "domain"), []))


def test_large_catalog_count(tmp_path):
    n = 26_894
    rows = [(10_000 + i, f"c{i}", "condition") for i in range(n)]
    path = write_tsv(tmp_path / "c.tsv", HEADER, rows)
    lines = path.read_text().count("\n") - 1
    assert load_catalog(path).N == lines + NUM_SPECIALS == 26_898


def test_round_trip_bytes(tmp_path):
    cat = small_catalog(tmp_path)
    save_catalog(cat, tmp_path / "out.tsv")
    again = load_catalog(tmp_path / "out.tsv")
    assert again == cat
    save_catalog(again, tmp_path / "out2.tsv")
    assert (tmp_path / "out.tsv").read_bytes() == (tmp_path / "out2.tsv").read_bytes()


def test_names_with_tabs_round_trip(tmp_path):
    cat = ConceptCatalog(special_concepts() + [Concept(7, "a\tb\\c\nd", Domain.DRUG)])
    save_catalog(cat, tmp_path / "c.tsv")
    assert load_catalog(tmp_path / "c.tsv")[4].name == "a\tb\\c\nd"


def test_decile_expansion(tmp_path):
    cat = small_catalog(tmp_path)
    out = expand_measurement_deciles(cat, {300})
    assert out.N == cat.N + 9
    rows = out.rows_for(300)
    assert [out[r].decile for r in rows] == list(range(10))
    assert out[rows[0]].name == "Hemoglobin (0th decile)"
    assert out[rows[1]].name == "Hemoglobin (1st decile)"
    assert out[rows[2]].name == "Hemoglobin (2nd decile)"
    assert out[rows[3]].name == "Hemoglobin (3rd decile)"
    assert out[rows[9]].name == "Hemoglobin (9th decile)"
    # order kept: the variants sit where the base row was
    assert [c.concept_id for c in out] == [0, 1, 2, 3, 100, 200] + [300] * 10 + [400]
    assert expand_measurement_deciles(cat, set()) is cat
    with pytest.raises(UnknownConcept):
        expand_measurement_deciles(cat, {999})
    with pytest.raises(BadDomain):
        expand_measurement_deciles(cat, {100})


def test_decile_keys_round_trip(tmp_path):
    cat = expand_measurement_deciles(small_catalog(tmp_path), {300})
    save_catalog(cat, tmp_path / "e.tsv")
    assert load_catalog(tmp_path / "e.tsv") == cat
    assert "300_9\tHemoglobin (9th decile)\tmeasurement" in catalog_bytes(cat).decode()


def test_decile_requires_measurement():
    with pytest.raises(BadDomain):
        Concept(5, "x", Domain.DRUG, decile=2)
    with pytest.raises(ValueError):
        Concept(5, "x", Domain.MEASUREMENT, decile=10)


@given(st.integers(0, 10**12), st.one_of(st.none(), st.integers(0, 9)))
def test_key_text_round_trip(cid, dec):
    assert parse_key(format_key(cid, dec)) == (cid, dec)


def test_graph_dedup_and_self_loops(tmp_path):
    cat = small_catalog(tmp_path)
    path = write_tsv(tmp_path / "e.tsv", EDGE_HEADER, [(100, 200), (200, 100), (100, 100)])
    g = load_graph(path, cat)
    assert g.edges.tolist() == [[4, 5]]


def test_graph_empty_and_chain(tmp_path):
    cat = small_catalog(tmp_path)
    g = load_graph(write_tsv(tmp_path / "e.tsv", EDGE_HEADER, []), cat)
    assert g.num_nodes == cat.N and g.num_edges == 0
    g = load_graph(write_tsv(tmp_path / "f.tsv", EDGE_HEADER, [(100, 200), (200, 300)]), cat)
    assert sorted(g.neighbors(cat.row(200)).tolist()) == [cat.row(100), cat.row(300)]


def test_graph_errors(tmp_path):
    cat = small_catalog(tmp_path)
    with pytest.raises(UnknownConcept):
        load_graph(write_tsv(tmp_path / "e.tsv", EDGE_HEADER, [(100, 999)]), cat)
    with pytest.raises(ParseError):
        load_graph(write_tsv(tmp_path / "f.tsv", EDGE_HEADER, [(100, "x")]), cat)


def test_decile_variants_inherit_edges(tmp_path):
    cat = expand_measurement_deciles(small_catalog(tmp_path), {300})
    g = load_graph(write_tsv(tmp_path / "e.tsv", EDGE_HEADER, [(100, 300)]), cat)
    assert g.num_edges == 10
    for r in cat.rows_for(300):
        assert g.neighbors(r).tolist() == [cat.row(100)]
    save_graph(g, cat, tmp_path / "out.tsv")
    assert (tmp_path / "out.tsv").read_text() == "concept_id_1\tconcept_id_2\n100\t300\n"


@given(st.integers(1, 30).flatmap(lambda n: st.tuples(
    st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=80))))
def test_graph_invariants(case):
    n, pairs = case
    g = RelationGraph.from_pairs(n, pairs)
    A = g.adjacency.toarray()
    assert np.all(np.diag(A) == 0)
    assert np.array_equal(A, A.T)
    assert set(A.ravel().tolist()) <= {0.0, 1.0}
    assert np.all(g.edges[:, 0] < g.edges[:, 1])
    expected = {tuple(sorted(p)) for p in pairs if p[0] != p[1]}
    assert {tuple(e) for e in g.edges.tolist()} == expected
    for i in range(n):
        nb = g.neighbors(i)
        assert np.all(np.diff(nb) > 0)
        for j in nb:
            assert i in g.neighbors(j)
