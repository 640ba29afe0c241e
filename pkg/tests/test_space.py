import json

import numpy as np
import pytest
from scipy import stats

from brute import isomorphism_classes
from incnas.graph import CellGraph, canonical_hash, validate
from incnas.space import (
    NB101,
    NB301,
    NB301_OPS,
    Architecture,
    EdgeCell,
    EnumerationTooLarge,
    convert_edges_to_nodes,
    enumerate_space,
    load_spec,
    sample_uniform,
    validate_architecture,
    with_caps,
)

OPS = ("c1", "c3", "mp")


def full_edge_cell(op="sep_conv_3x3"):
    # intermediate k draws from the two nodes just before it
    return EdgeCell(4, [(s, k, op) for k in range(4) for s in (k, k + 1)])


def test_edge_cell_converts_to_fifteen_vertices():
    g = convert_edges_to_nodes(full_edge_cell())
    assert g.num_vertices == 2 + 8 + 4 + 1
    assert g.labels[:2] == ("in", "in1")
    assert g.labels.count("sum") == 4
    assert g.labels[-1] == "out"
    assert validate(g, NB301.graph_spec)


def test_converted_graph_wiring():
    cell = EdgeCell(4, [(0, 0, "skip_connect"), (1, 0, "max_pool_3x3"), (0, 1, "sep_conv_3x3"), (2, 1, "sep_conv_5x5"),
                        (1, 2, "dil_conv_3x3"), (3, 2, "dil_conv_5x5"), (4, 3, "avg_pool_3x3"), (0, 3, "skip_connect")])
    g = cell.graph
    sums = [v for v, lab in enumerate(g.labels) if lab == "sum"]
    out = g.num_vertices - 1
    assert all(out in g.successors[s] for s in sums)
    for v, lab in enumerate(g.labels):
        if lab in NB301_OPS:
            assert len(g.predecessors[v]) == 1 and len(g.successors[v]) == 1
            assert g.labels[g.successors[v][0]] == "sum"
    assert sum(len(g.predecessors[s]) for s in sums) == 8


def test_same_source_in_edges_rejected():
    edges = [(0, 0, "skip_connect"), (0, 0, "max_pool_3x3")] + [(s, k, "sep_conv_3x3") for k in range(1, 4) for s in (k, k + 1)]
    with pytest.raises(ValueError):
        EdgeCell(4, edges).check()


def test_forward_source_rejected():
    edges = [(2, 0, "skip_connect"), (0, 0, "max_pool_3x3")] + [(s, k, "sep_conv_3x3") for k in range(1, 4) for s in (k, k + 1)]
    with pytest.raises(ValueError):
        EdgeCell(4, edges).check()


def test_conversion_is_deterministic():
    assert convert_edges_to_nodes(full_edge_cell()) == convert_edges_to_nodes(full_edge_cell())


def test_sampler_two_vertex_space():
    spec = with_caps(NB101, max_vertices=2)
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = sample_uniform(spec, rng).cells[0]
        assert g == CellGraph(2, [(0, 1)], ["in", "out"])


def test_sampler_is_reproducible():
    a = [sample_uniform(NB101, np.random.default_rng(11)).to_text() for _ in range(3)]
    assert len(set(a)) == 1
    b = [sample_uniform(NB301, np.random.default_rng(11)).to_text() for _ in range(2)]
    assert b[0] == b[1]


def test_samples_are_valid():
    rng = np.random.default_rng(3)
    for spec in (NB101, NB301):
        for _ in range(300):
            arch = sample_uniform(spec, rng)
            assert validate_architecture(arch, spec)
            assert len(arch.cells) == spec.cells_per_architecture


def test_nb301_sampler_covers_all_sources_and_ops():
    rng = np.random.default_rng(5)
    seen_ops, seen_src = set(), set()
    for _ in range(300):
        for cell in sample_uniform(NB301, rng).cells:
            for s, d, op in cell.op_edges:
                seen_ops.add(op)
                seen_src.add((s, d))
    assert seen_ops == set(NB301_OPS)
    assert seen_src == {(s, d) for d in range(4) for s in range(2 + d)}


def test_vertex_counts_quasi_uniform():
    rng = np.random.default_rng(2024)
    counts = np.bincount([sample_uniform(NB101, rng).cells[0].num_vertices for _ in range(10_000)], minlength=8)[2:]
    assert stats.chisquare(counts).pvalue > 0.01


def test_micro_space_has_seven_graphs():
    spec = with_caps(NB101, max_vertices=3, max_edges=3)
    archs = list(enumerate_space(spec))
    assert len(archs) == 7
    assert len(archs) == len(isomorphism_classes(3, 3, OPS))


def test_two_vertex_space_has_one_graph():
    assert len(list(enumerate_space(with_caps(NB101, max_vertices=2)))) == 1


def test_enumeration_matches_independent_counts():
    for v, e in ((4, 9), (5, 6)):
        spec = with_caps(NB101, max_vertices=v, max_edges=e)
        archs = list(enumerate_space(spec))
        digests = [a.digest for a in archs]
        assert len(set(digests)) == len(digests)
        assert all(validate_architecture(a, spec) for a in archs)
        assert len(archs) == len(isomorphism_classes(v, e, OPS))


def test_enumeration_guard():
    with pytest.raises(EnumerationTooLarge):
        next(iter(enumerate_space(NB101, max_candidates=1000)))
    with pytest.raises(ValueError):
        next(iter(enumerate_space(NB301)))


def test_architecture_text_round_trip():
    rng = np.random.default_rng(1)
    for spec in (NB101, NB301):
        arch = sample_uniform(spec, rng)
        back = Architecture.from_text(arch.to_text())
        assert back.digest == arch.digest
        assert back.to_text() == arch.to_text()


def test_two_cell_digest_depends_on_cell_order():
    rng = np.random.default_rng(9)
    a = sample_uniform(NB301, rng)
    swapped = Architecture(a.cells[::-1])
    if canonical_hash(a.graphs[0]) != canonical_hash(a.graphs[1]):
        assert swapped.digest != a.digest


def test_load_spec_from_json(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({"max_vertices": 4, "max_edges": 5, "op_labels": ["c1", "c3"]}))
    spec = load_spec(path)
    assert spec.max_vertices == 4 and spec.op_labels == ("c1", "c3")
    assert load_spec("nb101") is NB101
    path.write_text(json.dumps({"max_vertices": 4, "max_edges": 5, "op_labels": ["c1"], "bogus": 1}))
    with pytest.raises(ValueError):
        load_spec(path)


def test_spec_invariants():
    with pytest.raises(ValueError):
        with_caps(NB101, max_vertices=1)
    with pytest.raises(ValueError):
        with_caps(NB101, op_labels=())
    with pytest.raises(ValueError):
        with_caps(NB301, num_intermediate=None)
