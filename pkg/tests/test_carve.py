from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import exhaustive_best_usable, metagraph_from_edges, random_metagraph
from odorpair.carve import (
    CarveConfig,
    Carving,
    DimensionMismatch,
    NoCoverageFound,
    carvable_labels,
    carve_search,
    classify_edges,
    coverage_ok,
    edge_boundary_degree,
    kfold_carvings,
    kl_divergence,
    kl_score,
    random_partition,
)


def _assign(mg, names, sides):
    """Assignment array from a {alkane index: component} map."""
    out = np.zeros(mg.n_nodes, dtype=np.int64)
    for alkane, comp in sides.items():
        out[mg.molecules.index(names[alkane])] = comp
    return out


def _check_structure(mg, c: Carving):
    ea, eb = mg.endpoints()
    for k, edges in enumerate(c.usable_edges):
        assert (c.assignment[ea[edges]] == k).all() and (c.assignment[eb[edges]] == k).all()
    assert (c.assignment[ea[c.discarded]] != c.assignment[eb[c.discarded]]).all()
    assert sum(len(u) for u in c.usable_edges) + len(c.discarded) == mg.n_edges


def test_all_train_has_no_test_edges():
    mg, _ = random_metagraph(np.random.default_rng(0), 8, 12)
    c = classify_edges(mg, np.zeros(mg.n_nodes, dtype=np.int64))
    assert len(c.component_edges("test")) == 0 and len(c.discarded) == 0
    assert not coverage_ok(c)


def test_disconnected_cliques_split_cleanly():
    edges = list(itertools.combinations(range(3), 2)) + list(itertools.combinations(range(3, 6), 2))
    mg, names = metagraph_from_edges(6, edges, [["a"]] * len(edges))
    c = classify_edges(mg, _assign(mg, names, {i: int(i >= 3) for i in range(6)}))
    assert len(c.discarded) == 0
    assert edge_boundary_degree(c) == 0


def test_k4_two_two_split():
    edges = list(itertools.combinations(range(4), 2))
    mg, names = metagraph_from_edges(4, edges, [["a"]] * 6)
    c = classify_edges(mg, _assign(mg, names, {0: 0, 1: 0, 2: 1, 3: 1}))
    assert len(c.discarded) == 4
    _check_structure(mg, c)


def test_coverage_ok_cases():
    mg, names = metagraph_from_edges(4, [(0, 1), (2, 3)], [["a", "b"], ["a", "b"]])
    c = classify_edges(mg, _assign(mg, names, {0: 0, 1: 0, 2: 1, 3: 1}))
    assert coverage_ok(c)
    mg, names = metagraph_from_edges(4, [(0, 1), (2, 3), (1, 2)], [["a"], ["a"], ["b"]])
    c = classify_edges(mg, _assign(mg, names, {0: 0, 1: 0, 2: 1, 3: 1}))
    assert not coverage_ok(c)
    assert coverage_ok(c, ["a"])


def test_boundary_degree_examples():
    mg, names = metagraph_from_edges(3, [(0, 1), (1, 2)], [["a"], ["a"]])
    assert edge_boundary_degree(classify_edges(mg, np.zeros(3, dtype=np.int64))) == 0
    assert edge_boundary_degree(classify_edges(mg, _assign(mg, names, {0: 0, 1: 1, 2: 0}))) == 2


def test_boundary_degree_vs_edge_scan():
    rng = np.random.default_rng(5)
    for _ in range(20):
        mg, _ = random_metagraph(rng, 8, 14)
        assign = rng.integers(0, 2, mg.n_nodes)
        expected = sum(1 for e in mg.edges if assign[e.a] != assign[e.b])
        assert edge_boundary_degree(classify_edges(mg, assign)) == expected


def test_kl_divergence():
    assert kl_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert kl_divergence([1.0, 0.0], [0.5, 0.5], epsilon=1e-15) == pytest.approx(math.log(2), abs=1e-9)
    with pytest.raises(DimensionMismatch):
        kl_divergence([1.0], [0.5, 0.5])


@given(st.lists(st.floats(0, 10), min_size=3, max_size=3), st.lists(st.floats(0, 10), min_size=3, max_size=3))
@settings(max_examples=100, deadline=None)
def test_kl_nonnegative(p, q):
    assert kl_divergence(p, q) >= -1e-12


def test_kl_score_zero_for_identical_components():
    mg, names = metagraph_from_edges(4, [(0, 1), (2, 3)], [["a", "b"], ["a", "b"]])
    c = classify_edges(mg, _assign(mg, names, {0: 0, 1: 0, 2: 1, 3: 1}))
    assert kl_score(c, mg.label_matrix().sum(axis=0)) == pytest.approx(0.0, abs=1e-12)


def test_every_partition_covers_returns_first_draw():
    edges = list(itertools.combinations(range(6), 2))
    mg, _ = metagraph_from_edges(6, edges, [["a"]] * len(edges))
    cfg = CarveConfig(max_iterations=500, seed=1, first_valid=True, required_labels=[])
    c = carve_search(mg, cfg)
    assert c.iterations_used == 1
    _check_structure(mg, c)


def test_impossible_coverage_raises():
    mg, _ = metagraph_from_edges(4, [(0, 1), (2, 3)], [["a", "rare"], ["a"]])
    with pytest.raises(NoCoverageFound) as info:
        carve_search(mg, CarveConfig(max_iterations=200, seed=0))
    assert "rare" in info.value.deficits
    assert 0 in info.value.deficits["rare"]


def test_search_beats_random_median():
    rng = np.random.default_rng(11)
    mg, _ = random_metagraph(rng, 10, 25)
    cfg = CarveConfig(max_iterations=2000, seed=3)
    best = carve_search(mg, cfg)
    fresh = []
    draw_rng = np.random.default_rng(99)
    while len(fresh) < 1000:
        c = random_partition(mg, 0.5, draw_rng)
        if coverage_ok(c):
            fresh.append(c.usable_count)
    assert best.usable_count >= np.median(fresh)
    _check_structure(mg, best)


def test_small_graphs_match_exhaustive_optimum():
    rng = np.random.default_rng(2024)
    for _ in range(8):
        n = int(rng.integers(5, 9))
        mg, _ = random_metagraph(rng, n, int(rng.integers(n, 2 * n)))
        target = exhaustive_best_usable(mg, mg.vocab.notes)
        cfg = CarveConfig(max_iterations=(2**n) * 10, seed=int(rng.integers(1000)))
        if target is None:
            with pytest.raises(NoCoverageFound):
                carve_search(mg, cfg)
        else:
            assert carve_search(mg, cfg).usable_count == target


def test_kl_objective_returns_valid_carving():
    mg, _ = random_metagraph(np.random.default_rng(8), 10, 25)
    c = carve_search(mg, CarveConfig(max_iterations=500, objective="kl_score"))
    assert coverage_ok(c)
    _check_structure(mg, c)


def test_search_is_deterministic():
    mg, _ = random_metagraph(np.random.default_rng(4), 10, 22)
    cfg = CarveConfig(max_iterations=300, seed=9)
    a, b = carve_search(mg, cfg), carve_search(mg, cfg)
    assert np.array_equal(a.assignment, b.assignment)
    assert a.to_dict(mg) == b.to_dict(mg)


def test_carving_round_trip(tmp_path):
    mg, _ = random_metagraph(np.random.default_rng(4), 10, 22)
    c = carve_search(mg, CarveConfig(max_iterations=300, seed=9))
    c.save(tmp_path / "c.json", mg)
    back = Carving.load(tmp_path / "c.json", mg)
    assert np.array_equal(back.assignment, c.assignment)
    assert back.to_dict(mg) == c.to_dict(mg)


def test_carvable_labels():
    # "two" sits on two node-disjoint edges, "one" on a single edge
    mg, _ = metagraph_from_edges(6, [(0, 1), (2, 3), (4, 5)], [["two", "one"], ["two"], ["x"]])
    for seed in range(5):
        found = carvable_labels(mg, CarveConfig(max_iterations=300, seed=seed))
        assert "two" in found.best and "two" in found.union
        assert "one" not in found.union
    empty, _ = metagraph_from_edges(0, [], [])
    assert carvable_labels(empty, CarveConfig()).best == frozenset()


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_separation_and_conservation(seed):
    rng = np.random.default_rng(seed)
    mg, _ = random_metagraph(rng, 9, 16)
    for ratios in (0.5, (0.5, 0.25, 0.25)):
        _check_structure(mg, random_partition(mg, ratios, rng))


def test_kfold_five_folds():
    mg, _ = random_metagraph(np.random.default_rng(21), 14, 40)
    folds = kfold_carvings(mg, 5, max_iterations=300, seed=100)
    assert len(folds) == 5
    assert [f.seed for f in folds] == [100, 101, 102, 103, 104]
    for f in folds:
        assert f.components == ("train", "valid", "test")
        _check_structure(mg, f)
        assert coverage_ok(f, f.required_labels)


def test_kfold_node_shares():
    rng = np.random.default_rng(0)
    n = 1000
    a = rng.integers(0, n, 3000)
    b = rng.integers(0, n, 3000)
    keep = a != b
    edges = sorted({(int(min(x, y)), int(max(x, y))) for x, y in zip(a[keep], b[keep])})
    labels = [["a", "b", "c"][k % 3 : k % 3 + 1] for k in range(len(edges))]
    mg, _ = metagraph_from_edges(n, edges, labels)
    assert mg.n_nodes > 950
    for fold in kfold_carvings(mg, 3, (0.5, 0.25, 0.25), max_iterations=20, seed=0):
        shares = np.bincount(fold.assignment, minlength=3) / mg.n_nodes
        assert np.all(np.abs(shares - [0.5, 0.25, 0.25]) <= 0.10)


def test_kfold_label_sets_may_differ():
    rng = np.random.default_rng(6)
    mg, _ = random_metagraph(rng, 12, 20, label_names=("a", "b", "c", "d", "e"))
    folds = kfold_carvings(mg, 4, max_iterations=50, seed=0)
    for f in folds:
        assert set(f.required_labels) <= set(mg.vocab.notes)
        assert coverage_ok(f, f.required_labels)


def test_config_validation():
    with pytest.raises(ValueError):
        CarveConfig(train_fraction=1.5)
    with pytest.raises(ValueError):
        CarveConfig(objective="nope")
    with pytest.raises(ValueError):
        kfold_carvings(metagraph_from_edges(2, [(0, 1)], [["a"]])[0], k=1)
