from __future__ import annotations

import numpy as np
import pytest

from helpers import SAMPLE_SMILES, permute_molecule
from odorpair.featurize import (
    ATOM_FEATURES,
    ATOM_SCHEMA,
    BOND_FEATURES,
    MolGraph,
    WidthMismatch,
    featurize,
    pair_graph,
    read_schema,
    schema_dict,
    write_schema,
)
from odorpair.smiles import Molecule, parse_smiles


def _block(row, name):
    for block, offset, width in ATOM_SCHEMA:
        if block == name:
            return row[offset : offset + width]
    raise KeyError(name)


def test_methane_features():
    g = featurize(parse_smiles("C"))
    assert g.node_features.shape == (1, ATOM_FEATURES)
    assert _block(g.node_features[0], "degree")[0] == 1.0
    assert _block(g.node_features[0], "aromatic")[0] == 0.0
    assert g.n_edges == 0


def test_benzene_rows_identical():
    g = featurize(parse_smiles("c1ccccc1"))
    assert (g.node_features == g.node_features[0]).all()
    assert g.n_edges == 12
    assert (g.edge_features[:, 3] == 1).all()  # aromatic order column
    assert (g.edge_features[:, 4] == 1).all()  # in ring


def test_ethanol_degrees_and_bonds():
    g = featurize(parse_smiles("CCO"))
    degrees = [int(np.argmax(_block(r, "degree"))) for r in g.node_features]
    assert degrees == [1, 2, 1]
    assert (g.edge_features[:, 0] == 1).all()
    assert g.edge_features[:, 1:].sum() == 0


def test_every_row_has_one_hot_blocks():
    for smi in SAMPLE_SMILES:
        g = featurize(parse_smiles(smi))
        for name in ("element", "degree", "formal_charge", "hydrogens"):
            assert all(_block(r, name).sum() == 1 for r in g.node_features), (smi, name)
        assert (g.edge_features[:, :4].sum(axis=1) == 1).all()
        assert g.edge_features.shape == (g.n_edges, BOND_FEATURES)


def test_directed_edges_pair_up():
    g = featurize(parse_smiles("CC(=O)OCC"))
    src, dst = g.edge_index
    assert (src[0::2] == dst[1::2]).all() and (dst[0::2] == src[1::2]).all()
    assert (g.edge_features[0::2] == g.edge_features[1::2]).all()


def test_pair_of_methanes():
    m = featurize(parse_smiles("C"))
    p = pair_graph(m, m)
    assert p.n_nodes == 2 and p.n_edges == 0
    assert p.component_ids.tolist() == [0, 1]


def test_pair_benzene_ethanol():
    p = pair_graph(featurize(parse_smiles("c1ccccc1")), featurize(parse_smiles("CCO")))
    assert p.n_nodes == 9
    assert p.n_edges == 16
    comp = p.component_ids
    assert (comp[p.edge_index[0]] == comp[p.edge_index[1]]).all()


def test_pair_rejects_empty_and_mismatch():
    with pytest.raises(ValueError):
        Molecule((), ())
    g = featurize(parse_smiles("CC"))
    empty = MolGraph(np.zeros((0, ATOM_FEATURES)), np.zeros((2, 0), dtype=np.int64), np.zeros((0, BOND_FEATURES)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        pair_graph(g, empty)
    narrow = MolGraph(g.node_features[:, :5], g.edge_index, g.edge_features, g.component_ids)
    with pytest.raises(WidthMismatch):
        pair_graph(g, narrow)


@pytest.mark.parametrize("smi", SAMPLE_SMILES)
def test_permutation_equivariance(smi):
    mol = parse_smiles(smi)
    rng = np.random.default_rng(len(smi))
    perm = rng.permutation(mol.n_atoms)
    g = featurize(mol)
    h = featurize(permute_molecule(mol, perm))
    assert np.array_equal(h.node_features, g.node_features[perm])
    # the same graph relabeled via MolGraph.permute has the same edge multiset
    moved = g.permute(perm)
    ours = sorted(zip(map(tuple, h.edge_index.T), map(tuple, h.edge_features)))
    theirs = sorted(zip(map(tuple, moved.edge_index.T), map(tuple, moved.edge_features)))
    assert ours == theirs


def test_schema_round_trip(tmp_path):
    path = tmp_path / "schema.json"
    write_schema(path)
    assert read_schema(path) == schema_dict()
    blocks = read_schema(path)["atom"]
    assert sum(b["width"] for b in blocks) == ATOM_FEATURES
    assert [b["offset"] for b in blocks] == list(np.cumsum([0] + [b["width"] for b in blocks[:-1]]))
