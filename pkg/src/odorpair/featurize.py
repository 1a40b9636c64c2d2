"""Numeric node/edge features for molecules and disjoint-union pair graphs.

The layout is fixed and described by :data:`ATOM_SCHEMA` / :data:`BOND_SCHEMA`;
``write_schema`` dumps both to JSON so downstream tools can decode rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .smiles import BondOrder, Molecule, implicit_hydrogens, ring_atoms, ring_bonds

__all__ = [
    "MolGraph",
    "WidthMismatch",
    "ATOM_SCHEMA",
    "BOND_SCHEMA",
    "ATOM_FEATURES",
    "BOND_FEATURES",
    "featurize",
    "pair_graph",
    "schema_dict",
    "write_schema",
    "read_schema",
]

ELEMENT_VOCAB = (5, 6, 7, 8, 15, 16, 9, 17, 35, 53)  # B C N O P S F Cl Br I
DEGREE_VOCAB = tuple(range(7))
CHARGE_VOCAB = (-2, -1, 0, 1, 2)
HCOUNT_VOCAB = tuple(range(5))
BOND_VOCAB = (BondOrder.SINGLE, BondOrder.DOUBLE, BondOrder.TRIPLE, BondOrder.AROMATIC)


def _blocks(spec: list[tuple[str, int]]) -> tuple[tuple[str, int, int], ...]:
    out, offset = [], 0
    for name, width in spec:
        out.append((name, offset, width))
        offset += width
    return tuple(out)


ATOM_SCHEMA = _blocks(
    [
        ("element", len(ELEMENT_VOCAB) + 1),
        ("degree", len(DEGREE_VOCAB)),
        ("formal_charge", len(CHARGE_VOCAB)),
        ("hydrogens", len(HCOUNT_VOCAB)),
        ("aromatic", 1),
        ("in_ring", 1),
    ]
)
BOND_SCHEMA = _blocks([("bond_order", len(BOND_VOCAB)), ("in_ring", 1)])
ATOM_FEATURES = sum(w for _, _, w in ATOM_SCHEMA)
BOND_FEATURES = sum(w for _, _, w in BOND_SCHEMA)


class WidthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MolGraph:
    """Featurized graph. ``edge_index`` is (2, E) with both directions of every bond."""

    node_features: np.ndarray
    edge_index: np.ndarray
    edge_features: np.ndarray
    component_ids: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_index.shape[1]

    def permute(self, perm: np.ndarray) -> "MolGraph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        return MolGraph(
            self.node_features[perm],
            inverse[self.edge_index],
            self.edge_features,
            self.component_ids[perm],
        )


def _one_hot(value, vocab, clamp: bool = True) -> list[float]:
    row = [0.0] * len(vocab)
    if value in vocab:
        row[vocab.index(value)] = 1.0
    elif clamp:
        row[0 if value < vocab[0] else len(vocab) - 1] = 1.0
    return row


def featurize(mol: Molecule) -> MolGraph:
    in_ring_atoms = ring_atoms(mol)
    in_ring_bonds = ring_bonds(mol)
    rows = []
    for i, atom in enumerate(mol.atoms):
        element = [0.0] * (len(ELEMENT_VOCAB) + 1)
        element[ELEMENT_VOCAB.index(atom.element) if atom.element in ELEMENT_VOCAB else -1] = 1.0
        rows.append(
            element
            + _one_hot(mol.degree(i), DEGREE_VOCAB)
            + _one_hot(atom.formal_charge, CHARGE_VOCAB)
            + _one_hot(implicit_hydrogens(mol, i), HCOUNT_VOCAB)
            + [float(atom.aromatic), float(i in in_ring_atoms)]
        )
    src, dst, edge_rows = [], [], []
    for k, bond in enumerate(mol.bonds):
        feat = _one_hot(bond.order, BOND_VOCAB, clamp=False) + [float(k in in_ring_bonds)]
        src += [bond.a, bond.b]
        dst += [bond.b, bond.a]
        edge_rows += [feat, feat]
    return MolGraph(
        node_features=np.asarray(rows, dtype=np.float64).reshape(len(rows), ATOM_FEATURES),
        edge_index=np.asarray([src, dst], dtype=np.int64).reshape(2, -1),
        edge_features=np.asarray(edge_rows, dtype=np.float64).reshape(-1, BOND_FEATURES),
        component_ids=np.zeros(len(rows), dtype=np.int64),
    )


def pair_graph(g1: MolGraph, g2: MolGraph) -> MolGraph:
    """Disjoint union of two molecule graphs; ``component_ids`` mark the origin (0 or 1)."""
    if g1.n_nodes == 0 or g2.n_nodes == 0:
        raise ValueError("pair members must have at least one atom")
    if g1.node_features.shape[1] != g2.node_features.shape[1]:
        raise WidthMismatch(
            f"node feature widths differ: {g1.node_features.shape[1]} vs {g2.node_features.shape[1]}"
        )
    if g1.edge_features.shape[1] != g2.edge_features.shape[1]:
        raise WidthMismatch(
            f"edge feature widths differ: {g1.edge_features.shape[1]} vs {g2.edge_features.shape[1]}"
        )
    n1 = g1.n_nodes
    return MolGraph(
        node_features=np.vstack([g1.node_features, g2.node_features]),
        edge_index=np.hstack([g1.edge_index, g2.edge_index + n1]),
        edge_features=np.vstack([g1.edge_features, g2.edge_features]),
        component_ids=np.concatenate(
            [np.zeros(n1, dtype=np.int64), np.ones(g2.n_nodes, dtype=np.int64)]
        ),
    )


def schema_dict() -> dict:
    return {
        "atom": [{"block": n, "offset": o, "width": w} for n, o, w in ATOM_SCHEMA],
        "bond": [{"block": n, "offset": o, "width": w} for n, o, w in BOND_SCHEMA],
        "atom_width": ATOM_FEATURES,
        "bond_width": BOND_FEATURES,
        "vocab": {
            "element": [*ELEMENT_VOCAB, "other"],
            "degree": list(DEGREE_VOCAB),
            "formal_charge": list(CHARGE_VOCAB),
            "hydrogens": list(HCOUNT_VOCAB),
            "bond_order": [b.name.lower() for b in BOND_VOCAB],
        },
    }


def write_schema(path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema_dict(), indent=2) + "\n")


def read_schema(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
