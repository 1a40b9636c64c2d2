"""Seeded synthetic molecule-pair datasets with rule-based labels.

Labels are structural so that models have something learnable:
    alliaceous  either molecule contains sulfur
    fruity      either molecule has a carbonyl
    green       either molecule contains nitrogen
    woody       either molecule has a ring
    sweet       random (30%), unlearnable noise
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .smiles import BondOrder, parse_smiles, ring_bonds

__all__ = ["random_smiles", "molecule_pool", "label_molecule", "synthetic_pairs", "write_jsonl"]

_MIDDLE = ["C", "C", "C", "CC", "C(C)", "C(=O)", "O", "N", "C=C", "S", "c1ccc(cc1)", "C1CC(CC1)", "C(O)", "C(CC)"]
_ENDS = ["C", "CC", "O", "N", "S", "c1ccccc1", "c1ccsc1", "C(=O)O", "C#N", "Cl", "C1CCCCC1"]


def random_smiles(rng: np.random.Generator, sulfur: bool | None = None) -> str:
    """A random small organic SMILES; ``sulfur`` forces presence/absence of S when set."""
    while True:
        n_mid = int(rng.integers(1, 6))
        parts = [_ENDS[int(rng.integers(len(_ENDS)))]]
        parts += [_MIDDLE[int(rng.integers(len(_MIDDLE)))] for _ in range(n_mid)]
        parts.append(_ENDS[int(rng.integers(len(_ENDS)))])
        smi = "".join(parts)
        has_s = "S" in smi or "s" in smi
        if sulfur is None or sulfur == has_s:
            return smi


def label_molecule(smiles: str) -> set[str]:
    mol = parse_smiles(smiles)
    elements = {a.element for a in mol.atoms}
    labels = set()
    if 16 in elements:
        labels.add("alliaceous")
    if 7 in elements:
        labels.add("green")
    if ring_bonds(mol):
        labels.add("woody")
    for bond in mol.bonds:
        if bond.order is BondOrder.DOUBLE and 8 in (mol.atoms[bond.a].element, mol.atoms[bond.b].element):
            labels.add("fruity")
    return labels


def molecule_pool(n: int, rng: np.random.Generator, sulfur_fraction: float = 0.3) -> list[str]:
    pool: list[str] = []
    seen: set[str] = set()
    while len(pool) < n:
        smi = random_smiles(rng, sulfur=bool(rng.random() < sulfur_fraction))
        if smi not in seen:
            seen.add(smi)
            pool.append(smi)
    return pool


@dataclass
class SyntheticData:
    pairs: list[dict]
    mono: list[dict]


def synthetic_pairs(n_pairs: int = 500, n_molecules: int = 200, seed: int = 0) -> SyntheticData:
    rng = np.random.default_rng(seed)
    pool = molecule_pool(n_molecules, rng)
    mono_labels = {s: label_molecule(s) for s in pool}
    pairs = []
    used: set[tuple[int, int]] = set()
    while len(pairs) < n_pairs:
        i, j = (int(v) for v in rng.integers(len(pool), size=2))
        key = (min(i, j), max(i, j))
        if i == j or key in used:
            continue
        used.add(key)
        labels = mono_labels[pool[i]] | mono_labels[pool[j]]
        if rng.random() < 0.3:
            labels = labels | {"sweet"}
        if not labels:
            labels = {"sweet"}
        pairs.append({"smiles_a": pool[i], "smiles_b": pool[j], "labels": sorted(labels)})
    mono = [{"smiles": s, "labels": sorted(mono_labels[s] or {"sweet"})} for s in pool]
    return SyntheticData(pairs, mono)


def write_jsonl(path: str | Path, rows: list[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in rows))
