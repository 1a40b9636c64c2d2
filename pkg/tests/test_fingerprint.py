from __future__ import annotations

from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import SAMPLE_SMILES, permute_molecule
from odorpair.featurize import WidthMismatch
from odorpair.fingerprint import (
    BitFingerprint,
    concat_pair,
    initial_invariants,
    load_fingerprint_cache,
    mix64,
    morgan_fingerprint,
    morgan_identifiers,
    save_fingerprint_cache,
    smiles_hash,
)
from odorpair.smiles import parse_smiles


def test_mix64_fixed_values():
    # frozen so that accidental hash changes are caught
    assert mix64([]) == 0x9E3779B97F4A7C15
    assert mix64([1, 2]) != mix64([2, 1])
    assert 0 <= mix64([2**70, -1]) < 2**64


def test_methane_single_bit():
    fp = morgan_fingerprint(parse_smiles("C"), radius=4)
    assert fp.popcount == 1


def test_identical_and_reordered_molecules():
    a = morgan_fingerprint(parse_smiles("CCO"))
    assert a == morgan_fingerprint(parse_smiles("CCO"))
    assert a == morgan_fingerprint(parse_smiles("OCC"))
    assert hash(a) == hash(morgan_fingerprint(parse_smiles("OCC")))
    assert a != morgan_fingerprint(parse_smiles("CCN"))


@pytest.mark.parametrize("smi", SAMPLE_SMILES)
def test_isomorphism_invariance(smi):
    mol = parse_smiles(smi)
    rng = np.random.default_rng(7)
    for _ in range(3):
        perm = rng.permutation(mol.n_atoms)
        bond_perm = rng.permutation(len(mol.bonds))
        other = permute_molecule(mol, perm, bond_perm)
        assert morgan_identifiers(other) == morgan_identifiers(mol)


@pytest.mark.parametrize("smi", SAMPLE_SMILES)
def test_radius_monotone(smi):
    mol = parse_smiles(smi)
    prev = set()
    for r in range(5):
        ids = set(morgan_identifiers(mol, r))
        assert prev <= ids
        prev = ids


def _bfs_env(mol, atom, r):
    """Bond indices within ``r`` expansions of ``atom`` (bonds touching atoms at distance < r)."""
    dist = {atom: 0}
    queue = deque([atom])
    while queue:
        a = queue.popleft()
        for b, _ in mol.neighbors(a):
            if b not in dist:
                dist[b] = dist[a] + 1
                queue.append(b)
    return frozenset(k for k, bond in enumerate(mol.bonds) if min(dist.get(bond.a, 99), dist.get(bond.b, 99)) < r)


def _naive_id(mol, atom, r, base):
    if r == 0:
        return base[atom]
    pairs = sorted((int(mol.bonds[k].order), _naive_id(mol, b, r - 1, base)) for b, k in mol.neighbors(atom))
    return mix64([_naive_id(mol, atom, r - 1, base), *[x for p in pairs for x in p]])


def brute_identifiers(mol, radius):
    base = initial_invariants(mol)
    found = {v: 0 for v in base}
    seen = set()
    for r in range(1, radius + 1):
        best = {}
        for a in range(mol.n_atoms):
            env = _bfs_env(mol, a, r)
            if env == _bfs_env(mol, a, r - 1) or env in seen:
                continue
            v = _naive_id(mol, a, r, base)
            best[env] = min(v, best.get(env, v))
        for env, v in best.items():
            seen.add(env)
            found.setdefault(v, r)
    return found


@pytest.mark.parametrize("smi", ["CCO", "c1ccccc1", "CC(=O)OC", "C1CC1C(N)=O", "CC(C)(C)S", "OC1=CC=CC1", "C#CC(Cl)Br", "c1ccsc1"])
def test_brute_force_identifier_enumeration(smi):
    mol = parse_smiles(smi)
    assert mol.n_atoms <= 8
    for r in range(5):
        assert morgan_identifiers(mol, r) == brute_identifiers(mol, r)


def test_every_bit_reachable():
    mol = parse_smiles("COc1cc(C=O)ccc1O")
    fp = morgan_fingerprint(mol, 4, 256)
    reachable = {v % 256 for v in morgan_identifiers(mol, 4)}
    assert set(np.flatnonzero(fp.bits)) == reachable


def test_nbits_validation():
    with pytest.raises(ValueError):
        morgan_fingerprint(parse_smiles("C"), nbits=1000)
    with pytest.raises(ValueError):
        morgan_identifiers(parse_smiles("C"), radius=-1)


def test_concat_pair():
    a = morgan_fingerprint(parse_smiles("CCO"), nbits=64)
    b = morgan_fingerprint(parse_smiles("c1ccccc1"), nbits=64)
    zero = BitFingerprint(np.zeros(64, dtype=bool), 64, 4)
    assert not concat_pair(a, zero)[64:].any()
    assert concat_pair(a, b).sum() == a.popcount + b.popcount
    assert not np.array_equal(concat_pair(a, b), concat_pair(b, a))
    with pytest.raises(WidthMismatch):
        concat_pair(a, morgan_fingerprint(parse_smiles("C"), nbits=128))


def test_cache_round_trip(tmp_path):
    entries = {s: morgan_fingerprint(parse_smiles(s), 2, 128) for s in SAMPLE_SMILES}
    path = tmp_path / "fp.bin"
    save_fingerprint_cache(path, entries)
    loaded = load_fingerprint_cache(path)
    assert len(loaded) == len(entries)
    for smi, fp in entries.items():
        assert loaded[smiles_hash(smi)] == fp


@given(st.lists(st.sampled_from(["C", "N", "O", "c1ccccc1", "C(=O)", "S", "C(C)"]), min_size=1, max_size=6))
@settings(max_examples=100, deadline=None)
def test_popcount_bounded_by_identifiers(parts):
    mol = parse_smiles("".join(parts))
    ids = morgan_identifiers(mol, 4)
    fp = morgan_fingerprint(mol)
    assert 1 <= fp.popcount <= len(ids) <= mol.n_atoms * 5
