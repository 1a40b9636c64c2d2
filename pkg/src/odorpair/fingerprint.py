"""Circular (Morgan/ECFP-style) bit fingerprints.

Hashing uses a splitmix64 finalizer; bits are not compatible with any other
toolkit's Morgan implementation, only self-consistent.

Identifier rules:
    * radius 0: one identifier per atom from (element, degree, charge, H count,
      aromatic, in-ring).
    * radius r: each atom's identifier is the mix of its previous identifier and
      the sorted list of (bond order, neighbour identifier) pairs.
    * an atom contributes at radius r only if its bond environment grew and no
      earlier environment covered exactly the same bonds; among atoms sharing an
      environment at the same radius, the smallest identifier is kept.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .featurize import WidthMismatch
from .smiles import Molecule, implicit_hydrogens, ring_atoms

__all__ = [
    "BitFingerprint",
    "mix64",
    "initial_invariants",
    "morgan_identifiers",
    "morgan_fingerprint",
    "concat_pair",
    "smiles_hash",
    "save_fingerprint_cache",
    "load_fingerprint_cache",
]

MASK64 = (1 << 64) - 1
_SEED = 0x9E3779B97F4A7C15
CACHE_MAGIC = b"OPFP"


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix64(values) -> int:
    """Order-sensitive 64-bit hash of a sequence of integers."""
    h = _SEED
    for v in values:
        h = _splitmix64(h ^ _splitmix64(int(v) & MASK64))
    return h


@dataclass(frozen=True)
class BitFingerprint:
    bits: np.ndarray  # bool, shape (nbits,)
    nbits: int
    radius: int

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitFingerprint):
            return NotImplemented
        return (
            self.nbits == other.nbits
            and self.radius == other.radius
            and bool(np.array_equal(self.bits, other.bits))
        )

    def __hash__(self) -> int:
        return hash((self.nbits, self.radius, self.bits.tobytes()))


def initial_invariants(mol: Molecule) -> list[int]:
    rings = ring_atoms(mol)
    return [
        mix64(
            (
                atom.element,
                mol.degree(i),
                atom.formal_charge,
                implicit_hydrogens(mol, i),
                int(atom.aromatic),
                int(i in rings),
            )
        )
        for i, atom in enumerate(mol.atoms)
    ]


def morgan_identifiers(mol: Molecule, radius: int = 4) -> dict[int, int]:
    """Map each surviving identifier to the first radius at which it appeared."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    n = mol.n_atoms
    ids = initial_invariants(mol)
    found: dict[int, int] = {}
    for v in ids:
        found.setdefault(v, 0)
    envs: list[frozenset[int]] = [frozenset()] * n
    seen_envs: set[frozenset[int]] = set()
    for r in range(1, radius + 1):
        new_ids = []
        new_envs = []
        for a in range(n):
            nbrs = mol.neighbors(a)
            pairs = sorted((int(mol.bonds[k].order), ids[b]) for b, k in nbrs)
            new_ids.append(mix64([ids[a], *[x for p in pairs for x in p]]))
            env = set(envs[a])
            for b, k in nbrs:
                env.add(k)
                env |= envs[b]
            new_envs.append(frozenset(env))
        candidates: dict[frozenset[int], int] = {}
        for a in range(n):
            env = new_envs[a]
            if env == envs[a] or env in seen_envs:
                continue
            if env not in candidates or new_ids[a] < candidates[env]:
                candidates[env] = new_ids[a]
        for env, v in candidates.items():
            seen_envs.add(env)
            found.setdefault(v, r)
        ids, envs = new_ids, new_envs
    return found


def morgan_fingerprint(mol: Molecule, radius: int = 4, nbits: int = 2048) -> BitFingerprint:
    if nbits < 64 or nbits & (nbits - 1):
        raise ValueError("nbits must be a power of two >= 64")
    bits = np.zeros(nbits, dtype=bool)
    for v in morgan_identifiers(mol, radius):
        bits[v % nbits] = True
    return BitFingerprint(bits, nbits, radius)


def concat_pair(fp1: BitFingerprint, fp2: BitFingerprint) -> np.ndarray:
    if fp1.nbits != fp2.nbits:
        raise WidthMismatch(f"fingerprint widths differ: {fp1.nbits} vs {fp2.nbits}")
    return np.concatenate([fp1.bits, fp2.bits])


def smiles_hash(smiles: str) -> int:
    return int.from_bytes(hashlib.blake2b(smiles.encode(), digest_size=8).digest(), "little")


def save_fingerprint_cache(path: str | Path, entries: dict[str, BitFingerprint]) -> None:
    """Write ``magic | nbits u32 | radius u32 | count u64`` then (hash u64, packed bits) records."""
    fps = list(entries.items())
    if not fps:
        nbits, radius = 2048, 4
    else:
        nbits, radius = fps[0][1].nbits, fps[0][1].radius
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<IIQ", nbits, radius, len(fps)))
        for smi, fp in fps:
            if fp.nbits != nbits or fp.radius != radius:
                raise WidthMismatch("all cached fingerprints must share nbits and radius")
            fh.write(struct.pack("<Q", smiles_hash(smi)))
            fh.write(np.packbits(fp.bits, bitorder="little").tobytes())


def load_fingerprint_cache(path: str | Path) -> dict[int, BitFingerprint]:
    """Read a cache file; keys are :func:`smiles_hash` values."""
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a fingerprint cache")
    nbits, radius, count = struct.unpack_from("<IIQ", raw, 4)
    offset = 4 + 16
    width = nbits // 8
    out = {}
    for _ in range(count):
        (h,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        packed = np.frombuffer(raw, dtype=np.uint8, count=width, offset=offset)
        offset += width
        out[h] = BitFingerprint(np.unpackbits(packed, bitorder="little").astype(bool), nbits, radius)
    return out
