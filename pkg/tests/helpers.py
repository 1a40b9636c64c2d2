"""Shared test helpers and independent oracles."""

from __future__ import annotations

import itertools

import numpy as np

from odorpair.dataset import build_metagraph
from odorpair.smiles import Bond, Molecule

SAMPLE_SMILES = [
    "CCO",
    "c1ccccc1",
    "CC(=O)OCC",
    "CC(C)=CCCC(C)=CC=O",
    "c1ccsc1C",
    "O=C1CCCCCCCCCCCCCC1",
    "C[N+](C)(C)C",
    "CC12CCC(CC1)C(C)(C)O2",
    "COc1cc(C=O)ccc1O",
    "N#CC(Cl)Br",
]


def permute_molecule(mol: Molecule, perm, bond_perm=None) -> Molecule:
    """New molecule whose atom ``i`` is ``mol.atoms[perm[i]]``; bonds optionally reordered and flipped."""
    perm = list(perm)
    inverse = {old: new for new, old in enumerate(perm)}
    bonds = [Bond(inverse[b.b], inverse[b.a], b.order) for b in mol.bonds]
    if bond_perm is not None:
        bonds = [bonds[k] for k in bond_perm]
    return Molecule(tuple(mol.atoms[p] for p in perm), tuple(bonds), mol.source)


def metagraph_from_edges(n_nodes: int, edges, labels):
    """Meta-graph over distinct alkanes with explicit ``(a, b)`` edges and label lists."""
    names = ["C" * (i + 1) for i in range(n_nodes)]
    rows = [(i, names[a], names[b], list(lab)) for i, ((a, b), lab) in enumerate(zip(edges, labels))]
    mg, _ = build_metagraph(rows)
    # node order is first appearance; remap to the alkane index for tests that care
    return mg, names


def random_metagraph(rng: np.random.Generator, n_nodes: int, n_edges: int, label_names=("a", "b", "c")):
    pairs = list(itertools.combinations(range(n_nodes), 2))
    chosen = rng.choice(len(pairs), size=min(n_edges, len(pairs)), replace=False)
    edges = [pairs[int(k)] for k in sorted(chosen)]
    labels = []
    for _ in edges:
        lab = [n for n in label_names if rng.random() < 0.5]
        labels.append(lab or [label_names[int(rng.integers(len(label_names)))]])
    return metagraph_from_edges(n_nodes, edges, labels)


def exhaustive_best_usable(mg, required) -> int | None:
    """Max usable-edge count over all 2^n two-way partitions passing coverage (None if none pass)."""
    ea, eb = mg.endpoints()
    lm = mg.label_matrix()
    req = [mg.vocab.index[r] for r in required]
    best = None
    for mask in range(1 << mg.n_nodes):
        side = [(mask >> i) & 1 for i in range(mg.n_nodes)]
        usable = [0, 0]
        covered = [[False, False] for _ in req]
        for k in range(len(ea)):
            sa, sb = side[ea[k]], side[eb[k]]
            if sa != sb:
                continue
            usable[sa] += 1
            for j, r in enumerate(req):
                if lm[k, r]:
                    covered[j][sa] = True
        if all(c[0] and c[1] for c in covered):
            total = usable[0] + usable[1]
            best = total if best is None else max(best, total)
    return best


def brute_auroc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    twice = 0
    for p in pos:
        for n in neg:
            twice += 2 if p > n else 1 if p == n else 0
    return twice / (2 * len(pos) * len(neg))


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def run_cli_pipeline(root, seed: int = 0, epochs: int = 5, arch: str = "gin") -> dict:
    """synth -> ingest -> carve -> train -> eval through ``odorpair.cli.main``; returns each stage's directory."""
    from pathlib import Path

    from odorpair.cli import main

    root = Path(root)
    dirs = {k: root / k for k in ("data", "ingest", "carve", "train", "eval")}
    common = ["--seed", str(seed)]
    steps = [
        ["synth", "--n-pairs", "120", "--n-molecules", "60", "--out", str(dirs["data"])],
        ["ingest", "--pairs", str(dirs["data"] / "pairs.jsonl"), "--mono", str(dirs["data"] / "mono.jsonl"),
         "--out", str(dirs["ingest"])],
        ["carve", "--metagraph", str(dirs["ingest"] / "metagraph.bin"), "--max-iters", "300", "--out", str(dirs["carve"])],
        ["train", "--metagraph", str(dirs["ingest"] / "metagraph.bin"), "--carving", str(dirs["carve"] / "carving.json"),
         "--arch", arch, "--epochs", str(epochs), "--hidden-dim", "16", "--patience", "-1", "--out", str(dirs["train"])],
        ["eval", "--predictor", arch, "--run", str(dirs["train"]), "--metagraph", str(dirs["ingest"] / "metagraph.bin"),
         "--carving", str(dirs["carve"] / "carving.json"), "--out", str(dirs["eval"])],
    ]
    for argv in steps:
        code = main(argv + common)
        if code != 0:
            raise RuntimeError(f"{argv[0]} exited with {code}")
    return dirs
