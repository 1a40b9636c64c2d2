"""Record ingestion, odor-note canonicalization and the molecule meta-graph."""

from __future__ import annotations

import json
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .smiles import Molecule, SmilesError, parse_smiles

__all__ = [
    "LabelVocab",
    "PairRecord",
    "MonoRecord",
    "PairEdge",
    "MetaGraph",
    "IngestReport",
    "FormatError",
    "NoOverlap",
    "canonicalize_label",
    "clean_labels",
    "load_pairs",
    "load_mono",
    "build_metagraph",
    "jaccard",
    "jaccard_blend_analysis",
    "dependent_notes",
    "isolate_notes",
]

NO_LABEL_SENTINEL = "no odor group found for these"
LABEL_REPLACEMENTS = {
    "anisic": "anise",
    "medicinal,": "medicinal",
    "corn chip": "corn",
}
METAGRAPH_MAGIC = b"OPMG\x01"


class FormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None) -> None:
        self.line = line
        self.path = path
        where = f"{path}:{line}: " if line is not None else ""
        super().__init__(where + message)


class NoOverlap(ValueError):
    pass


def canonicalize_label(raw: str) -> str | None:
    """Trim, lowercase and apply the replacement table. The no-label sentinel maps to None."""
    note = " ".join(raw.strip().lower().split())
    if not note or note == NO_LABEL_SENTINEL:
        return None
    return LABEL_REPLACEMENTS.get(note, note)


def clean_labels(raw: Iterable[str]) -> list[str]:
    """Canonicalize a raw label list, dropping sentinels and duplicates (first occurrence kept)."""
    out: list[str] = []
    for r in raw:
        note = canonicalize_label(r)
        if note is not None and note not in out:
            out.append(note)
    return out


class LabelVocab:
    """Ordered note vocabulary; indices follow first appearance."""

    def __init__(self, notes: Iterable[str] = ()) -> None:
        self.notes: list[str] = []
        self.index: dict[str, int] = {}
        for n in notes:
            self.add(n)

    def add(self, note: str) -> int:
        if note != note.strip().lower():
            raise ValueError(f"note {note!r} is not canonical")
        if note not in self.index:
            self.index[note] = len(self.notes)
            self.notes.append(note)
        return self.index[note]

    def __len__(self) -> int:
        return len(self.notes)

    def __contains__(self, note: str) -> bool:
        return note in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelVocab) and self.notes == other.notes

    def encode(self, labels: Iterable[str]) -> np.ndarray:
        vec = np.zeros(len(self.notes), dtype=np.float64)
        for note in labels:
            vec[self.index[note]] = 1.0
        return vec

    def decode(self, vector: np.ndarray) -> frozenset[str]:
        return frozenset(self.notes[i] for i in np.flatnonzero(np.asarray(vector) > 0.5))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.notes))

    @classmethod
    def load(cls, path: str | Path) -> "LabelVocab":
        return cls(line for line in Path(path).read_text().splitlines() if line)


@dataclass(frozen=True)
class PairRecord:
    smiles_a: str
    smiles_b: str
    labels: frozenset[str]


@dataclass(frozen=True)
class MonoRecord:
    smiles: str
    labels: frozenset[str]


@dataclass(frozen=True)
class PairEdge:
    a: int
    b: int
    labels: frozenset[str]


@dataclass
class IngestReport:
    read: int = 0
    kept: int = 0
    dropped_parse: int = 0
    dropped_empty_labels: int = 0
    dropped_self_loops: int = 0
    merged_duplicates: int = 0
    parse_errors: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "read": self.read,
            "kept": self.kept,
            "dropped_parse": self.dropped_parse,
            "dropped_empty_labels": self.dropped_empty_labels,
            "dropped_self_loops": self.dropped_self_loops,
            "merged_duplicates": self.merged_duplicates,
            "parse_errors": self.parse_errors,
        }


@dataclass
class MetaGraph:
    """Molecules as nodes, labeled blended pairs as undirected edges."""

    molecules: list[str]
    edges: list[PairEdge]
    vocab: LabelVocab
    _mols: dict[str, Molecule] = field(default_factory=dict, repr=False, compare=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MetaGraph):
            return NotImplemented
        return self.molecules == other.molecules and self.edges == other.edges and self.vocab == other.vocab

    @property
    def n_nodes(self) -> int:
        return len(self.molecules)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def molecule(self, node: int) -> Molecule:
        smi = self.molecules[node]
        if smi not in self._mols:
            self._mols[smi] = parse_smiles(smi)
        return self._mols[smi]

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        a = np.fromiter((e.a for e in self.edges), dtype=np.int64, count=len(self.edges))
        b = np.fromiter((e.b for e in self.edges), dtype=np.int64, count=len(self.edges))
        return a, b

    def label_matrix(self, notes: list[str] | None = None) -> np.ndarray:
        """(n_edges, n_labels) multi-hot matrix over ``notes`` (default: full vocab)."""
        notes = self.vocab.notes if notes is None else notes
        col = {n: i for i, n in enumerate(notes)}
        mat = np.zeros((len(self.edges), len(notes)), dtype=np.float64)
        for row, edge in enumerate(self.edges):
            for note in edge.labels:
                if note in col:
                    mat[row, col[note]] = 1.0
        return mat

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab.notes,
            "molecules": self.molecules,
            "edges": [[e.a, e.b, sorted(e.labels, key=self.vocab.index.__getitem__)] for e in self.edges],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetaGraph":
        return cls(
            molecules=list(data["molecules"]),
            edges=[PairEdge(int(a), int(b), frozenset(ls)) for a, b, ls in data["edges"]],
            vocab=LabelVocab(data["vocab"]),
        )

    def save(self, path: str | Path) -> None:
        payload = json.dumps(self.to_dict(), separators=(",", ":")).encode()
        Path(path).write_bytes(METAGRAPH_MAGIC + zlib.compress(payload, 9))

    @classmethod
    def load(cls, path: str | Path) -> "MetaGraph":
        raw = Path(path).read_bytes()
        if not raw.startswith(METAGRAPH_MAGIC):
            raise FormatError("not a metagraph file", path=str(path))
        return cls.from_dict(json.loads(zlib.decompress(raw[len(METAGRAPH_MAGIC) :])))


def _read_jsonl(path: str | Path, keys: tuple[str, ...]):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON ({exc.msg})", lineno, str(path)) from None
            if not isinstance(obj, dict):
                raise FormatError("record must be a JSON object", lineno, str(path))
            for key in keys:
                if key not in obj:
                    raise FormatError(f"missing key {key!r}", lineno, str(path))
            for key in keys[:-1]:
                if not isinstance(obj[key], str):
                    raise FormatError(f"{key!r} must be a string", lineno, str(path))
            labels = obj[keys[-1]]
            if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
                raise FormatError(f"{keys[-1]!r} must be a list of strings", lineno, str(path))
            yield lineno, obj


def build_metagraph(
    records: Iterable[tuple[int, str, str, list[str]]],
    vocab: LabelVocab | None = None,
) -> tuple[MetaGraph, IngestReport]:
    """Build a meta-graph from (line, smiles_a, smiles_b, raw_labels) tuples."""
    vocab = LabelVocab(vocab.notes) if vocab is not None else LabelVocab()
    report = IngestReport()
    molecules: list[str] = []
    node_of: dict[str, int] = {}
    mols: dict[str, Molecule] = {}
    bad: set[str] = set()
    edge_of: dict[tuple[int, int], int] = {}
    edges: list[PairEdge] = []

    def parse(smi: str, lineno: int) -> bool:
        if smi in mols:
            return True
        if smi in bad:
            return False
        try:
            mols[smi] = parse_smiles(smi)
            return True
        except SmilesError as exc:
            bad.add(smi)
            report.parse_errors.append({"line": lineno, "smiles": smi, "error": str(exc)})
            return False

    for lineno, smi_a, smi_b, raw in records:
        report.read += 1
        smi_a, smi_b = smi_a.strip(), smi_b.strip()
        ok_a = parse(smi_a, lineno)
        ok_b = parse(smi_b, lineno)
        if not (ok_a and ok_b):
            report.dropped_parse += 1
            continue
        labels = clean_labels(raw)
        if not labels:
            report.dropped_empty_labels += 1
            continue
        if smi_a == smi_b:
            report.dropped_self_loops += 1
            continue
        report.kept += 1
        for note in labels:
            vocab.add(note)
        ends = []
        for smi in (smi_a, smi_b):
            if smi not in node_of:
                node_of[smi] = len(molecules)
                molecules.append(smi)
            ends.append(node_of[smi])
        key = (min(ends), max(ends))
        if key in edge_of:
            k = edge_of[key]
            old = edges[k]
            edges[k] = PairEdge(old.a, old.b, old.labels | frozenset(labels))
            report.merged_duplicates += 1
        else:
            edge_of[key] = len(edges)
            edges.append(PairEdge(ends[0], ends[1], frozenset(labels)))
    mg = MetaGraph(molecules, edges, vocab, {s: mols[s] for s in molecules})
    return mg, report


def load_pairs(path: str | Path, vocab: LabelVocab | None = None) -> tuple[MetaGraph, IngestReport]:
    """Load pairs JSONL (``{"smiles_a", "smiles_b", "labels"}`` per line)."""
    rows = (
        (lineno, obj["smiles_a"], obj["smiles_b"], obj["labels"])
        for lineno, obj in _read_jsonl(path, ("smiles_a", "smiles_b", "labels"))
    )
    return build_metagraph(rows, vocab)


def load_mono(path: str | Path) -> tuple[list[MonoRecord], IngestReport]:
    """Load single-molecule JSONL (``{"smiles", "labels"}``); bad rows are dropped and counted."""
    report = IngestReport()
    records: list[MonoRecord] = []
    for lineno, obj in _read_jsonl(path, ("smiles", "labels")):
        report.read += 1
        smi = obj["smiles"].strip()
        try:
            parse_smiles(smi)
        except SmilesError as exc:
            report.dropped_parse += 1
            report.parse_errors.append({"line": lineno, "smiles": smi, "error": str(exc)})
            continue
        labels = clean_labels(obj["labels"])
        if not labels:
            report.dropped_empty_labels += 1
            continue
        report.kept += 1
        records.append(MonoRecord(smi, frozenset(labels)))
    return records, report


def jaccard(x: frozenset | set, y: frozenset | set) -> float:
    if not x and not y:
        return 1.0
    return len(x & y) / len(x | y)


@dataclass(frozen=True)
class JaccardResult:
    j_union: float
    j_intersection: float
    n_pairs: int
    skipped: int


def jaccard_blend_analysis(mg: MetaGraph, mono: Iterable[MonoRecord]) -> JaccardResult:
    """Mean Jaccard between blend labels and the union / intersection of constituent labels."""
    mono_labels: dict[str, frozenset[str]] = {}
    for rec in mono:
        mono_labels[rec.smiles] = mono_labels.get(rec.smiles, frozenset()) | rec.labels
    j_u, j_i, skipped = [], [], 0
    for edge in mg.edges:
        la = mono_labels.get(mg.molecules[edge.a])
        lb = mono_labels.get(mg.molecules[edge.b])
        if la is None or lb is None:
            skipped += 1
            continue
        j_u.append(jaccard(la | lb, edge.labels))
        j_i.append(jaccard(la & lb, edge.labels))
    if not j_u:
        raise NoOverlap("no pair had both constituents labeled")
    return JaccardResult(float(np.mean(j_u)), float(np.mean(j_i)), len(j_u), skipped)


def dependent_notes(records: Iterable[Iterable[str]]) -> list[tuple[str, str, int]]:
    """(dependent, parent, frequency) rows: every record holding ``dependent`` also holds ``parent``.

    Rows are sorted by descending frequency, then name.
    """
    sets = [frozenset(r) for r in records]
    freq: Counter[str] = Counter()
    # parents[d] = intersection of all label sets containing d
    parents: dict[str, frozenset[str]] = {}
    for s in sets:
        for note in s:
            freq[note] += 1
            parents[note] = parents[note] & s if note in parents else s
    rows = [
        (d, p, freq[d])
        for d, common in parents.items()
        for p in common
        if p != d
    ]
    return sorted(rows, key=lambda row: (-row[2], row[0], row[1]))


def isolate_notes(records: Iterable[Iterable[str]]) -> list[tuple[str, int]]:
    """Notes that never share a record with any other note, with their frequency."""
    freq: Counter[str] = Counter()
    social: set[str] = set()
    for r in records:
        s = set(r)
        freq.update(s)
        if len(s) > 1:
            social |= s
    rows = [(n, c) for n, c in freq.items() if n not in social]
    return sorted(rows, key=lambda row: (-row[1], row[0]))
