"""Train/test carving of the meta-graph.

A carving assigns every molecule to one component. Pair edges whose endpoints
share a component are usable data for that component; edges across
components are discarded so that no molecule is seen on both sides.

Searching is randomized: molecules are assigned by independent draws (each
goes to component ``k`` with probability ``ratios[k]``), and the best
coverage-passing draw is kept. Draws are evaluated in vectorized batches; the
batch layout is fixed so a seed fully determines the result.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import MetaGraph

__all__ = [
    "CarveConfig",
    "Carving",
    "NoCoverageFound",
    "DimensionMismatch",
    "random_partition",
    "classify_edges",
    "coverage_ok",
    "edge_boundary_degree",
    "kl_divergence",
    "kl_score",
    "carve_search",
    "carvable_labels",
    "kfold_carvings",
]

TWO_WAY = ("train", "test")
THREE_WAY = ("train", "valid", "test")
_BATCH_CELLS = 1 << 22


class NoCoverageFound(RuntimeError):
    def __init__(self, message: str, deficits: dict[str, list[int]] | None = None) -> None:
        self.deficits = deficits or {}
        super().__init__(message)


class DimensionMismatch(ValueError):
    pass


@dataclass
class CarveConfig:
    train_fraction: float = 0.5
    max_iterations: int = 1000
    seed: int = 0
    objective: str = "usable_edges"  # or "kl_score"
    required_labels: list[str] | None = None
    # three-way splits set ratios=(train, valid, test); overrides train_fraction
    ratios: tuple[float, ...] | None = None
    # stop at the first coverage-passing draw instead of scanning the budget
    first_valid: bool = False
    kl_epsilon: float = 1e-9

    def __post_init__(self) -> None:
        if self.ratios is None and not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.objective not in ("usable_edges", "kl_score"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.ratios is not None:
            self.ratios = tuple(float(r) for r in self.ratios)
            if len(self.ratios) < 2 or any(r <= 0 for r in self.ratios) or abs(sum(self.ratios) - 1) > 1e-9:
                raise ValueError("ratios must be positive and sum to 1")

    @property
    def component_ratios(self) -> tuple[float, ...]:
        if self.ratios is not None:
            return self.ratios
        return (self.train_fraction, 1.0 - self.train_fraction)

    @property
    def component_names(self) -> tuple[str, ...]:
        k = len(self.component_ratios)
        if k == 2:
            return TWO_WAY
        if k == 3:
            return THREE_WAY
        return tuple(f"part{i}" for i in range(k))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios) if self.ratios is not None else None
        return d


@dataclass
class Carving:
    assignment: np.ndarray  # (n_nodes,) component index
    components: tuple[str, ...]
    usable_edges: list[np.ndarray]  # edge indices per component
    discarded: np.ndarray  # boundary edge indices
    coverage: np.ndarray  # (n_labels, n_components) usable edge counts
    labels: list[str]
    seed: int = 0
    iterations_used: int = 0
    required_labels: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def usable_count(self) -> int:
        return int(sum(len(u) for u in self.usable_edges))

    def component_edges(self, name: str) -> np.ndarray:
        return self.usable_edges[self.components.index(name)]

    def coverage_of(self, label: str) -> list[int]:
        return [int(x) for x in self.coverage[self.labels.index(label)]]

    def to_dict(self, mg: MetaGraph) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "components": list(self.components),
            "assignment": {
                smi: self.components[int(c)] for smi, c in zip(mg.molecules, self.assignment)
            },
            "discarded_count": int(len(self.discarded)),
            "usable_counts": {n: int(len(u)) for n, u in zip(self.components, self.usable_edges)},
            "iterations_used": self.iterations_used,
            "required_labels": list(self.required_labels),
            "coverage": {
                label: [int(x) for x in self.coverage[i]] for i, label in enumerate(self.labels)
            },
        }

    def save(self, path: str | Path, mg: MetaGraph) -> None:
        Path(path).write_text(json.dumps(self.to_dict(mg), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, mg: MetaGraph) -> "Carving":
        data = json.loads(Path(path).read_text())
        components = tuple(data["components"])
        assignment = np.array(
            [components.index(data["assignment"][smi]) for smi in mg.molecules], dtype=np.int64
        )
        carving = classify_edges(mg, assignment, components)
        carving.seed = data["seed"]
        carving.config = data["config"]
        carving.iterations_used = data["iterations_used"]
        carving.required_labels = list(data["required_labels"])
        return carving


def classify_edges(
    mg: MetaGraph, assignment: np.ndarray, components: Sequence[str] = TWO_WAY
) -> Carving:
    """Split edges into per-component usable lists and the discarded boundary."""
    assignment = np.asarray(assignment, dtype=np.int64)
    ea, eb = mg.endpoints()
    ca, cb = assignment[ea], assignment[eb]
    same = ca == cb
    usable = [np.flatnonzero(same & (ca == k)) for k in range(len(components))]
    lm = mg.label_matrix()
    coverage = np.stack([lm[u].sum(axis=0) for u in usable], axis=1).astype(np.int64)
    return Carving(
        assignment=assignment,
        components=tuple(components),
        usable_edges=usable,
        discarded=np.flatnonzero(~same),
        coverage=coverage.reshape(len(mg.vocab), len(components)),
        labels=list(mg.vocab.notes),
    )


def random_partition(mg: MetaGraph, fraction: float | Sequence[float], rng: np.random.Generator) -> Carving:
    """Independent per-molecule draw: train with probability ``fraction`` (or per-component ``ratios``)."""
    ratios = (fraction, 1.0 - fraction) if np.isscalar(fraction) else tuple(fraction)
    assignment = _draw(rng, 1, mg.n_nodes, ratios)[0]
    names = TWO_WAY if len(ratios) == 2 else THREE_WAY if len(ratios) == 3 else tuple(
        f"part{i}" for i in range(len(ratios))
    )
    return classify_edges(mg, assignment, names)


def _draw(rng: np.random.Generator, batch: int, n: int, ratios: Sequence[float]) -> np.ndarray:
    u = rng.random((batch, n))
    cuts = np.cumsum(ratios)[:-1]
    return np.searchsorted(cuts, u, side="right").astype(np.int8)


def coverage_ok(c: Carving, labels: Sequence[str] | None = None) -> bool:
    """True iff every label in ``labels`` (default: all) has a usable edge in every component."""
    labels = c.labels if labels is None else list(labels)
    for label in labels:
        if label not in c.labels:
            return False
        if (c.coverage[c.labels.index(label)] <= 0).any():
            return False
    return True


def edge_boundary_degree(c: Carving) -> int:
    return int(len(c.discarded))


def kl_divergence(p, q, epsilon: float = 1e-9) -> float:
    """KL(p || q) after adding ``epsilon`` to every entry and renormalizing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionMismatch(f"distribution shapes differ: {p.shape} vs {q.shape}")
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    p = p + epsilon
    q = q + epsilon
    p = p / p.sum()
    q = q / q.sum()
    return float(max(0.0, np.sum(p * np.log(p / q))))


def kl_score(c: Carving, overall: np.ndarray, epsilon: float = 1e-9) -> float:
    """Sum over components of KL(component label distribution || whole-graph distribution)."""
    return float(sum(kl_divergence(c.coverage[:, k], overall, epsilon) for k in range(len(c.components))))


def _batched_kl(counts: np.ndarray, overall: np.ndarray, eps: float) -> np.ndarray:
    # counts: (B, K, L); overall: (L,)
    p = counts + eps
    p = p / p.sum(axis=-1, keepdims=True)
    q = overall + eps
    q = q / q.sum()
    return np.maximum(0.0, (p * np.log(p / q)).sum(axis=-1)).sum(axis=-1)


@dataclass
class _SearchState:
    best_score: float = -np.inf
    best_index: int = -1
    best_assignment: np.ndarray | None = None
    best_covered_count: int = -1
    best_covered_assignment: np.ndarray | None = None
    best_covered_index: int = -1
    union_covered: np.ndarray | None = None
    iterations: int = 0


def _scan(
    mg: MetaGraph,
    cfg: CarveConfig,
    required: np.ndarray,
    stop_at_first: bool,
) -> _SearchState:
    """Evaluate ``cfg.max_iterations`` seeded draws and track the bests."""
    rng = np.random.default_rng(cfg.seed)
    ratios = cfg.component_ratios
    n_comp = len(ratios)
    ea, eb = mg.endpoints()
    lm = mg.label_matrix()
    overall = lm.sum(axis=0)
    n_edges = max(1, len(ea))
    batch = int(max(1, min(4096, _BATCH_CELLS // (n_edges * n_comp))))
    state = _SearchState(union_covered=np.zeros(lm.shape[1], dtype=bool))
    done = 0
    while done < cfg.max_iterations:
        b = min(batch, cfg.max_iterations - done)
        assign = _draw(rng, b, mg.n_nodes, ratios)
        ca, cb = assign[:, ea], assign[:, eb]
        same = ca == cb
        counts = np.stack(
            [(same & (ca == k)).astype(np.float64) @ lm for k in range(n_comp)], axis=1
        )  # (b, K, L)
        covered = (counts > 0).all(axis=1)  # (b, L)
        passes = covered[:, required].all(axis=1)
        if cfg.objective == "usable_edges":
            score = same.sum(axis=1).astype(np.float64)
        else:
            score = -_batched_kl(counts, overall, cfg.kl_epsilon)
        state.union_covered |= covered.any(axis=0)
        n_cov = covered.sum(axis=1)
        i = int(np.argmax(n_cov))
        if n_cov[i] > state.best_covered_count:
            state.best_covered_count = int(n_cov[i])
            state.best_covered_assignment = assign[i].astype(np.int64)
            state.best_covered_index = done + i
        if passes.any():
            masked = np.where(passes, score, -np.inf)
            j = int(np.argmax(masked))
            if stop_at_first:
                j = int(np.argmax(passes))
            if masked[j] > state.best_score:
                state.best_score = float(masked[j])
                state.best_index = done + j
                state.best_assignment = assign[j].astype(np.int64)
            if stop_at_first:
                state.iterations = done + j + 1
                return state
        done += b
    state.iterations = done
    return state


def _required_mask(mg: MetaGraph, labels: Sequence[str] | None) -> np.ndarray:
    if labels is None:
        return np.ones(len(mg.vocab), dtype=bool)
    mask = np.zeros(len(mg.vocab), dtype=bool)
    for label in labels:
        if label not in mg.vocab:
            raise KeyError(f"required label {label!r} is not in the vocabulary")
        mask[mg.vocab.index[label]] = True
    return mask


def carve_search(mg: MetaGraph, cfg: CarveConfig) -> Carving:
    """Best coverage-passing carving over ``cfg.max_iterations`` random draws.

    Ties keep the earliest draw. Raises :class:`NoCoverageFound` (with per-label
    component counts of the closest draw) if no draw covers every required label.
    """
    if mg.n_nodes == 0:
        raise ValueError("meta-graph is empty")
    required = _required_mask(mg, cfg.required_labels)
    state = _scan(mg, cfg, required, cfg.first_valid)
    names = cfg.component_names
    if state.best_assignment is None:
        deficits: dict[str, list[int]] = {}
        if state.best_covered_assignment is not None:
            closest = classify_edges(mg, state.best_covered_assignment, names)
            for i in np.flatnonzero(required):
                if (closest.coverage[i] <= 0).any():
                    deficits[mg.vocab.notes[i]] = [int(x) for x in closest.coverage[i]]
        raise NoCoverageFound(
            f"no carving covered all {int(required.sum())} required labels "
            f"in {state.iterations} iterations ({len(deficits)} labels short in the closest draw)",
            deficits,
        )
    carving = classify_edges(mg, state.best_assignment, names)
    carving.seed = cfg.seed
    carving.iterations_used = state.iterations
    carving.required_labels = [mg.vocab.notes[i] for i in np.flatnonzero(required)]
    carving.config = cfg.to_dict()
    return carving


@dataclass(frozen=True)
class CarvableLabels:
    best: frozenset[str]  # labels covered by the single best draw
    union: frozenset[str]  # labels covered by any draw
    best_index: int


def carvable_labels(mg: MetaGraph, cfg: CarveConfig, attempts: int | None = None) -> CarvableLabels:
    """Labels that can be covered in every component, judged over ``attempts`` draws.

    Uses the same random stream as :func:`carve_search` with the same config,
    so the best draw found here is also evaluated by the search.
    """
    attempts = cfg.max_iterations if attempts is None else attempts
    if attempts < 1:
        raise ValueError("attempts must be >= 1")
    if mg.n_nodes == 0 or mg.n_edges == 0:
        return CarvableLabels(frozenset(), frozenset(), -1)
    scan_cfg = CarveConfig(**{**cfg.to_dict(), "max_iterations": attempts, "ratios": cfg.ratios})
    state = _scan(mg, scan_cfg, np.zeros(len(mg.vocab), dtype=bool), False)
    best = classify_edges(mg, state.best_covered_assignment, cfg.component_names)
    best_set = frozenset(
        mg.vocab.notes[i] for i in range(len(mg.vocab)) if (best.coverage[i] > 0).all()
    )
    union = frozenset(mg.vocab.notes[i] for i in np.flatnonzero(state.union_covered))
    return CarvableLabels(best_set, union, state.best_covered_index)


def kfold_carvings(
    mg: MetaGraph,
    k: int = 5,
    ratios: tuple[float, float, float] = (0.5, 0.25, 0.25),
    max_iterations: int = 1000,
    seed: int = 0,
) -> list[Carving]:
    """``k`` independent three-way carvings, each covering its own carvable label set.

    Fold ``f`` uses seed ``seed + f``. Label sets may differ between folds.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    folds = []
    for f in range(k):
        cfg = CarveConfig(max_iterations=max_iterations, seed=seed + f, ratios=ratios)
        labels = carvable_labels(mg, cfg)
        if not labels.best:
            raise NoCoverageFound(f"fold {f}: no label could be covered in all components")
        cfg.required_labels = sorted(labels.best, key=mg.vocab.index.__getitem__)
        folds.append(carve_search(mg, cfg))
    return folds

