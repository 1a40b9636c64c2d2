"""Per-label AUROC, aggregate scores and the two baselines (0-R, fingerprint logistic regression)."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .featurize import WidthMismatch
from .gnn import EmptyDataset

__all__ = [
    "DegenerateLabels",
    "auroc",
    "auroc_or_none",
    "macro_auroc",
    "micro_auroc",
    "ScoreReport",
    "score_report",
    "evaluate",
    "ZeroR",
    "zero_r",
    "LogRegModel",
    "logreg_fit",
    "logreg_loss",
]


class DegenerateLabels(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with average ranks for ties.

    Equals P(score of a random positive > score of a random negative), ties counting 1/2.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} positives and {n_neg} negatives")
    # average ranks are half-integers, so twice the rank sum is an exact integer
    twice_rank_sum = int(round(2.0 * rankdata(s)[y].sum()))
    twice_u = twice_rank_sum - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def auroc_or_none(scores, labels) -> float | None:
    try:
        return auroc(scores, labels)
    except DegenerateLabels:
        return None


def macro_auroc(scores: np.ndarray, targets: np.ndarray) -> float:
    """Mean of defined per-label AUROCs (NaN when no label is defined)."""
    vals = [auroc_or_none(scores[:, j], targets[:, j]) for j in range(targets.shape[1])]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else math.nan


def micro_auroc(scores: np.ndarray, targets: np.ndarray) -> float:
    """AUROC pooled over every (item, label) cell."""
    r = auroc_or_none(np.asarray(scores).ravel(), np.asarray(targets).ravel())
    return math.nan if r is None else r


@dataclass
class ScoreReport:
    labels: list[str]
    per_label: list[float | None]
    support_pos: list[int]
    support_neg: list[int]
    macro: float
    micro: float
    n_items: int

    @property
    def n_labels_defined(self) -> int:
        return sum(v is not None for v in self.per_label)

    def summary(self) -> dict:
        return {
            "macro": self.macro,
            "micro": self.micro,
            "n_items": self.n_items,
            "n_labels_defined": self.n_labels_defined,
        }

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "support_pos", "support_neg", "auroc"])
        for name, p, n, a in zip(self.labels, self.support_pos, self.support_neg, self.per_label):
            w.writerow([name, p, n, "" if a is None else repr(a)])
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.csv())
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")


def score_report(scores: np.ndarray, targets: np.ndarray, labels: Sequence[str] | None = None) -> ScoreReport:
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if scores.shape != targets.shape:
        raise ValueError(f"score/target shapes differ: {scores.shape} vs {targets.shape}")
    labels = [str(i) for i in range(targets.shape[1])] if labels is None else list(labels)
    per = [auroc_or_none(scores[:, j], targets[:, j]) for j in range(targets.shape[1])]
    defined = [v for v in per if v is not None]
    pos = targets.sum(axis=0).astype(int)
    return ScoreReport(
        labels=labels,
        per_label=per,
        support_pos=[int(x) for x in pos],
        support_neg=[int(targets.shape[0] - x) for x in pos],
        macro=float(np.mean(defined)) if defined else math.nan,
        micro=micro_auroc(scores, targets),
        n_items=int(targets.shape[0]),
    )


def evaluate(predictor, inputs, targets: np.ndarray, labels: Sequence[str] | None = None) -> ScoreReport:
    """Score any object with ``predict_proba(inputs) -> (n_items, n_labels)``."""
    return score_report(predictor.predict_proba(inputs), targets, labels)


@dataclass
class ZeroR:
    """Constant predictor emitting each label's training frequency."""

    frequencies: np.ndarray

    def predict_proba(self, inputs) -> np.ndarray:
        return np.tile(self.frequencies, (len(inputs), 1))


def zero_r(train_targets: np.ndarray) -> ZeroR:
    y = np.asarray(train_targets, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] == 0:
        raise EmptyDataset("0-R needs at least one training item")
    return ZeroR(y.mean(axis=0))


@dataclass
class LogRegModel:
    weight: np.ndarray  # (n_features, n_labels)
    bias: np.ndarray  # (n_labels,)
    l2: float
    steps_run: int = 0
    grad_norm: float = math.inf
    history: list[float] = field(default_factory=list, repr=False)

    def decision_function(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.shape[1] != self.weight.shape[0]:
            raise WidthMismatch(f"expected {self.weight.shape[0]} features, got {x.shape[1]}")
        return x @ self.weight + self.bias

    def predict_proba(self, features) -> np.ndarray:
        z = self.decision_function(features)
        e = np.exp(-np.abs(z))
        return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logreg_loss(x: np.ndarray, y: np.ndarray, weight: np.ndarray, bias: np.ndarray, l2: float) -> float:
    """Mean-over-items, summed-over-labels BCE plus ``l2/2 * ||weight||^2`` (bias unpenalized)."""
    z = x @ weight + bias
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(per.sum() / x.shape[0] + 0.5 * l2 * np.sum(weight * weight))


def _loss_grad(x, y, w, b, l2):
    z = x @ w + b
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    r = (p - y) / x.shape[0]
    return x.T @ r + l2 * w, r.sum(axis=0)


def logreg_fit(
    features,
    targets,
    l2: float = 1e-2,
    steps: int = 5000,
    lr: float | None = None,
    tol: float = 1e-6,
) -> LogRegModel:
    """One-vs-rest logistic regression by full-batch accelerated proximal gradient (FISTA).

    The L2 term is applied through its proximal map, so ``lr`` defaults to 1/L for the
    data term alone, L = ||X||_2^2 / (4n) with a bias column folded into X. Momentum
    restarts whenever the objective rises. Stops when the gradient norm drops below ``tol``.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise WidthMismatch(f"features {x.shape} and targets {y.shape} are inconsistent")
    n, f = x.shape
    if lr is None:
        xb = np.hstack([x, np.ones((n, 1))])
        lip = np.linalg.norm(xb, 2) ** 2 / (4.0 * n)
        lr = 1.0 / lip
    w = np.zeros((f, y.shape[1]))
    b = np.zeros(y.shape[1])
    w_prev, b_prev = w.copy(), b.copy()
    momentum_t = 1.0
    gnorm = math.inf
    prev_loss = math.inf
    model = LogRegModel(w, b, l2)
    step = 0
    for step in range(1, steps + 1):
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * momentum_t**2)) / 2.0
        beta = (momentum_t - 1.0) / t_next
        vw = w + beta * (w - w_prev)
        vb = b + beta * (b - b_prev)
        gw, gb = _loss_grad(x, y, vw, vb, 0.0)
        w_prev, b_prev = w, b
        w = (vw - lr * gw) / (1.0 + lr * l2)
        b = vb - lr * gb
        momentum_t = t_next
        loss = logreg_loss(x, y, w, b, l2)
        if loss > prev_loss:
            # adaptive restart of the momentum sequence
            momentum_t = 1.0
            w_prev, b_prev = w, b
        prev_loss = loss
        gw, gb = _loss_grad(x, y, w, b, l2)
        gnorm = float(math.sqrt(np.sum(gw * gw) + np.sum(gb * gb)))
        if gnorm < tol:
            break
    model.weight, model.bias = w, b
    model.steps_run = step
    model.grad_norm = gnorm
    return model
