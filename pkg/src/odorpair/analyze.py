"""Embedding-space analysis: per-pair linear fits, PCA reduction and KDE curves."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "RegressionFit",
    "RankDeficient",
    "pair_regression",
    "regularized_incomplete_beta",
    "f_pvalue",
    "PairFits",
    "fit_all_pairs",
    "Reduction",
    "reduce_dim",
    "kde",
    "silverman_bandwidth",
]


class RankDeficient(UserWarning):
    pass


@dataclass(frozen=True)
class RegressionFit:
    alpha1: float
    alpha2: float
    r2: float
    f_stat: float
    p_value: float
    degenerate: bool = False
    residual: np.ndarray = field(default=None, repr=False, compare=False)


def pair_regression(e1, e2, ep) -> RegressionFit:
    """Least-squares ``alpha1 * e1 + alpha2 * e2 ~ ep`` without intercept.

    ``r2`` uses SS_tot about the mean of ``ep`` and is not clamped, so it can be
    negative. F has (2, D - 2) degrees of freedom. Collinear ``e1``/``e2`` are
    solved with the pseudo-inverse and flagged ``degenerate``.
    """
    e1 = np.asarray(e1, dtype=np.float64).ravel()
    e2 = np.asarray(e2, dtype=np.float64).ravel()
    ep = np.asarray(ep, dtype=np.float64).ravel()
    d = ep.size
    if e1.size != d or e2.size != d:
        raise ValueError(f"embedding widths differ: {e1.size}, {e2.size}, {d}")
    if d < 3:
        raise ValueError("need at least 3 embedding dimensions")
    gram = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
    rhs = np.array([e1 @ ep, e2 @ ep])
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] ** 2
    degenerate = not det > 1e-12 * max(gram[0, 0] * gram[1, 1], 1e-300)
    if degenerate:
        coef = np.linalg.pinv(np.column_stack([e1, e2])) @ ep
    else:
        coef = np.linalg.solve(gram, rhs)
    a1, a2 = float(coef[0]), float(coef[1])
    resid = ep - a1 * e1 - a2 * e2
    ss_res = float(resid @ resid)
    centered = ep - ep.mean()
    ss_tot = float(centered @ centered)
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0 else -math.inf
    if ss_res > 0:
        f_stat = ((ss_tot - ss_res) / 2.0) / (ss_res / (d - 2))
    else:
        f_stat = math.inf
    p = f_pvalue(max(f_stat, 0.0), 2, d - 2)
    return RegressionFit(a1, a2, r2, f_stat, p, degenerate, resid)


def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10000) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    # the fraction converges fast on the side x < (a + 1) / (a + b + 2)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_pvalue(f_stat: float, d1: int, d2: int) -> float:
    """Upper-tail probability P(F(d1, d2) > f_stat)."""
    if d1 < 1 or d2 < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if f_stat < 0:
        raise ValueError("F statistic must be >= 0")
    if f_stat == 0:
        return 1.0
    if math.isinf(f_stat):
        return 0.0
    x = d2 / (d2 + d1 * f_stat)
    return min(1.0, max(0.0, regularized_incomplete_beta(d2 / 2.0, d1 / 2.0, x)))


# -------------------------------------------------------------------- PCA


@dataclass
class Reduction:
    projected: np.ndarray
    components: np.ndarray  # (target_dim, source_dim), rows are unit eigenvectors
    eigenvalues: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    rank_deficient: bool = False

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T


def _power_iteration(mat: np.ndarray, rng: np.random.Generator, tol: float, max_iter: int) -> tuple[float, np.ndarray]:
    v = rng.standard_normal(mat.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        # eigenvector sign is arbitrary; compare up to sign
        if w @ v < 0:
            w = -w
        lam_new = float(w @ mat @ w)
        done = np.linalg.norm(w - v) < tol and abs(lam_new - lam) <= tol * max(1.0, abs(lam_new))
        v, lam = w, lam_new
        if done:
            break
    return lam, v


def reduce_dim(embeddings, target_dim: int, tol: float = 1e-9, max_iter: int = 200_000, seed: int = 0) -> Reduction:
    """Mean-centred PCA to ``target_dim`` using power iteration with deflation.

    Components whose eigenvalue is numerically zero are replaced by zero rows and
    ``rank_deficient`` is set.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n, d = x.shape
    if target_dim > d or target_dim < 1:
        raise ValueError(f"target_dim must be in [1, {d}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    work = cov.copy()
    comps = np.zeros((target_dim, d))
    eig = np.zeros(target_dim)
    deficient = False
    floor = 1e-12 * max(total, 1e-300)
    for k in range(target_dim):
        lam, v = _power_iteration(work, rng, tol, max_iter)
        if lam <= floor:
            deficient = True
            break
        # canonical sign: largest-magnitude entry positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps[k], eig[k] = v, lam
        work = work - lam * np.outer(v, v)
    ratio = eig / total if total > 0 else np.zeros(target_dim)
    return Reduction(xc @ comps.T, comps, eig, ratio, mean, deficient)


# -------------------------------------------------------------- pair fits


@dataclass
class PairFits:
    fits: list[RegressionFit]
    mean_r2: float
    mean_p: float
    corr_alpha: float
    reduction: Reduction | None = None

    def scatter_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair_id", "alpha1", "alpha2", "r2", "p"])
        for i, f in enumerate(self.fits):
            w.writerow([i, repr(f.alpha1), repr(f.alpha2), repr(f.r2), repr(f.p_value)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"mean_r2": self.mean_r2, "mean_p": self.mean_p, "corr_alpha": self.corr_alpha, "n_pairs": len(self.fits)}


def fit_all_pairs(model, pairs: Sequence[tuple]) -> PairFits:
    """Fit ``alpha1 e1 + alpha2 e2 = ep`` for every pair.

    ``model`` must provide ``embed_molecules(graphs)`` and ``embed_pairs(pairs)``
    returning row-per-item arrays. When molecule and pair embeddings differ in
    width, molecule embeddings are first PCA-reduced (fit jointly on all of them)
    to the pair width.
    """
    if not pairs:
        raise ValueError("no pairs to fit")
    e1 = np.asarray(model.embed_molecules([a for a, _ in pairs]), dtype=np.float64)
    e2 = np.asarray(model.embed_molecules([b for _, b in pairs]), dtype=np.float64)
    ep = np.asarray(model.embed_pairs(pairs), dtype=np.float64)
    reduction = None
    if e1.shape[1] != ep.shape[1]:
        reduction = reduce_dim(np.vstack([e1, e2]), ep.shape[1])
        e1, e2 = reduction.transform(e1), reduction.transform(e2)
    fits = [pair_regression(e1[i], e2[i], ep[i]) for i in range(len(pairs))]
    a1 = np.array([f.alpha1 for f in fits])
    a2 = np.array([f.alpha2 for f in fits])
    if len(fits) > 1 and a1.std() > 0 and a2.std() > 0:
        corr = float(np.corrcoef(a1, a2)[0, 1])
    else:
        corr = math.nan
    finite_r2 = [f.r2 for f in fits if math.isfinite(f.r2)]
    return PairFits(
        fits,
        float(np.mean(finite_r2)) if finite_r2 else math.nan,
        float(np.mean([f.p_value for f in fits])),
        corr,
        reduction,
    )


# -------------------------------------------------------------------- KDE


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    sd = float(x.std(ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    if spread <= 0:
        return 1.0
    return 0.9 * spread * n ** (-0.2)


def kde(samples, bandwidth: float | None = None, grid: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE evaluated on ``grid`` evenly spaced points over [min - 3h, max + 3h]."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("kde needs at least one sample")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    xs = np.linspace(x.min() - 3 * h, x.max() + 3 * h, grid)
    z = (xs[:, None] - x[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (x.size * h * math.sqrt(2 * math.pi))
    return xs, dens
