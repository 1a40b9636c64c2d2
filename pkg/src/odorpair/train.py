"""Training loops, early stopping, random hyperparameter search and seed ensembles."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .carve import Carving
from .dataset import MetaGraph
from .evaluate import macro_auroc
from .featurize import MolGraph, featurize, pair_graph
from .gnn import EmptyDataset, ModelConfig, build_model, irlbl
from .tensor import ScheduleConfig, lr_schedule

__all__ = [
    "Example",
    "TrainConfig",
    "RunHistory",
    "Divergence",
    "examples_from_edges",
    "examples_from_mono",
    "split_validation",
    "train_model",
    "predict",
    "sample_config",
    "random_search",
    "TrialResult",
    "fold_objective",
    "seed_ensemble",
    "EnsembleResult",
    "MPNN_SEARCH_SPACE",
    "GIN_SEARCH_SPACE",
]

log = logging.getLogger(__name__)


class Divergence(RuntimeError):
    pass


@dataclass(frozen=True)
class Example:
    """One supervised item: a pair (``graph_b`` set) or a single molecule."""

    graph_a: MolGraph
    graph_b: MolGraph | None
    y: np.ndarray

    @property
    def joint(self) -> MolGraph:
        return self.graph_a if self.graph_b is None else pair_graph(self.graph_a, self.graph_b)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr0: float = 1e-3
    schedule: str = "constant"  # constant | exponential_steps | fractional_span
    decay_rate: float = 0.5
    decay_steps: int = 840
    decay: float = 0.08
    weight_decay: float = 0.0
    dropout: float = 0.0
    patience: int | None = 0  # None disables early stopping
    seed: int = 0
    valid_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.patience is not None and self.patience < 0:
            raise ValueError("patience must be >= 0")

    def schedule_config(self) -> ScheduleConfig:
        return ScheduleConfig(
            kind=self.schedule,
            lr0=self.lr0,
            rate=self.decay_rate,
            decay_steps=self.decay_steps,
            decay=self.decay,
            epochs=self.epochs,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def preset(cls, arch: str, **overrides) -> "TrainConfig":
        """Architecture defaults for the learning-rate schedule.

        GIN decays geometrically to 0.08·lr0 over the first 90% of epochs. MPNN halves
        the rate every 840 steps and adds L2 weight decay of 1e-5.
        """
        if arch == "gin":
            base = {"schedule": "fractional_span", "decay": 0.08}
        elif arch == "mpnn":
            base = {"schedule": "exponential_steps", "decay_rate": 0.5, "decay_steps": 840, "weight_decay": 1e-5}
        else:
            raise ValueError(f"unknown arch {arch!r}")
        return cls.from_dict({**base, **overrides})


@dataclass
class RunHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    valid_auroc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    wall_time: float = 0.0

    def csv(self) -> str:
        lines = ["epoch,train_loss,valid_loss,valid_auroc,lr"]
        for i in range(len(self.train_loss)):
            lines.append(
                f"{i + 1},{self.train_loss[i]!r},{self.valid_loss[i]!r},{self.valid_auroc[i]!r},{self.lr[i]!r}"
            )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- datasets


def examples_from_edges(
    mg: MetaGraph,
    edge_ids: Sequence[int],
    labels: Sequence[str],
    cache: dict[int, MolGraph] | None = None,
) -> list[Example]:
    """Pair examples for selected meta-graph edges, with targets over ``labels``."""
    cache = {} if cache is None else cache
    col = {n: i for i, n in enumerate(labels)}
    out = []
    for k in edge_ids:
        edge = mg.edges[int(k)]
        for node in (edge.a, edge.b):
            if node not in cache:
                cache[node] = featurize(mg.molecule(node))
        y = np.zeros(len(labels))
        for note in edge.labels:
            if note in col:
                y[col[note]] = 1.0
        out.append(Example(cache[edge.a], cache[edge.b], y))
    return out


def examples_from_mono(records, labels: Sequence[str]) -> list[Example]:
    from .smiles import parse_smiles

    col = {n: i for i, n in enumerate(labels)}
    out = []
    for rec in records:
        y = np.zeros(len(labels))
        for note in rec.labels:
            if note in col:
                y[col[note]] = 1.0
        out.append(Example(featurize(parse_smiles(rec.smiles)), None, y))
    return out


def split_validation(examples: Sequence[Example], fraction: float, seed: int) -> tuple[list[Example], list[Example]]:
    """Hold out a seeded random ``fraction`` of examples for early stopping."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    n_valid = int(round(fraction * len(examples)))
    valid = [examples[i] for i in sorted(order[:n_valid])]
    train = [examples[i] for i in sorted(order[n_valid:])]
    return train, valid


# ---------------------------------------------------------------- training


def _targets(examples: Sequence[Example]) -> np.ndarray:
    return np.stack([e.y for e in examples])


def predict(model, examples: Sequence[Example], batch_size: int = 256) -> np.ndarray:
    """Sigmoid label probabilities, (n_examples, n_labels)."""
    out = []
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            out.append(T.sigmoid(model.logits(examples[i : i + batch_size])).data)
    return np.vstack(out) if out else np.zeros((0, model.config.label_count))


def _mean_loss(model, examples, weights, batch_size: int = 256) -> float:
    total = 0.0
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i : i + batch_size]
            total += T.bce_with_logits(model.logits(chunk), _targets(chunk), weights).item()
    return total / len(examples)


def train_model(
    model_config: ModelConfig,
    cfg: TrainConfig,
    train_set: Sequence[Example],
    valid_set: Sequence[Example] = (),
    label_weights: np.ndarray | None = None,
):
    """Mini-batch Adam training with early stopping on validation loss.

    Stops once validation loss has failed to improve for ``patience + 1``
    consecutive epochs and returns the model restored to its best epoch.

    Returns:
        (model, history)
    """
    if not train_set:
        raise EmptyDataset("training set is empty")
    if cfg.patience is not None and not valid_set:
        raise EmptyDataset("early stopping needs a validation set")
    model = build_model(model_config, seed=cfg.seed)
    y_train = _targets(train_set)
    if label_weights is None and model_config.weighted_loss:
        label_weights = irlbl(y_train).weights
    opt = T.Adam(model.params.values(), weight_decay=cfg.weight_decay)
    sched = cfg.schedule_config()
    rng = np.random.default_rng(cfg.seed)
    history = RunHistory()
    best_loss = math.inf
    best_state = model.state_dict()
    stale = 0
    step = 0
    y_valid = _targets(valid_set) if valid_set else None
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        lr = lr_schedule(sched, step=step, epoch=epoch)
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_set[j] for j in order[i : i + cfg.batch_size]]
            if sched.kind == "exponential_steps":
                lr = lr_schedule(sched, step=step, epoch=epoch)
            opt.zero_grad()
            loss = T.bce_with_logits(model.logits(batch, cfg.dropout, rng), _targets(batch), label_weights)
            value = loss.item()
            if not math.isfinite(value):
                raise Divergence(f"non-finite training loss at epoch {epoch + 1}")
            epoch_loss += value
            T.backward(loss * (1.0 / len(batch)))
            opt.step(lr)
            step += 1
        history.train_loss.append(epoch_loss / len(train_set))
        history.lr.append(lr)
        if valid_set:
            v_loss = _mean_loss(model, valid_set, label_weights)
            if not math.isfinite(v_loss):
                raise Divergence(f"non-finite validation loss at epoch {epoch + 1}")
            history.valid_loss.append(v_loss)
            history.valid_auroc.append(macro_auroc(predict(model, valid_set), y_valid))
        else:
            v_loss = history.train_loss[-1]
            history.valid_loss.append(math.nan)
            history.valid_auroc.append(math.nan)
        history.stopped_epoch = epoch + 1
        log.debug("epoch %d train %.5f valid %.5f", epoch + 1, history.train_loss[-1], v_loss)
        if v_loss < best_loss:
            best_loss = v_loss
            best_state = model.state_dict()
            history.best_epoch = epoch + 1
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale > cfg.patience:
                break
    model.load_state_dict(best_state)
    history.wall_time = time.perf_counter() - start
    return model, history


# ----------------------------------------------------------- random search

# Table-style search spaces; lists are sampled uniformly, dicts describe ranges.
MPNN_SEARCH_SPACE: dict[str, Any] = {
    "dropout": [0.12, 0.25, 0.5],
    "weight_decay": [1e-3, 1e-4, 1e-5],
    "lr0": [0.001, 0.0001, 0.005, 0.0005],
    "decay_rate": [0.25, 0.5, 0.75],
    "decay_steps": [42 * 5, 42 * 10, 42 * 15, 42 * 20],
    "set2set_steps": [2, 3, 4],
    "set2set_layers": [2, 3, 4],
    "ffn_hidden": [[200], [60, 60], [300], [500, 500], [300, 300]],
}

GIN_SEARCH_SPACE: dict[str, Any] = {
    "epochs": {"low": 100, "high": 500, "int": True},
    "lr0": {"low": 1e-4, "high": 1e-1, "log": True},
    "decay": {"low": 1e-5, "high": 1e-1, "log": True},
    "hidden_dim": {"low": 32, "high": 1024, "int": True},
    "mp_steps": {"low": 1, "high": 13, "int": True},
}


def sample_config(space: dict[str, Any], rng: np.random.Generator) -> dict[str, Any]:
    """Draw one configuration; keys are visited in sorted order for reproducibility."""
    out = {}
    for key in sorted(space):
        choice = space[key]
        if isinstance(choice, dict):
            lo, hi = choice["low"], choice["high"]
            if choice.get("log"):
                value = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
            else:
                value = float(rng.uniform(lo, hi))
            out[key] = int(round(value)) if choice.get("int") else value
        else:
            out[key] = copy.deepcopy(choice[int(rng.integers(len(choice)))])
    return out


@dataclass
class TrialResult:
    index: int
    config: dict
    fold_scores: list[float]
    mean_score: float


def random_search(
    space: dict[str, Any],
    trials: int,
    folds: Sequence[Any],
    objective: Callable[[dict, Any], float],
    seed: int = 0,
) -> tuple[dict, list[TrialResult]]:
    """Uniform random search scored by mean validation AUROC over folds.

    ``objective(config, fold)`` returns a validation score for one fold. Ties
    go to the earlier trial. Returns the best config and the per-trial audit log.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    report = []
    for t in range(trials):
        config = sample_config(space, rng)
        scores = [float(objective(config, fold)) for fold in folds]
        finite = [s for s in scores if math.isfinite(s)]
        mean = float(np.mean(finite)) if finite else -math.inf
        report.append(TrialResult(t, config, scores, mean))
        log.info("trial %d score %.4f %s", t, mean, config)
    best = max(report, key=lambda r: (r.mean_score, -r.index))
    return best.config, report


def _split_overrides(base_model: ModelConfig, base_train: TrainConfig, overrides: dict) -> tuple[ModelConfig, TrainConfig]:
    m = ModelConfig.from_dict({**base_model.to_dict(), **{k: v for k, v in overrides.items() if k in ModelConfig.__dataclass_fields__}})
    t = TrainConfig.from_dict({**base_train.to_dict(), **{k: v for k, v in overrides.items() if k in TrainConfig.__dataclass_fields__}})
    if "decay_steps" in overrides or "decay_rate" in overrides:
        t.schedule = "exponential_steps"
    return m, t


def fold_objective(mg: MetaGraph, base_model: ModelConfig, base_train: TrainConfig) -> Callable[[dict, Carving], float]:
    """Objective for :func:`random_search`: train on a fold's train part, score macro AUROC on its valid part."""
    cache: dict[int, MolGraph] = {}

    def objective(overrides: dict, fold: Carving) -> float:
        labels = fold.required_labels or fold.labels
        model_cfg, train_cfg = _split_overrides(base_model, base_train, overrides)
        model_cfg.label_count = len(labels)
        tr = examples_from_edges(mg, fold.component_edges("train"), labels, cache)
        va = examples_from_edges(mg, fold.component_edges("valid"), labels, cache)
        model, _ = train_model(model_cfg, train_cfg, tr, va)
        return macro_auroc(predict(model, va), _targets(va))

    return objective


# ----------------------------------------------------------------- ensemble


@dataclass
class EnsembleResult:
    scores: list[float]
    mean: float
    ci: tuple[float, float]
    ensemble: float
    probabilities: list[np.ndarray] = field(default_factory=list, repr=False)


def seed_ensemble(
    model_config: ModelConfig,
    cfg: TrainConfig,
    train_set: Sequence[Example],
    valid_set: Sequence[Example],
    test_set: Sequence[Example],
    n: int = 3,
    seeds: Sequence[int] | None = None,
) -> EnsembleResult:
    """Train ``n`` replicas (seeds ``cfg.seed + i``), report mean macro AUROC,
    its 95% t-interval across replicas, and the AUROC of averaged probabilities."""
    if n < 2:
        raise ValueError("ensemble needs n >= 2")
    seeds = [cfg.seed + i for i in range(n)] if seeds is None else list(seeds)
    y_test = _targets(test_set)
    probs, scores = [], []
    for s in seeds:
        replica_cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": s})
        model, _ = train_model(model_config, replica_cfg, train_set, valid_set)
        p = predict(model, test_set)
        probs.append(p)
        scores.append(macro_auroc(p, y_test))
    mean = float(np.mean(scores))
    sem = float(np.std(scores, ddof=1) / math.sqrt(len(scores)))
    half = float(stats.t.ppf(0.975, len(scores) - 1) * sem)
    ensemble = macro_auroc(np.mean(probs, axis=0), y_test)
    return EnsembleResult(scores, mean, (mean - half, mean + half), ensemble, probs)
