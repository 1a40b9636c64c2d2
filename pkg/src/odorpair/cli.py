"""Command-line entry point: ``odorpair <subcommand> ...``.

Exit codes: 0 ok, 2 input error, 3 carving search failure, 4 numeric divergence.
Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analyze import fit_all_pairs, kde
from .carve import CarveConfig, Carving, NoCoverageFound, carvable_labels, carve_search, kfold_carvings
from .dataset import FormatError, LabelVocab, MetaGraph, dependent_notes, isolate_notes, jaccard_blend_analysis, load_mono, load_pairs, NoOverlap
from .evaluate import logreg_fit, score_report, zero_r
from .featurize import featurize, write_schema
from .fingerprint import concat_pair, morgan_fingerprint, save_fingerprint_cache
from .gnn import ModelConfig, build_model
from .smiles import SmilesError
from .synthetic import synthetic_pairs, write_jsonl
from .tensor import load_checkpoint, save_checkpoint
from .train import Divergence, TrainConfig, examples_from_edges, predict, split_validation, train_model

log = logging.getLogger("odorpair")

EXIT_OK, EXIT_INPUT, EXIT_SEARCH, EXIT_DIVERGENCE = 0, 2, 3, 4


class InputError(Exception):
    pass


def _digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise InputError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _manifest(out: Path, args: argparse.Namespace, inputs: list[Path], artifacts: list[str], started: float) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    config_blob = json.dumps(config, sort_keys=True, default=str).encode()
    _write_json(
        out / "manifest.json",
        {
            "command": args.command,
            "config": config,
            "config_hash": hashlib.sha256(config_blob).hexdigest(),
            "seed": args.seed,
            "inputs": {str(p): _digest(p) for p in inputs},
            "artifacts": sorted(artifacts),
            "timings": {"wall_seconds": round(time.perf_counter() - started, 3)},
            "tool_version": __version__,
        },
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    data = synthetic_pairs(args.n_pairs, args.n_molecules, args.seed)
    write_jsonl(out / "pairs.jsonl", data.pairs)
    write_jsonl(out / "mono.jsonl", data.mono)
    return EXIT_OK


def cmd_ingest(args, started: float) -> int:
    pairs_path = _require(args.pairs, "pairs file")
    mono_path = _require(args.mono, "mono file") if args.mono else None
    vocab = LabelVocab.load(_require(args.vocab, "vocab file")) if args.vocab else None
    out = _out_dir(args)
    mg, report = load_pairs(pairs_path, vocab)
    mg.save(out / "metagraph.bin")
    mg.vocab.save(out / "vocab.txt")
    write_schema(out / "feature_schema.json")
    summary = report.to_dict()
    summary["nodes"] = mg.n_nodes
    summary["edges"] = mg.n_edges
    label_sets = [e.labels for e in mg.edges]
    notes = {
        "dependent": [list(r) for r in dependent_notes(label_sets)],
        "isolate": [list(r) for r in isolate_notes(label_sets)],
    }
    artifacts = ["metagraph.bin", "vocab.txt", "ingest_report.json", "feature_schema.json", "notes.json"]
    inputs = [pairs_path]
    if mono_path is not None:
        mono, mono_report = load_mono(mono_path)
        summary["mono"] = mono_report.to_dict()
        try:
            j = jaccard_blend_analysis(mg, mono)
            notes["jaccard"] = {"union": j.j_union, "intersection": j.j_intersection, "pairs": j.n_pairs, "skipped": j.skipped}
        except NoOverlap:
            notes["jaccard"] = None
        shutil.copyfile(mono_path, out / "mono.jsonl")
        artifacts.append("mono.jsonl")
        inputs.append(mono_path)
    _write_json(out / "ingest_report.json", summary)
    _write_json(out / "notes.json", notes)
    _manifest(out, args, inputs, artifacts, started)
    print(json.dumps({"read": report.read, "kept": report.kept, "nodes": mg.n_nodes, "edges": mg.n_edges}))
    return EXIT_OK


def _parse_ratios(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise InputError(f"bad --ratios {text!r}") from None
    return vals


def _coverage_summary(c: Carving) -> dict:
    return {
        "components": list(c.components),
        "usable": {n: int(len(u)) for n, u in zip(c.components, c.usable_edges)},
        "discarded": int(len(c.discarded)),
        "required_labels": len(c.required_labels),
        "iterations_used": c.iterations_used,
    }


def cmd_carve(args, started: float) -> int:
    mg_path = _require(args.metagraph, "metagraph")
    mg = MetaGraph.load(mg_path)
    out = _out_dir(args)
    artifacts = []
    if args.kfold:
        ratios = _parse_ratios(args.ratios)
        folds = kfold_carvings(mg, args.kfold, ratios, args.max_iters, args.seed)
        summary = {}
        for i, fold in enumerate(folds):
            name = f"carving_fold{i}.json"
            fold.save(out / name, mg)
            artifacts.append(name)
            summary[f"fold{i}"] = _coverage_summary(fold)
    else:
        cfg = CarveConfig(
            train_fraction=args.fraction,
            max_iterations=args.max_iters,
            seed=args.seed,
            objective=args.objective,
            first_valid=args.first_valid,
        )
        if args.require_all:
            cfg.required_labels = list(mg.vocab.notes)
        else:
            found = carvable_labels(mg, cfg)
            cfg.required_labels = sorted(found.best, key=mg.vocab.index.__getitem__)
        carving = carve_search(mg, cfg)
        carving.save(out / "carving.json", mg)
        artifacts.append("carving.json")
        summary = _coverage_summary(carving)
    _write_json(out / "coverage.json", summary)
    artifacts.append("coverage.json")
    _manifest(out, args, [mg_path], artifacts, started)
    return EXIT_OK


def _load_json_arg(path: str | None) -> dict:
    return json.loads(_require(path, "config file").read_text()) if path else {}


def _datasets(mg: MetaGraph, carving: Carving, labels: list[str], valid_fraction: float, seed: int):
    cache: dict = {}
    train = examples_from_edges(mg, carving.component_edges("train"), labels, cache)
    if "valid" in carving.components:
        valid = examples_from_edges(mg, carving.component_edges("valid"), labels, cache)
    else:
        train, valid = split_validation(train, valid_fraction, seed)
    test = examples_from_edges(mg, carving.component_edges("test"), labels, cache)
    return train, valid, test


def cmd_train(args, started: float) -> int:
    mg_path = _require(args.metagraph, "metagraph")
    carve_path = _require(args.carving, "carving")
    mg = MetaGraph.load(mg_path)
    carving = Carving.load(carve_path, mg)
    labels = carving.required_labels or list(mg.vocab.notes)
    model_cfg = ModelConfig.from_dict({"arch": args.arch, **_load_json_arg(args.config)})
    model_cfg.arch = args.arch
    if args.hidden_dim:
        model_cfg.hidden_dim = args.hidden_dim
    if args.arch == "gin" and not args.config:
        model_cfg.weighted_loss = False
    model_cfg.label_count = len(labels)
    train_cfg = TrainConfig.preset(args.arch, **{**_load_json_arg(args.train_config), "seed": args.seed})
    if args.epochs:
        train_cfg.epochs = args.epochs
    if args.batch_size:
        train_cfg.batch_size = args.batch_size
    if args.lr is not None:
        train_cfg.lr0 = args.lr
    if args.patience is not None:
        train_cfg.patience = None if args.patience < 0 else args.patience
    train, valid, _ = _datasets(mg, carving, labels, train_cfg.valid_fraction, train_cfg.seed)
    model, history = train_model(model_cfg, train_cfg, train, valid)
    out = _out_dir(args)
    _write_json(out / "config.json", {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "labels": labels})
    (out / "history.csv").write_text(history.csv())
    save_checkpoint(out / "checkpoint.bin", model.state_dict(), out / "checkpoint.json")
    _manifest(
        out, args, [mg_path, carve_path],
        ["config.json", "history.csv", "checkpoint.bin", "checkpoint.json"], started,
    )
    print(json.dumps({"best_epoch": history.best_epoch, "stopped_epoch": history.stopped_epoch}))
    return EXIT_OK


def _load_run(run: str):
    run_dir = Path(run)
    cfg = json.loads(_require(str(run_dir / "config.json"), "run config").read_text())
    model_cfg = ModelConfig.from_dict(cfg["model"])
    model = build_model(model_cfg)
    model.load_state_dict(load_checkpoint(_require(str(run_dir / "checkpoint.bin"), "checkpoint")))
    return model, cfg["labels"], cfg


def _fingerprint_features(mg: MetaGraph, edge_ids, cache: dict, swap: bool = False) -> np.ndarray:
    rows = []
    for k in edge_ids:
        e = mg.edges[int(k)]
        for node in (e.a, e.b):
            if node not in cache:
                cache[node] = morgan_fingerprint(mg.molecule(node))
        a, b = (e.b, e.a) if swap else (e.a, e.b)
        rows.append(concat_pair(cache[a], cache[b]))
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)


def cmd_eval(args, started: float) -> int:
    mg_path = _require(args.metagraph, "metagraph")
    carve_path = _require(args.carving, "carving")
    mg = MetaGraph.load(mg_path)
    carving = Carving.load(carve_path, mg)
    inputs = [mg_path, carve_path]
    test_ids = carving.component_edges("test")
    if args.predictor in ("gin", "mpnn"):
        if not args.run:
            raise InputError("--run is required for gin/mpnn predictors")
        model, labels, _ = _load_run(args.run)
        if model.config.arch != args.predictor:
            raise InputError(f"run holds a {model.config.arch} model, not {args.predictor}")
        test = examples_from_edges(mg, test_ids, labels)
        scores = predict(model, test)
        targets = np.stack([e.y for e in test])
        inputs.append(Path(args.run) / "checkpoint.bin")
    else:
        labels = carving.required_labels or list(mg.vocab.notes)
        train_ids = carving.component_edges("train")
        y_train = mg.label_matrix(labels)[train_ids]
        targets = mg.label_matrix(labels)[test_ids]
        if args.predictor == "zero-r":
            scores = zero_r(y_train).predict_proba(test_ids)
        else:
            cache: dict = {}
            x_train = np.vstack([
                _fingerprint_features(mg, train_ids, cache),
                _fingerprint_features(mg, train_ids, cache, swap=True),
            ])
            lr_model = logreg_fit(x_train, np.vstack([y_train, y_train]), l2=args.l2, steps=args.steps)
            scores = 0.5 * (
                lr_model.predict_proba(_fingerprint_features(mg, test_ids, cache))
                + lr_model.predict_proba(_fingerprint_features(mg, test_ids, cache, swap=True))
            )
    report = score_report(scores, targets, labels)
    out = _out_dir(args)
    report.write(out)
    np.savetxt(out / "predictions.csv", scores, delimiter=",", header=",".join(labels), comments="")
    _manifest(out, args, inputs, ["report.csv", "summary.json", "predictions.csv"], started)
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def cmd_analyze(args, started: float) -> int:
    mg_path = _require(args.metagraph, "metagraph")
    carve_path = _require(args.carving, "carving")
    mg = MetaGraph.load(mg_path)
    carving = Carving.load(carve_path, mg)
    model, labels, _ = _load_run(args.run)
    edges = carving.component_edges(args.component)
    cache: dict = {}
    pairs = []
    for k in edges:
        e = mg.edges[int(k)]
        for node in (e.a, e.b):
            if node not in cache:
                cache[node] = featurize(mg.molecule(node))
        pairs.append((cache[e.a], cache[e.b]))
    out = _out_dir(args)
    artifacts = ["scatter.csv", "summary.json"]
    fits = fit_all_pairs(model, pairs)
    (out / "scatter.csv").write_text(fits.scatter_csv())
    examples = examples_from_edges(mg, edges, labels, cache)
    probs = predict(model, examples)
    support = np.stack([e.y for e in examples]).sum(axis=0)
    top = [int(i) for i in np.argsort(-support, kind="stable")[: args.top_labels]]
    for j in top:
        xs, dens = kde(probs[:, j], grid=args.grid)
        name = f"kde_{labels[j].replace(' ', '_').replace('/', '_')}.csv"
        rows = "".join(f"{x!r},{d!r}\n" for x, d in zip(xs, dens))
        (out / name).write_text("x,density\n" + rows)
        artifacts.append(name)
    _write_json(out / "summary.json", fits.summary())
    _manifest(out, args, [mg_path, carve_path, Path(args.run) / "checkpoint.bin"], artifacts, started)
    return EXIT_OK


def cmd_fp(args, started: float) -> int:
    mg_path = _require(args.metagraph, "metagraph")
    mg = MetaGraph.load(mg_path)
    out = _out_dir(args)
    entries = {smi: morgan_fingerprint(mg.molecule(i), args.radius, args.nbits) for i, smi in enumerate(mg.molecules)}
    save_fingerprint_cache(out / "fingerprints.bin", entries)
    _manifest(out, args, [mg_path], ["fingerprints.bin"], started)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads hint")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="odorpair", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic pairs/mono fixture")
    p.add_argument("--n-pairs", type=int, default=500)
    p.add_argument("--n-molecules", type=int, default=200)

    p = sub.add_parser("ingest", parents=[common], help="build the meta-graph from JSONL records")
    p.add_argument("--pairs", required=True)
    p.add_argument("--mono")
    p.add_argument("--vocab", help="persisted vocab to extend")

    p = sub.add_parser("carve", parents=[common], help="carve train/test components")
    p.add_argument("--metagraph", required=True)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--max-iters", type=int, default=10000)
    p.add_argument("--objective", choices=["usable_edges", "kl_score"], default="usable_edges")
    p.add_argument("--first-valid", action="store_true", help="stop at the first coverage-passing draw")
    p.add_argument("--require-all", action="store_true", help="require every vocab label (default: carvable ones)")
    p.add_argument("--kfold", type=int, default=0)
    p.add_argument("--ratios", default="0.5,0.25,0.25")

    p = sub.add_parser("train", parents=[common], help="train a GIN or MPNN model")
    p.add_argument("--metagraph", required=True)
    p.add_argument("--carving", required=True)
    p.add_argument("--arch", choices=["gin", "mpnn"], default="mpnn")
    p.add_argument("--config", help="model config JSON")
    p.add_argument("--train-config", help="training config JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int, help="negative disables early stopping")

    p = sub.add_parser("eval", parents=[common], help="score a predictor on the test component")
    p.add_argument("--predictor", choices=["gin", "mpnn", "logreg-mfp", "zero-r"], required=True)
    p.add_argument("--metagraph", required=True)
    p.add_argument("--carving", required=True)
    p.add_argument("--run", help="training run directory (gin/mpnn)")
    p.add_argument("--l2", type=float, default=1e-2)
    p.add_argument("--steps", type=int, default=2000)

    p = sub.add_parser("analyze", parents=[common], help="embedding regression and KDE plot data")
    p.add_argument("--run", required=True)
    p.add_argument("--metagraph", required=True)
    p.add_argument("--carving", required=True)
    p.add_argument("--component", default="test")
    p.add_argument("--top-labels", type=int, default=5)
    p.add_argument("--grid", type=int, default=256)

    p = sub.add_parser("fp", parents=[common], help="write a Morgan fingerprint cache")
    p.add_argument("--metagraph", required=True)
    p.add_argument("--radius", type=int, default=4)
    p.add_argument("--nbits", type=int, default=2048)
    return parser


_COMMANDS = {
    "ingest": cmd_ingest,
    "carve": cmd_carve,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "fp": cmd_fp,
}


def _fail(code: int, exc: BaseException, **details) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, **details}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    started = time.perf_counter()
    try:
        if args.command == "synth":
            return cmd_synth(args)
        return _COMMANDS[args.command](args, started)
    except NoCoverageFound as exc:
        return _fail(EXIT_SEARCH, exc, deficits=exc.deficits)
    except Divergence as exc:
        return _fail(EXIT_DIVERGENCE, exc)
    except (InputError, FormatError, SmilesError, OSError, KeyError, json.JSONDecodeError, ValueError) as exc:
        return _fail(EXIT_INPUT, exc)


if __name__ == "__main__":
    sys.exit(main())
