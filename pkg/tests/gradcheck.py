"""Central finite-difference gradient checks for every op and both models."""

from __future__ import annotations

import numpy as np

from odorpair import tensor as T
from odorpair.featurize import featurize, pair_graph
from odorpair.gnn import ModelConfig, build_model
from odorpair.smiles import parse_smiles
from odorpair.train import Example

H = 1e-5
# five-point central stencil for whole-model checks; small enough to rarely cross a ReLU kink
H_MODEL = 3e-5


def _five_point(f, step) -> float:
    """Derivative of ``f(t)`` at 0 from ``f(+-h)``, ``f(+-2h)``."""
    return (8 * (f(step) - f(-step)) - (f(2 * step) - f(-2 * step))) / (12 * step)


def rel_err(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-6)))


def _away_from_zero(rng, shape, lo=0.2):
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def check(fn, arrays) -> float:
    """``fn(*tensors) -> Tensor``; contracted with a fixed random weight to get a scalar."""
    rng = np.random.default_rng(12345)
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    weight = rng.standard_normal(out.shape)
    T.backward(T.tsum(out * weight))
    worst = 0.0
    for j, (leaf, base) in enumerate(zip(leaves, arrays)):
        numeric = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            vals = []
            for sign in (1.0, -1.0):
                probe = [a.copy() for a in arrays]
                probe[j][idx] += sign * H
                with T.no_grad():
                    vals.append(float(np.sum(fn(*[T.Tensor(p) for p in probe]).data * weight)))
            numeric[idx] = (vals[0] - vals[1]) / (2 * H)
        worst = max(worst, rel_err(leaf.grad, numeric))
    return worst


def _case(name, rng):
    r, c = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    x = rng.standard_normal((r, c))
    if name == "add":
        return lambda a, b: a + b, [x, rng.standard_normal((1, c))]
    if name == "sub":
        return lambda a, b: a - b, [x, rng.standard_normal((r, c))]
    if name == "mul":
        return lambda a, b: a * b, [x, rng.standard_normal((r, 1))]
    if name == "div":
        return lambda a, b: a / b, [x, _away_from_zero(rng, (r, c), 0.5)]
    if name == "matmul":
        return T.matmul, [x, rng.standard_normal((c, int(rng.integers(1, 5))))]
    if name == "concat":
        ax = int(rng.integers(0, 2))
        return lambda a, b: T.concat([a, b], axis=ax), [x, rng.standard_normal((r, c))]
    if name == "gather_rows":
        idx = rng.integers(0, r, size=int(rng.integers(1, 7)))
        return lambda a: T.gather_rows(a, idx), [x]
    if name == "scatter_add_rows":
        idx = rng.integers(0, 3, size=r)
        return lambda a: T.scatter_add_rows(a, idx, 3), [x]
    if name == "gather_scatter":
        idx = rng.integers(0, r, size=6)
        return lambda a: T.scatter_add_rows(T.gather_rows(a, idx), idx, r), [x]
    if name == "relu":
        return T.relu, [_away_from_zero(rng, (r, c))]
    if name == "sigmoid":
        return T.sigmoid, [x * 3]
    if name == "tanh":
        return T.tanh, [x]
    if name == "exp":
        return T.exp, [x]
    if name == "log":
        return T.log, [rng.uniform(0.3, 3.0, (r, c))]
    if name == "softmax_rows":
        return T.softmax_rows, [x]
    if name == "segment_softmax":
        seg = rng.integers(0, 3, size=r * c)
        return lambda a: T.segment_softmax(a, seg, 3), [x.ravel()]
    if name == "sum_rows":
        return T.sum_rows, [x]
    if name == "mean_rows":
        return T.mean_rows, [x]
    if name == "tsum":
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        return lambda a: T.tsum(a, axis=axis), [x]
    if name == "broadcast":
        return lambda a: T.broadcast(a, (3, r, c)), [x]
    if name == "reshape":
        return lambda a: T.reshape(a, (c, r)), [x]
    if name == "slice":
        return lambda a: a[:, : max(1, c - 1)], [x]
    if name == "indexed_matvec":
        k = int(rng.integers(1, 4))
        n = int(rng.integers(1, 6))
        idx = rng.integers(0, k, size=n)
        return lambda m, v: T.indexed_matvec(m, idx, v), [rng.standard_normal((k, r, c)), rng.standard_normal((n, c))]
    if name == "bce_with_logits":
        y = (rng.random((r, c)) < 0.5).astype(float)
        w = rng.uniform(0.5, 2.0, c)
        return lambda z: T.bce_with_logits(z, y, w), [x * 2]
    if name == "composite":
        w = rng.standard_normal((c, 3))
        return lambda a, b: T.tanh(T.matmul(a, b)) * T.sigmoid(T.matmul(a, b)) + T.exp(T.matmul(a, b) * 0.1), [x, w]
    raise KeyError(name)


OPS = [
    "add", "sub", "mul", "div", "matmul", "concat", "gather_rows", "scatter_add_rows", "gather_scatter",
    "relu", "sigmoid", "tanh", "exp", "log", "softmax_rows", "segment_softmax", "sum_rows", "mean_rows",
    "tsum", "broadcast", "reshape", "slice", "indexed_matvec", "bce_with_logits", "composite",
]
MODELS = ["gin", "mpnn"]
CASES = OPS + MODELS


def op_error(name: str, seed: int) -> float:
    fn, arrays = _case(name, np.random.default_rng(seed))
    return check(fn, arrays)


_SMALL = ["CCO", "c1ccsc1", "CC(=O)N", "OC1CC1", "C#N", "CS(C)=O"]


def model_error(arch: str, seed: int, n_coords: int = 12) -> float:
    """Directional derivative along a random direction, plus randomly sampled coordinates."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(arch=arch, hidden_dim=6, label_count=3, edge_hidden=5, ffn_hidden=[5], set2set_layers=2, set2set_steps=2)
    model = build_model(cfg, seed=seed)
    # perturb the zero-initialised biases so every path is exercised
    for p in model.params.values():
        p.data += 0.1 * rng.standard_normal(p.shape)
    graphs = [featurize(parse_smiles(s)) for s in _SMALL]
    examples = []
    for _ in range(3):
        a, b = rng.choice(len(graphs), 2, replace=False)
        examples.append(Example(graphs[a], graphs[b], (rng.random(3) < 0.5).astype(float)))
    y = np.stack([e.y for e in examples])

    def loss():
        return T.bce_with_logits(model.logits(examples), y)

    for p in model.params.values():
        p.zero_grad()
    T.backward(loss())
    params = list(model.params.values())
    grads = [p.grad.copy() for p in params]

    def value():
        with T.no_grad():
            return loss().item()

    directions = [rng.standard_normal(p.shape) for p in params]
    analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, directions))
    base = [p.data.copy() for p in params]

    def along(t):
        for p, b, d in zip(params, base, directions):
            p.data[...] = b + t * d
        return value()

    worst = rel_err(analytic, _five_point(along, H_MODEL))
    along(0.0)
    for _ in range(n_coords):
        k = int(rng.integers(len(params)))
        p = params[k]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p.data[idx]

        def shift(t):
            p.data[idx] = old + t
            return value()

        worst = max(worst, rel_err(grads[k][idx], _five_point(shift, H_MODEL)))
        p.data[idx] = old
    return worst


def instance_error(i: int) -> tuple[str, float]:
    """The ``i``-th seeded instance of the suite (cycles through ops and models)."""
    name = CASES[i % len(CASES)]
    if name in MODELS:
        return name, model_error(name, seed=i)
    return name, op_error(name, seed=i)


__all__ = ["CASES", "OPS", "MODELS", "check", "op_error", "model_error", "instance_error", "rel_err", "pair_graph"]
