"""GIN and edge-conditioned MPNN models for molecule pairs.

GIN: each molecule is embedded on its own (tied update MLP applied for
``mp_steps`` rounds, then mean+sum pooling); the two graph embeddings are
concatenated, mapped to a pair embedding by a two-layer network, and labels
are read out linearly.

MPNN: the pair is one disconnected graph. Messages are ``A(e_vw) h_w`` with
``A`` produced by an edge network, node states are updated by a GRU cell,
bond embeddings are folded into their atoms, and a Set2Set readout spans
the whole graph before a feed-forward head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .featurize import ATOM_FEATURES, BOND_FEATURES, MolGraph, pair_graph
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "GraphBatch",
    "ParamStore",
    "Linear",
    "Mlp",
    "GRUCell",
    "LSTMCell",
    "Set2Set",
    "GinModel",
    "MpnnModel",
    "LabelStats",
    "EmptyDataset",
    "EmptyComponent",
    "EmptyGraph",
    "gin_step",
    "readout_mean_add",
    "irlbl",
    "weighted_bce",
    "build_model",
]


class EmptyDataset(ValueError):
    pass


class EmptyComponent(ValueError):
    pass


class EmptyGraph(ValueError):
    pass


@dataclass
class ModelConfig:
    arch: str = "mpnn"  # "gin" | "mpnn"
    hidden_dim: int = 832
    mp_steps: int = 3
    set2set_steps: int = 3
    set2set_layers: int = 3
    ffn_hidden: list[int] = field(default_factory=lambda: [300])
    label_count: int = 1
    weighted_loss: bool = True
    edge_hidden: int = 32
    atom_features: int = ATOM_FEATURES
    bond_features: int = BOND_FEATURES

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = {"weighted": d.pop("weighted_loss")}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        loss = d.pop("loss", None)
        if loss is not None:
            d["weighted_loss"] = bool(loss.get("weighted", True))
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------- batching


@dataclass
class GraphBatch:
    """Several graphs stacked into one block-diagonal graph."""

    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_attr: np.ndarray
    graph_ids: np.ndarray
    n_graphs: int

    @classmethod
    def from_graphs(cls, graphs: Sequence[MolGraph]) -> "GraphBatch":
        if not graphs:
            raise EmptyDataset("cannot batch zero graphs")
        offsets = np.cumsum([0] + [g.n_nodes for g in graphs])
        edge_index = np.hstack([g.edge_index + off for g, off in zip(graphs, offsets)])
        return cls(
            x=np.vstack([g.node_features for g in graphs]),
            src=edge_index[0],
            dst=edge_index[1],
            edge_attr=np.vstack([g.edge_features for g in graphs]),
            graph_ids=np.repeat(np.arange(len(graphs)), [g.n_nodes for g in graphs]),
            n_graphs=len(graphs),
        )

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]


# ------------------------------------------------------------------ layers


class ParamStore:
    """Ordered name -> Tensor registry with seeded Glorot-uniform init."""

    def __init__(self, seed: int = 0) -> None:
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int, shape=None, gain: float = 1.0) -> Tensor:
        limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
        shape = (fan_in, fan_out) if shape is None else shape
        return self.add(name, self.rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))


class Linear:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, gain: float = 1.0) -> None:
        self.weight = store.glorot(f"{name}.weight", n_in, n_out, gain=gain)
        self.bias = store.zeros(f"{name}.bias", (n_out,))

    def __call__(self, x) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class Mlp:
    """Linear layers with ReLU between them (none after the last).

    Dropout, when given a probability and an rng, is applied after each hidden ReLU.
    """

    def __init__(self, store: ParamStore, name: str, sizes: Sequence[int]) -> None:
        self.layers = [Linear(store, f"{name}.{i}", a, b) for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]

    def __call__(self, x, dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
                if dropout > 0.0 and rng is not None:
                    keep = (rng.random(x.shape) >= dropout) / (1.0 - dropout)
                    x = x * keep
        return x


class GRUCell:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int) -> None:
        self.n = n_hidden
        self.w_in = store.glorot(f"{name}.w_in", n_in, 3 * n_hidden)
        self.w_hid = store.glorot(f"{name}.w_hid", n_hidden, 3 * n_hidden)
        self.b_in = store.zeros(f"{name}.b_in", (3 * n_hidden,))
        self.b_hid = store.zeros(f"{name}.b_hid", (3 * n_hidden,))

    def __call__(self, x, h) -> Tensor:
        n = self.n
        gi = T.matmul(x, self.w_in) + self.b_in
        gh = T.matmul(h, self.w_hid) + self.b_hid
        r = T.sigmoid(gi[:, :n] + gh[:, :n])
        z = T.sigmoid(gi[:, n : 2 * n] + gh[:, n : 2 * n])
        cand = T.tanh(gi[:, 2 * n :] + r * gh[:, 2 * n :])
        return (1.0 - z) * cand + z * h


class LSTMCell:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int) -> None:
        self.n = n_hidden
        self.w_in = store.glorot(f"{name}.w_in", n_in, 4 * n_hidden)
        self.w_hid = store.glorot(f"{name}.w_hid", n_hidden, 4 * n_hidden)
        self.bias = store.zeros(f"{name}.bias", (4 * n_hidden,))

    def __call__(self, x, h, c) -> tuple[Tensor, Tensor]:
        n = self.n
        gates = T.matmul(x, self.w_in) + T.matmul(h, self.w_hid) + self.bias
        i = T.sigmoid(gates[:, :n])
        f = T.sigmoid(gates[:, n : 2 * n])
        g = T.tanh(gates[:, 2 * n : 3 * n])
        o = T.sigmoid(gates[:, 3 * n :])
        c = f * c + i * g
        return o * T.tanh(c), c


class Set2Set:
    """Order-invariant attention readout; output width is twice the node width."""

    def __init__(self, store: ParamStore, name: str, dim: int, steps: int = 3, layers: int = 1) -> None:
        if steps < 1 or layers < 1:
            raise ValueError("set2set needs at least one step and one layer")
        self.dim = dim
        self.steps = steps
        self.cells = [LSTMCell(store, f"{name}.lstm{i}", 2 * dim if i == 0 else dim, dim) for i in range(layers)]

    def __call__(self, nodes: Tensor, graph_ids: np.ndarray, n_graphs: int) -> Tensor:
        graph_ids = np.asarray(graph_ids, dtype=np.int64)
        if nodes.shape[0] == 0 or np.bincount(graph_ids, minlength=n_graphs).min() == 0:
            raise EmptyGraph("set2set needs at least one node per graph")
        d = self.dim
        q_star = Tensor(np.zeros((n_graphs, 2 * d)))
        hs = [Tensor(np.zeros((n_graphs, d))) for _ in self.cells]
        cs = [Tensor(np.zeros((n_graphs, d))) for _ in self.cells]
        for _ in range(self.steps):
            x = q_star
            for k, cell in enumerate(self.cells):
                hs[k], cs[k] = cell(x, hs[k], cs[k])
                x = hs[k]
            q = x
            scores = T.tsum(nodes * T.gather_rows(q, graph_ids), axis=1)
            attn = T.segment_softmax(scores, graph_ids, n_graphs)
            read = T.scatter_add_rows(nodes * T.reshape(attn, (-1, 1)), graph_ids, n_graphs)
            q_star = T.concat([q, read], axis=1)
        return q_star


# ------------------------------------------------------------ graph blocks


def gin_step(h: Tensor, src: np.ndarray, dst: np.ndarray, eps: Tensor, mlp: Mlp) -> Tensor:
    """``h'_v = MLP((1 + eps) h_v + sum of neighbour states)``."""
    agg = T.scatter_add_rows(T.gather_rows(h, src), dst, h.shape[0])
    return mlp(h * (eps + 1.0) + agg)


def readout_mean_add(h: Tensor, graph_ids: np.ndarray, n_graphs: int) -> Tensor:
    """Per-graph ``concat(mean of nodes, sum of nodes)``."""
    graph_ids = np.asarray(graph_ids, dtype=np.int64)
    counts = np.bincount(graph_ids, minlength=n_graphs).astype(np.float64)
    if (counts == 0).any():
        raise EmptyComponent(f"component {int(np.argmin(counts))} has no nodes")
    total = T.scatter_add_rows(h, graph_ids, n_graphs)
    mean = total * (1.0 / counts)[:, None]
    return T.concat([mean, total], axis=1)


class _Model:
    config: ModelConfig
    store: ParamStore

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.store.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.store.params):
            missing = set(self.store.params) ^ set(state)
            raise KeyError(f"checkpoint parameter mismatch: {sorted(missing)[:5]}")
        for k, v in state.items():
            p = self.store.params[k]
            if p.data.shape != v.shape:
                raise T.ShapeMismatch(f"load {k}", p.data.shape, v.shape)
            p.data[...] = v


class GinModel(_Model):
    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        d = config.hidden_dim
        self.store = s = ParamStore(seed)
        self.input_pad = Linear(s, "gin.input_pad", config.atom_features, d)
        self.eps = s.zeros("gin.eps", (1, 1))
        self.update = Mlp(s, "gin.update", [d, d, d])
        self.pair_head = Mlp(s, "gin.pair_head", [4 * d, d, d])
        self.label_head = Linear(s, "gin.label_head", d, config.label_count)

    def node_states(self, batch: GraphBatch) -> Tensor:
        h = self.input_pad(Tensor(batch.x))
        for _ in range(self.config.mp_steps):
            h = gin_step(h, batch.src, batch.dst, self.eps, self.update)
        return h

    def graph_embeddings(self, batch: GraphBatch) -> Tensor:
        return readout_mean_add(self.node_states(batch), batch.graph_ids, batch.n_graphs)

    def forward(self, firsts: Sequence[MolGraph], seconds: Sequence[MolGraph], dropout: float = 0.0,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Pair embeddings (B, D) and label logits (B, L)."""
        n = len(firsts)
        if n != len(seconds):
            raise T.ShapeMismatch("gin forward", (n,), (len(seconds),))
        emb = self.graph_embeddings(GraphBatch.from_graphs(list(firsts) + list(seconds)))
        both = T.concat([emb[:n], emb[n:]], axis=1)
        pair = self.pair_head(both, dropout, rng)
        return pair, self.label_head(pair)

    def logits(self, examples, dropout: float = 0.0, rng=None) -> Tensor:
        return self.forward([e.graph_a for e in examples], [e.graph_b for e in examples], dropout, rng)[1]

    def embed_molecules(self, graphs: Sequence[MolGraph]) -> np.ndarray:
        with T.no_grad():
            return self.graph_embeddings(GraphBatch.from_graphs(graphs)).data

    def embed_pairs(self, pairs: Sequence[tuple[MolGraph, MolGraph]]) -> np.ndarray:
        with T.no_grad():
            return self.forward([a for a, _ in pairs], [b for _, b in pairs])[0].data


class MpnnModel(_Model):
    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        d = config.hidden_dim
        self.store = s = ParamStore(seed)
        self.embed_atoms = Linear(s, "mpnn.embed_atoms", config.atom_features, d)
        # edge network output is scaled so A(e) h starts with roughly unit gain
        self.edge_net = Mlp(s, "mpnn.edge_net", [config.bond_features, config.edge_hidden, d * d])
        self.edge_net.layers[-1].weight.data *= 1.0 / math.sqrt(d)
        self.gru = GRUCell(s, "mpnn.gru", d, d)
        self.embed_bonds = Linear(s, "mpnn.embed_bonds", config.bond_features, d)
        self.fold = Linear(s, "mpnn.fold", 2 * d, d)
        self.set2set = Set2Set(s, "mpnn.set2set", d, config.set2set_steps, config.set2set_layers)
        self.head = Mlp(s, "mpnn.head", [2 * d, *config.ffn_hidden, config.label_count])

    def node_states(self, batch: GraphBatch) -> Tensor:
        d = self.config.hidden_dim
        h = T.relu(self.embed_atoms(Tensor(batch.x)))
        if batch.src.size:
            kinds, kind_of_edge = np.unique(batch.edge_attr, axis=0, return_inverse=True)
            mats = T.reshape(self.edge_net(Tensor(kinds)), (len(kinds), d, d))
            kind_of_edge = kind_of_edge.reshape(-1)
        for _ in range(self.config.mp_steps):
            if batch.src.size:
                msgs = T.indexed_matvec(mats, kind_of_edge, T.gather_rows(h, batch.src))
                m = T.scatter_add_rows(msgs, batch.dst, batch.n_nodes)
            else:
                m = Tensor(np.zeros((batch.n_nodes, d)))
            h = self.gru(m, h)
        return h

    def embed(self, batch: GraphBatch) -> Tensor:
        """Set2Set graph embedding (G, 2D) after folding bond embeddings into atoms."""
        h = self.node_states(batch)
        d = self.config.hidden_dim
        if batch.src.size:
            bonds = T.scatter_add_rows(self.embed_bonds(Tensor(batch.edge_attr)), batch.dst, batch.n_nodes)
        else:
            bonds = Tensor(np.zeros((batch.n_nodes, d)))
        folded = self.fold(T.concat([h, bonds], axis=1))
        return self.set2set(folded, batch.graph_ids, batch.n_graphs)

    def forward(self, graphs: Sequence[MolGraph], dropout: float = 0.0,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Embeddings (G, 2D) and label logits (G, L). Each graph may be a single molecule or a pair union."""
        emb = self.embed(GraphBatch.from_graphs(graphs))
        return emb, self.head(emb, dropout, rng)

    def probs(self, graphs: Sequence[MolGraph]) -> np.ndarray:
        with T.no_grad():
            return T.sigmoid(self.forward(graphs)[1]).data

    def logits(self, examples, dropout: float = 0.0, rng=None) -> Tensor:
        return self.forward([e.joint for e in examples], dropout, rng)[1]

    def embed_molecules(self, graphs: Sequence[MolGraph]) -> np.ndarray:
        with T.no_grad():
            return self.embed(GraphBatch.from_graphs(graphs)).data

    def embed_pairs(self, pairs: Sequence[tuple[MolGraph, MolGraph]]) -> np.ndarray:
        with T.no_grad():
            return self.embed(GraphBatch.from_graphs([pair_graph(a, b) for a, b in pairs])).data


def build_model(config: ModelConfig, seed: int = 0) -> GinModel | MpnnModel:
    if config.arch == "gin":
        return GinModel(config, seed)
    if config.arch == "mpnn":
        return MpnnModel(config, seed)
    raise ValueError(f"unknown architecture {config.arch!r}")


# ------------------------------------------------------------------ losses


@dataclass(frozen=True)
class LabelStats:
    counts: np.ndarray
    irlbl: np.ndarray
    weights: np.ndarray
    imputed: tuple[int, ...] = ()  # label columns with zero count


def irlbl(labels) -> LabelStats:
    """Imbalance ratio per label: majority-label count divided by each label's count.

    ``labels`` is an (n_items, n_labels) multi-hot matrix or a 1-D count vector.
    Labels never observed get the weight of the rarest observed label.
    """
    arr = np.asarray(labels, dtype=np.float64)
    counts = arr if arr.ndim == 1 else arr.sum(axis=0)
    if counts.size == 0 or counts.max() <= 0:
        raise EmptyDataset("no label occurrences")
    observed = counts > 0
    ratio = np.empty_like(counts)
    ratio[observed] = counts.max() / counts[observed]
    ratio[~observed] = ratio[observed].max()
    return LabelStats(counts, ratio, np.log1p(ratio), tuple(int(i) for i in np.flatnonzero(~observed)))


def weighted_bce(outputs, targets, weights=None, from_logits: bool = True) -> Tensor:
    """``sum_l w_l * sum_i BCE(p_il, y_il)``; unit weights when ``weights`` is None.

    With ``from_logits=False`` the outputs are probabilities and are clipped to
    ``[1e-12, 1 - 1e-12]`` before taking logs.
    """
    if from_logits:
        return T.bce_with_logits(outputs, targets, weights)
    p = outputs if isinstance(outputs, Tensor) else Tensor(outputs)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != p.shape:
        raise T.ShapeMismatch("weighted_bce", p.shape, y.shape)
    w = np.ones(p.shape[-1]) if weights is None else np.asarray(weights, dtype=np.float64)
    clipped = np.clip(p.data, 1e-12, 1.0 - 1e-12)
    # route gradients through p while using the clipped values
    pc = p + Tensor(clipped - p.data)
    per = -(T.log(pc) * y + T.log(1.0 - pc) * (1.0 - y))
    return T.tsum(per * w)
