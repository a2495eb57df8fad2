"""Graph embedding network with per-step update functions and classifier heads.

A batch of graphs is packed into flat node/edge/treelet index arrays; every
update function then runs once over all rows of its kind, with batch
normalisation statistics kept separate per graph.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .checkpoint import load_arrays, save_arrays
from .graph import VAR, VARFUNC, FormulaGraph, treelet_arrays, treelet_membership_counts
from .optim import OptimizerState

UNKNOWN = "UNKNOWN"
SPECIAL_TOKENS = (VAR, VARFUNC, UNKNOWN)
BASIC_FUNCS = ("P", "I", "O")
ORDER_FUNCS = ("L", "H", "R")


class StepExhausted(IndexError):
    pass


class MissingConjecture(ValueError):
    pass


class VocabMismatch(ValueError):
    pass


# --------------------------------------------------------------------------
# Vocabulary


class Vocabulary:
    """Sorted constant names followed by ``VAR``, ``VARFUNC`` and ``UNKNOWN``."""

    def __init__(self, constants: Iterable[str] = ()):
        names = sorted(set(constants) - set(SPECIAL_TOKENS))
        self.tokens = tuple(names) + SPECIAL_TOKENS
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        self.unknown = self._index[UNKNOWN]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, name):
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self):
        return hash(self.tokens)

    def index(self, name: str) -> int:
        return self._index.get(name, self.unknown)

    def encode(self, names: Sequence[str]) -> np.ndarray:
        get, unk = self._index.get, self.unknown
        return np.fromiter((get(n, unk) for n in names), dtype=np.int64, count=len(names))

    def dumps(self) -> str:
        return "".join(tok + "\n" for tok in self.tokens)

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        tokens = [ln for ln in text.splitlines() if ln]
        vocab = cls(tokens)
        if vocab.tokens != tuple(tokens):
            raise VocabMismatch("vocabulary file is not in canonical order")
        return vocab


# --------------------------------------------------------------------------
# Configuration and parameters


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 64
    steps: int = 1
    order_preserving: bool = False
    hidden: int = 0  # 0 means "same as dim"
    clf_hidden: int = 0
    setting: str = "conditional"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.dim < 1 or self.steps < 0:
            raise ValueError("need dim >= 1 and steps >= 0")
        if self.setting not in ("conditional", "unconditional"):
            raise ValueError(f"unknown setting {self.setting!r}")
        if not self.hidden:
            self.hidden = self.dim
        if not self.clf_hidden:
            self.clf_hidden = self.dim

    @property
    def funcs(self) -> tuple:
        return BASIC_FUNCS + ORDER_FUNCS if self.order_preserving else BASIC_FUNCS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in names:
                continue
            if isinstance(v, str):
                v = _coerce(v, names[k])
            kw[k] = v
        return cls(**kw)


def _coerce(text: str, type_name):
    t = str(type_name)
    if "bool" in t:
        return text.strip().lower() in ("1", "true", "yes", "on")
    if "int" in t:
        return int(text)
    if "float" in t:
        return float(text)
    return text


def _input_width(func: str, dim: int) -> int:
    return {"P": dim, "I": 2 * dim, "O": 2 * dim}.get(func, 3 * dim)


class ModelParams:
    """Trainable arrays plus normalisation buffers, keyed by dotted names."""

    def __init__(self, config: ModelConfig, arrays: dict, buffers: dict):
        self.config = config
        self.arrays = arrays
        self.buffers = buffers

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        dt = np.dtype(config.dtype)
        arrays, buffers = {}, {}
        d = config.dim

        def dense(name, n_in, n_out):
            arrays[name + ".W"] = (rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)).astype(dt)
            arrays[name + ".b"] = np.zeros(n_out, dtype=dt)

        def norm(name, width):
            arrays[name + ".gamma"] = np.ones(width, dtype=dt)
            arrays[name + ".beta"] = np.zeros(width, dtype=dt)
            buffers[name + ".mean"] = np.zeros(width, dtype=dt)
            buffers[name + ".var"] = np.ones(width, dtype=dt)

        arrays["proj"] = rng.standard_normal((config.vocab_size, d)).astype(dt)
        for t in range(config.steps):
            for f in config.funcs:
                prefix = f"step{t}.F{f}"
                dense(prefix + ".fc0", _input_width(f, d), config.hidden)
                norm(prefix + ".bn0", config.hidden)
                dense(prefix + ".fc1", config.hidden, d)
                norm(prefix + ".bn1", d)
        head_in = 2 * d if config.setting == "conditional" else d
        for t in range(config.steps + 1):
            dense(f"head{t}.fc0", head_in, config.clf_hidden)
            norm(f"head{t}.bn0", config.clf_hidden)
            dense(f"head{t}.fc1", config.clf_hidden, 2)
        return cls(config, arrays, buffers)

    def copy(self) -> "ModelParams":
        return ModelParams(
            ModelConfig.from_dict(self.config.to_dict()),
            {k: v.copy() for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        cfg = ModelConfig.from_dict({**self.config.to_dict(), "dtype": np.dtype(dtype).name})
        return ModelParams(
            cfg,
            {k: v.astype(dtype) for k, v in self.arrays.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


# --------------------------------------------------------------------------
# Packing


@dataclass
class PackedGraphs:
    n_graphs: int
    n_nodes: int
    tokens: np.ndarray
    node_graph: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_graph: np.ndarray
    inv_degree: np.ndarray
    treelets: np.ndarray  # (m, 3) left, head, right
    treelet_graph: np.ndarray
    inv_treelet_count: np.ndarray
    offsets: np.ndarray


def _graph_index(graph: FormulaGraph) -> dict:
    cached = graph.__dict__.get("_index_arrays")
    if cached is not None:
        return cached
    edges = graph.edges()
    src = np.array([e[0] for e in edges], dtype=np.int64)
    dst = np.array([e[2] for e in edges], dtype=np.int64)
    out = {
        "src": src,
        "dst": dst,
        "degree": graph.degree(),
        "treelets": treelet_arrays(graph),
        "e": treelet_membership_counts(graph),
    }
    # FormulaGraph is frozen; cache the derived arrays alongside it
    graph.__dict__["_index_arrays"] = out
    return out


def _inverse(counts: np.ndarray) -> np.ndarray:
    out = np.zeros(len(counts), dtype=np.float64)
    nz = counts > 0
    out[nz] = 1.0 / counts[nz]
    return out


def pack_graphs(graphs: Sequence[FormulaGraph], vocab: Vocabulary) -> PackedGraphs:
    sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    tokens, src, dst, eg, deg, tl, tg, ev = [], [], [], [], [], [], [], []
    for gi, g in enumerate(graphs):
        idx = _graph_index(g)
        off = offsets[gi]
        tokens.append(vocab.encode(g.names))
        src.append(idx["src"] + off)
        dst.append(idx["dst"] + off)
        eg.append(np.full(len(idx["src"]), gi, dtype=np.int64))
        deg.append(idx["degree"])
        tl.append(idx["treelets"] + off)
        tg.append(np.full(len(idx["treelets"]), gi, dtype=np.int64))
        ev.append(idx["e"])
    cat = lambda xs, shape=(0,): np.concatenate(xs) if xs else np.zeros(shape, dtype=np.int64)
    return PackedGraphs(
        n_graphs=len(graphs),
        n_nodes=int(offsets[-1]),
        tokens=cat(tokens),
        node_graph=np.repeat(np.arange(len(graphs), dtype=np.int64), sizes),
        src=cat(src),
        dst=cat(dst),
        edge_graph=cat(eg),
        inv_degree=_inverse(cat(deg)),
        treelets=cat(tl, (0, 3)).reshape(-1, 3),
        treelet_graph=cat(tg),
        inv_treelet_count=_inverse(cat(ev)),
        offsets=offsets,
    )


# --------------------------------------------------------------------------
# Forward pieces


class _Ctx:
    """Per-forward settings shared by the building blocks."""

    def __init__(self, tape: ag.Tape, params: ModelParams, training: bool, update_stats: bool):
        self.tape = tape
        self.params = params
        self.cfg = params.config
        self.training = training
        self.update_stats = update_stats

    def p(self, name: str) -> ag.Tensor:
        return self.tape.param(name, self.params.arrays[name])

    def running(self, name: str) -> tuple:
        return self.params.buffers[name + ".mean"], self.params.buffers[name + ".var"]


def _update_function(ctx: _Ctx, prefix: str, x: ag.Tensor, segment, n_segments) -> ag.Tensor:
    """Two [affine -> per-graph batchnorm -> relu] blocks."""
    for k in (0, 1):
        h = ag.affine(x, ctx.p(f"{prefix}.fc{k}.W"), ctx.p(f"{prefix}.fc{k}.b"))
        bn = f"{prefix}.bn{k}"
        h = ag.segment_batchnorm(
            h,
            ctx.p(bn + ".gamma"),
            ctx.p(bn + ".beta"),
            segment,
            n_segments,
            ctx.running(bn),
            momentum=ctx.cfg.bn_momentum,
            eps=ctx.cfg.bn_eps,
            update_running=ctx.update_stats,
        )
        x = ag.relu(h)
    return x


def _step(ctx: _Ctx, x: ag.Tensor, pk: PackedGraphs, t: int, order_preserving: bool) -> ag.Tensor:
    n, g = pk.n_nodes, pk.n_graphs
    terms = [x]
    if len(pk.src):
        pair = ag.concat_cols([ag.gather_rows(x, pk.src), ag.gather_rows(x, pk.dst)])
        f_in = _update_function(ctx, f"step{t}.FI", pair, pk.edge_graph, g)
        f_out = _update_function(ctx, f"step{t}.FO", pair, pk.edge_graph, g)
        agg = ag.add(ag.segment_sum(f_in, pk.dst, n), ag.segment_sum(f_out, pk.src, n))
        terms.append(ag.scale_rows(agg, pk.inv_degree))
    if order_preserving and len(pk.treelets):
        left, head, right = pk.treelets[:, 0], pk.treelets[:, 1], pk.treelets[:, 2]
        tri = ag.concat_cols([ag.gather_rows(x, left), ag.gather_rows(x, head), ag.gather_rows(x, right)])
        parts = [
            ag.segment_sum(_update_function(ctx, f"step{t}.F{f}", tri, pk.treelet_graph, g), target, n)
            for f, target in (("L", left), ("H", head), ("R", right))
        ]
        terms.append(ag.scale_rows(ag.add_n(parts), pk.inv_treelet_count))
    return _update_function(ctx, f"step{t}.FP", ag.add_n(terms), pk.node_graph, g)


def _embed(ctx: _Ctx, pk: PackedGraphs) -> tuple[list, list]:
    """Node states and pooled graph embeddings for steps ``0..T``."""
    x = ag.gather_rows(ctx.p("proj"), pk.tokens)
    states = [x]
    pooled = [ag.segment_max(x, pk.node_graph, pk.n_graphs)]
    for t in range(ctx.cfg.steps):
        x = _step(ctx, x, pk, t, ctx.cfg.order_preserving)
        states.append(x)
        pooled.append(ag.segment_max(x, pk.node_graph, pk.n_graphs))
    return states, pooled


def _head(ctx: _Ctx, t: int, inp: ag.Tensor) -> ag.Tensor:
    h = ag.affine(inp, ctx.p(f"head{t}.fc0.W"), ctx.p(f"head{t}.fc0.b"))
    bn = f"head{t}.bn0"
    h = ag.batchnorm(
        h,
        ctx.p(bn + ".gamma"),
        ctx.p(bn + ".beta"),
        mode="batch-stats" if ctx.training else "running-stats",
        running=ctx.running(bn),
        momentum=ctx.cfg.bn_momentum,
        eps=ctx.cfg.bn_eps,
        update_running=ctx.update_stats,
    )
    h = ag.relu(h)
    return ag.affine(h, ctx.p(f"head{t}.fc1.W"), ctx.p(f"head{t}.fc1.b"))


def forward_pairs(
    tape: ag.Tape,
    params: ModelParams,
    vocab: Vocabulary,
    conjectures: Optional[Sequence[FormulaGraph]],
    statements: Sequence[FormulaGraph],
    training: bool = False,
    update_stats: bool = False,
) -> list:
    """Logits of every step's head for a batch of (conjecture, statement) pairs.

    Graphs repeated within the batch (by identity) are embedded once.  In the
    unconditional setting ``conjectures`` is ignored and may be ``None``.
    """
    cfg = params.config
    conditional = cfg.setting == "conditional"
    if conditional and conjectures is None:
        raise MissingConjecture("conditional setting needs conjecture graphs")
    unique: dict = {}
    order: list = []

    def slot(g):
        key = id(g)
        if key not in unique:
            unique[key] = len(order)
            order.append(g)
        return unique[key]

    stmt_idx = np.array([slot(g) for g in statements], dtype=np.int64)
    conj_idx = np.array([slot(g) for g in conjectures], dtype=np.int64) if conditional else None
    ctx = _Ctx(tape, params, training, update_stats)
    _, pooled = _embed(ctx, pack_graphs(order, vocab))
    logits = []
    for t, emb in enumerate(pooled):
        if conditional:
            inp = ag.concat_cols([ag.gather_rows(emb, conj_idx), ag.gather_rows(emb, stmt_idx)])
        else:
            inp = ag.gather_rows(emb, stmt_idx)
        logits.append(_head(ctx, t, inp))
    return logits


def supervision_loss(logits: Sequence[ag.Tensor], labels) -> ag.Tensor:
    """Sum over steps of the mean cross-entropy of each head."""
    return ag.add_n([ag.softmax_cross_entropy(z, labels) for z in logits])


# --------------------------------------------------------------------------
# Single-graph API


@dataclass
class EmbeddingState:
    t: int
    x: np.ndarray


@dataclass
class GraphEmbedding:
    pooled: list  # one vector per step 0..T
    states: list  # node matrices per step 0..T

    @property
    def vector(self) -> np.ndarray:
        return self.pooled[-1]


def _eval_ctx(params: ModelParams) -> _Ctx:
    return _Ctx(ag.Tape(record=False), params, training=False, update_stats=False)


def initial_embeddings(graph: FormulaGraph, vocab: Vocabulary, params: ModelParams) -> EmbeddingState:
    return EmbeddingState(0, params.arrays["proj"][vocab.encode(graph.names)])


def _single_step(state, graph, params, t, order_preserving, vocab=None):
    if t != state.t:
        raise ValueError(f"state is at step {state.t}, asked for step {t}")
    if t >= params.config.steps:
        raise StepExhausted(f"model has {params.config.steps} update steps")
    ctx = _eval_ctx(params)
    pk = pack_graphs([graph], vocab or Vocabulary())
    x = ctx.tape.constant(state.x)
    return EmbeddingState(t + 1, _step(ctx, x, pk, t, order_preserving).value)


def update_step_basic(state: EmbeddingState, graph: FormulaGraph, params: ModelParams, t: int) -> EmbeddingState:
    """One neighbourhood update ignoring edge order."""
    return _single_step(state, graph, params, t, order_preserving=False)


def update_step_order(state: EmbeddingState, graph: FormulaGraph, params: ModelParams, t: int) -> EmbeddingState:
    """Neighbourhood update plus the left/head/right treelet terms."""
    if "step0.FL.fc0.W" not in params.arrays:
        raise ValueError("parameters were built without treelet update functions")
    return _single_step(state, graph, params, t, order_preserving=True)


def embed_graph(graph: FormulaGraph, params: ModelParams, vocab: Vocabulary) -> GraphEmbedding:
    return embed_graphs([graph], params, vocab)[0]


def embed_graphs(graphs: Sequence[FormulaGraph], params: ModelParams, vocab: Vocabulary) -> list:
    ctx = _eval_ctx(params)
    pk = pack_graphs(graphs, vocab)
    states, pooled = _embed(ctx, pk)
    out = []
    for gi in range(len(graphs)):
        lo, hi = pk.offsets[gi], pk.offsets[gi + 1]
        out.append(GraphEmbedding([p.value[gi] for p in pooled], [s.value[lo:hi] for s in states]))
    return out


def classify(
    conjecture: Optional[np.ndarray],
    statement: np.ndarray,
    params: ModelParams,
    step: Optional[int] = None,
    setting: Optional[str] = None,
) -> np.ndarray:
    """Logits from the head at ``step`` (default: last) for pooled embeddings.

    Accepts single vectors or row-stacked batches; heads use running
    statistics, as at evaluation time.
    """
    setting = setting or params.config.setting
    if setting != params.config.setting:
        raise ValueError(f"parameters were built for the {params.config.setting} setting")
    step = params.config.steps if step is None else step
    stmt = np.atleast_2d(statement)
    ctx = _eval_ctx(params)
    if setting == "conditional":
        if conjecture is None:
            raise MissingConjecture("conditional classification needs the conjecture embedding")
        inp = np.concatenate([np.atleast_2d(conjecture), stmt], axis=1)
    else:
        inp = stmt
    logits = _head(ctx, step, ctx.tape.constant(inp.astype(params.config.dtype))).value
    return logits[0] if np.ndim(statement) == 1 else logits


def loss_intermediate_supervision(
    batch: Sequence[tuple], params: ModelParams, vocab: Vocabulary, training: bool = True
) -> tuple[float, dict]:
    """Loss value and parameter gradients for ``(conjecture, statement, label)`` triples."""
    conj = [b[0] for b in batch]
    stmt = [b[1] for b in batch]
    labels = np.array([b[2] for b in batch], dtype=np.int64)
    tape = ag.Tape()
    logits = forward_pairs(tape, params, vocab, conj, stmt, training=training, update_stats=False)
    loss = supervision_loss(logits, labels)
    grads = tape.backward(loss)
    return float(loss.value), grads


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, params: ModelParams, vocab: Vocabulary, opt: Optional[OptimizerState] = None, meta=None):
    arrays = {f"param/{k}": v for k, v in params.arrays.items()}
    arrays.update({f"buffer/{k}": v for k, v in params.buffers.items()})
    info = {"config": params.config.to_dict(), "vocab": list(vocab.tokens), **(meta or {})}
    if opt is not None:
        arrays.update({f"opt/{k}": v for k, v in opt.acc.items()})
        info["optimizer"] = {
            "lr": opt.lr,
            "rho": opt.rho,
            "eps": opt.eps,
            "weight_decay": opt.weight_decay,
            "step": opt.step,
        }
    save_arrays(path, arrays, info)


def load_checkpoint(path) -> tuple:
    """Returns ``(params, vocab, optimizer_state_or_None, meta)``."""
    arrays, meta = load_arrays(path)
    config = ModelConfig.from_dict(meta["config"])
    params = ModelParams(
        config,
        {k[6:]: v for k, v in arrays.items() if k.startswith("param/")},
        {k[7:]: v for k, v in arrays.items() if k.startswith("buffer/")},
    )
    vocab = Vocabulary(meta["vocab"])
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = OptimizerState(o["lr"], o["rho"], o["eps"], o["weight_decay"], o["step"])
        opt.acc = {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}
    return params, vocab, opt, meta
