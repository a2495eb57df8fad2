"""Training loop, evaluation, ablations and node nearest-neighbour queries."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .data import HolStepData, SplitManifest, batch_stream, list_conjecture_files, make_splits
from .graph import FormulaGraph
from .model import (
    ModelConfig,
    ModelParams,
    Vocabulary,
    VocabMismatch,
    embed_graphs,
    forward_pairs,
    load_checkpoint,
    save_checkpoint,
    supervision_loss,
)
from .optim import OptimizerState, rmsprop_step

log = logging.getLogger(__name__)

# fixed seed for the renamed validation set
RENAME_SEED = 7


class TrainingDiverged(FloatingPointError):
    pass


class NodeOutOfRange(IndexError):
    pass


@dataclass
class TrainRunConfig:
    # model
    dim: int = 64
    steps: int = 1
    order_preserving: bool = False
    hidden: int = 0
    clf_hidden: int = 0
    setting: str = "conditional"
    mode: str = "full"
    dtype: str = "float32"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # optimisation
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_decay: float = 3.0
    rho: float = 0.9
    eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 32
    eval_batch_size: int = 256
    seed: int = 0
    # data
    manifest: str = ""
    train_dir: str = ""
    test_dir: str = ""
    n_val: int = 700
    split_seed: int = 0
    cache_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_decay < 1:
            raise ValueError("lr_decay must be >= 1")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            dim=self.dim,
            steps=self.steps,
            order_preserving=self.order_preserving,
            hidden=self.hidden,
            clf_hidden=self.clf_hidden,
            setting=self.setting,
            bn_eps=self.bn_eps,
            bn_momentum=self.bn_momentum,
            dtype=self.dtype,
        )

    def lr_at(self, epoch: int) -> float:
        """Learning rate for zero-based ``epoch``."""
        return self.lr / self.lr_decay**epoch

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in types:
                raise KeyError(f"unknown config key {k!r}")
            if isinstance(v, str):
                t = str(types[k])
                if t == "bool":
                    v = v.strip().lower() in ("1", "true", "yes", "on")
                elif t == "int":
                    v = int(v)
                elif t == "float":
                    v = float(v)
            kw[k] = v
        return cls(**kw)

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)

    def add(self, **kv):
        self.records.append(kv)

    def lines(self, include_wall: bool = True) -> list:
        out = []
        for rec in self.records:
            items = [(k, v) for k, v in rec.items() if include_wall or k != "wall"]
            out.append(" ".join(f"{k}={_fmt(v)}" for k, v in items))
        return out

    def write(self, path):
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class TrainResult:
    params: ModelParams
    vocab: Vocabulary
    metrics: MetricsLog
    best_checkpoint: Optional[Path] = None
    last_checkpoint: Optional[Path] = None


def open_data(run: TrainRunConfig) -> HolStepData:
    """Dataset described by ``run``: an existing manifest or a fresh split."""
    if run.manifest and Path(run.manifest).exists():
        manifest = SplitManifest.load(run.manifest)
    else:
        if not run.train_dir:
            raise ValueError("need either manifest or train_dir")
        test = list_conjecture_files(run.test_dir) if run.test_dir else []
        manifest = make_splits(list_conjecture_files(run.train_dir), run.n_val, run.split_seed, test)
        if run.manifest:
            manifest.save(run.manifest)
    return HolStepData(manifest, run.mode, cache_dir=run.cache_dir or None)


def _full_grads(params: ModelParams, grads: dict) -> dict:
    return {k: grads[k] if k in grads else np.zeros_like(v) for k, v in params.arrays.items()}


def train(run: TrainRunConfig, data: Optional[HolStepData] = None) -> TrainResult:
    """Train with per-epoch learning-rate division and validation after each epoch.

    Checkpoints ``epoch<k>.fnet``, ``last.fnet`` and ``best.fnet`` (highest
    last-head validation accuracy) go to ``run.out_dir`` when it is set.
    """
    data = data or open_data(run)
    vocab = data.build_vocab("train")
    params = ModelParams.init(run.model_config(len(vocab)), seed=run.seed)
    opt = OptimizerState(lr=run.lr, rho=run.rho, eps=run.eps, weight_decay=run.weight_decay)
    metrics = MetricsLog()
    out_dir = Path(run.out_dir) if run.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    best_acc, best_path, last_path = -1.0, None, None
    has_val = bool(data.manifest.val)

    for epoch in range(run.epochs):
        start = time.perf_counter()
        opt.lr = run.lr_at(epoch)
        total, n_batches, skipped = 0.0, 0, 0
        stream = batch_stream(data, "train", run.batch_size, epoch_seed=run.seed * 1000 + epoch, setting=run.setting)
        for bi, batch in enumerate(stream):
            if len(batch) < 2:
                # head batchnorm needs two rows
                skipped += 1
                continue
            tape = ag.Tape()
            try:
                logits = forward_pairs(
                    tape, params, vocab, batch.conjectures, batch.statements, training=True, update_stats=True
                )
                loss = supervision_loss(logits, batch.labels)
            except ag.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values in epoch {epoch + 1}, batch {bi}: {exc}") from exc
            grads = tape.backward(loss)
            rmsprop_step(params.arrays, _full_grads(params, grads), opt)
            total += float(loss.value)
            n_batches += 1
        rec = {"epoch": epoch + 1, "lr": opt.lr, "train_loss": total / max(n_batches, 1), "batches": n_batches}
        if skipped:
            rec["skipped_batches"] = skipped
        if has_val:
            accs = evaluate(params, vocab, data, "val", batch_size=run.eval_batch_size)
            for t, a in enumerate(accs):
                rec[f"val_acc_step{t}"] = a
        rec["wall"] = round(time.perf_counter() - start, 3)
        metrics.add(**rec)
        log.info(metrics.lines()[-1])
        if out_dir:
            meta = {"epoch": epoch + 1, "run": asdict(run)}
            save_checkpoint(out_dir / f"epoch{epoch + 1}.fnet", params, vocab, opt, meta)
            last_path = out_dir / "last.fnet"
            save_checkpoint(last_path, params, vocab, opt, meta)
            score = rec.get(f"val_acc_step{run.steps}", -float(rec["train_loss"]))
            if score > best_acc:
                best_acc = score
                best_path = out_dir / "best.fnet"
                save_checkpoint(best_path, params, vocab, opt, meta)
    if data.manifest.test:
        accs = evaluate(params, vocab, data, "test", batch_size=run.eval_batch_size)
        metrics.add(final="test", **{f"test_acc_step{t}": a for t, a in enumerate(accs)})
    if out_dir:
        metrics.write(out_dir / "metrics.log")
    return TrainResult(params, vocab, metrics, best_path, last_path)


def evaluate(
    params: ModelParams, vocab: Vocabulary, data: HolStepData, split: str = "val", batch_size: int = 256
) -> list:
    """Accuracy of every step's head (argmax of logits) on ``split``."""
    correct = np.zeros(params.config.steps + 1, dtype=np.int64)
    total = 0
    for batch in batch_stream(data, split, batch_size, setting=params.config.setting, shuffle=False):
        tape = ag.Tape(record=False)
        logits = forward_pairs(tape, params, vocab, batch.conjectures, batch.statements, training=False)
        for t, z in enumerate(logits):
            correct[t] += int((z.value.argmax(axis=1) == batch.labels).sum())
        total += len(batch)
    if total == 0:
        return [0.0] * len(correct)
    return [float(c) / total for c in correct]


def evaluate_checkpoint(path, data: HolStepData, split: str = "val", check_vocab: bool = True) -> list:
    params, vocab, _, _ = load_checkpoint(path)
    if check_vocab:
        expected = data.build_vocab("train")
        if expected != vocab:
            raise VocabMismatch(f"checkpoint vocabulary ({len(vocab)}) differs from data ({len(expected)})")
    return evaluate(params, vocab, data, split)


def ablation_run(params: ModelParams, vocab: Vocabulary, data: HolStepData, variant: str = "original") -> float:
    """Last-head validation accuracy on the original or renamed validation set.

    ``params`` must have been trained on graphs of ``data.mode``.
    """
    if variant == "renamed":
        data = data.renamed(RENAME_SEED)
    elif variant != "original":
        raise ValueError(f"unknown validation variant {variant!r}")
    return evaluate(params, vocab, data, "val")[-1]


def nearest_neighbors(
    params: ModelParams,
    vocab: Vocabulary,
    query: tuple,
    corpus: Sequence[FormulaGraph],
    k: int = 5,
    step: Optional[int] = None,
) -> list:
    """``k`` closest corpus nodes to ``query = (graph, node)`` at ``step``.

    Returns ``(graph index, node index, distance)`` triples ordered by
    Euclidean distance, ties broken by corpus order.
    """
    graph, node = query
    step = params.config.steps if step is None else step
    if not 0 <= step <= params.config.steps:
        raise ValueError(f"step {step} outside 0..{params.config.steps}")
    if not 0 <= node < graph.n_nodes:
        raise NodeOutOfRange(f"node {node} not in graph of {graph.n_nodes} nodes")
    embs = embed_graphs([graph, *corpus], params, vocab)
    q = embs[0].states[step][node].astype(np.float64)
    found = []
    for gi, e in enumerate(embs[1:]):
        x = e.states[step].astype(np.float64)
        dist = np.sqrt(((x - q) ** 2).sum(axis=1))
        found.extend((gi, ni, float(d)) for ni, d in enumerate(dist))
    found.sort(key=lambda r: r[2])
    return found[:k]
