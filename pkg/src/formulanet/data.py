"""HolStep-format ingestion, vocabulary, splits and batching."""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .graph import FormulaGraph, build_graph, constant_names, dumps_graph, loads_graph, rename_ast_variables
from .hol import FormulaAst, HolSyntaxError, close_formula, parse, tokenize
from .model import Vocabulary

log = logging.getLogger(__name__)


class MalformedLine(ValueError):
    def __init__(self, lineno: int, detail: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {detail}")


class UnparseableFormula(ValueError):
    def __init__(self, lineno: int, detail: str):
        self.lineno = lineno
        self.detail = detail
        super().__init__(f"line {lineno}: {detail}")


class InsufficientConjectures(ValueError):
    pass


@dataclass
class Statement:
    text: str
    ast: FormulaAst
    label: int


@dataclass
class ConjectureRecord:
    name: str
    text: str
    ast: FormulaAst
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (lineno, detail)
    path: str = ""

    @property
    def balanced(self) -> bool:
        return len(self.positives) == len(self.negatives)

    @property
    def statements(self) -> list:
        return self.positives + self.negatives


def parse_formula_text(text: str, constants=None) -> FormulaAst:
    return close_formula(parse(tokenize(text)), constants)


def parse_holstep_file(path, constants=None) -> ConjectureRecord:
    """Read one conjecture file.

    Line prefixes: ``N`` name, ``C`` conjecture, ``D`` dependency (ignored),
    ``+``/``-`` useful/useless statement, ``T`` tokenised form of the line
    before it.  The ``T`` form is parsed first and raw text is the fallback.
    Statements that parse in neither form land in ``record.skipped``.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    name = None
    items = []  # [prefix, raw text, T text or None, lineno]
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if len(line) < 2 or line[1] != " " or line[0] not in "NCD+-T":
            raise MalformedLine(lineno, f"unrecognised line {line[:40]!r}")
        prefix, body = line[0], line[2:].strip()
        if prefix == "N":
            name = body
        elif prefix == "T":
            if not items or items[-1][2] is not None:
                raise MalformedLine(lineno, "T line without a preceding formula")
            items[-1][2] = body
        else:
            items.append([prefix, body, None, lineno])

    conj = [it for it in items if it[0] == "C"]
    if len(conj) != 1:
        raise MalformedLine(len(lines), f"expected exactly one C line, found {len(conj)}")
    first_stmt = next((it[3] for it in items if it[0] in "+-"), None)
    if first_stmt is not None and first_stmt < conj[0][3]:
        raise MalformedLine(first_stmt, "statement before conjecture")

    def parse_item(it):
        errors = []
        for text in (it[2], it[1]):
            if text is None:
                continue
            try:
                return text, parse_formula_text(text, constants)
            except HolSyntaxError as exc:
                errors.append(str(exc))
        raise UnparseableFormula(it[3], "; ".join(errors))

    ctext, cast = parse_item(conj[0])
    record = ConjectureRecord(name or Path(path).name, ctext, cast, path=str(path))
    for it in items:
        if it[0] not in "+-":
            continue
        try:
            text, ast = parse_item(it)
        except UnparseableFormula as exc:
            record.skipped.append((exc.lineno, exc.detail))
            continue
        stmt = Statement(text, ast, 1 if it[0] == "+" else 0)
        (record.positives if stmt.label else record.negatives).append(stmt)
    if not record.balanced:
        log.warning(
            "%s: %d useful vs %d useless statements", record.name, len(record.positives), len(record.negatives)
        )
    return record


# --------------------------------------------------------------------------
# Graph cache


class GraphCache:
    """Graphs keyed by a content hash of the formula text and build settings.

    With ``directory`` set, graphs are also persisted in the text wire
    format and reloaded on later runs.
    """

    def __init__(self, mode: str = "full", constants=None, directory=None, rename_seed=None):
        self.mode = mode
        self.constants = constants
        self.rename_seed = rename_seed
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._graphs: dict = {}
        self.access_log: list = []

    def key(self, text: str) -> str:
        tag = f"{self.mode}\0{self.rename_seed}\0{text}"
        return hashlib.sha256(tag.encode("utf-8")).hexdigest()

    def get(self, text: str, ast: FormulaAst, role: str = "statement") -> FormulaGraph:
        key = self.key(text)
        self.access_log.append((role, key))
        g = self._graphs.get(key)
        if g is not None:
            return g
        path = self.directory / f"{key}.graph" if self.directory else None
        if path is not None and path.exists():
            g = loads_graph(path.read_text(encoding="utf-8"))
        else:
            if self.rename_seed is not None:
                ast = rename_ast_variables(ast, f"{self.rename_seed}:{text}")
            g = build_graph(ast, self.mode, self.constants)
            if path is not None:
                path.write_text(dumps_graph(g), encoding="utf-8")
        self._graphs[key] = g
        return g

    def __len__(self):
        return len(self._graphs)


# --------------------------------------------------------------------------
# Splits


@dataclass
class SplitManifest:
    train: list
    val: list
    test: list
    seed: int = 0

    def ids(self, split: str) -> list:
        return {"train": self.train, "val": self.val, "validation": self.val, "test": self.test}[split]

    def dumps(self) -> str:
        out = [f"SEED {self.seed}"]
        for tag, ids in (("TRAIN", self.train), ("VAL", self.val), ("TEST", self.test)):
            out += [f"{tag} {i}" for i in ids]
        return "\n".join(out) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SplitManifest":
        m = cls([], [], [])
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            tag, _, value = line.partition(" ")
            if tag == "SEED":
                m.seed = int(value)
            elif tag in ("TRAIN", "VAL", "TEST"):
                getattr(m, {"TRAIN": "train", "VAL": "val", "TEST": "test"}[tag]).append(value)
            else:
                raise MalformedLine(lineno, f"unknown manifest tag {tag!r}")
        if set(m.train) & set(m.val) or set(m.train) & set(m.test) or set(m.val) & set(m.test):
            raise ValueError("manifest splits overlap")
        return m

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def make_splits(train_files: Sequence, n_val: int = 700, seed: int = 0, test_files: Sequence = ()) -> SplitManifest:
    """Hold out ``n_val`` training conjectures (whole files) for validation."""
    files = sorted(str(f) for f in train_files)
    if n_val >= len(files) and files:
        raise InsufficientConjectures(f"cannot hold out {n_val} of {len(files)} conjectures")
    if n_val > 0 and not files:
        raise InsufficientConjectures("no training conjectures")
    rng = random.Random(seed)
    held = set(rng.sample(files, n_val))
    return SplitManifest(
        [f for f in files if f not in held],
        [f for f in files if f in held],
        sorted(str(f) for f in test_files),
        seed,
    )


def list_conjecture_files(directory) -> list:
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and not p.name.startswith("."))


# --------------------------------------------------------------------------
# Dataset


class HolStepData:
    """Lazily parsed records of a manifest with cached graphs."""

    def __init__(self, manifest: SplitManifest, mode="full", constants=None, cache_dir=None, rename_seed=None):
        self.manifest = manifest
        self.mode = mode
        self.constants = constants
        self.cache = GraphCache(mode, constants, cache_dir, rename_seed)
        self._records: dict = {}
        self.pairs_skipped = 0

    def renamed(self, seed) -> "HolStepData":
        """Same files with every bound variable renamed before graph construction."""
        other = HolStepData(self.manifest, self.mode, self.constants, None, seed)
        other._records = self._records
        return other

    def records(self, split: str) -> list:
        out = []
        for path in self.manifest.ids(split):
            rec = self._records.get(path)
            if rec is None:
                rec = parse_holstep_file(path, self.constants)
                self.pairs_skipped += len(rec.skipped)
                self._records[path] = rec
            out.append(rec)
        return out

    def pairs(self, split: str) -> list:
        """``(record, statement)`` for every statement of the split, in file order."""
        return [(rec, s) for rec in self.records(split) for s in rec.statements]

    def conjecture_graph(self, rec: ConjectureRecord) -> FormulaGraph:
        return self.cache.get(rec.text, rec.ast, role="conjecture")

    def statement_graph(self, stmt: Statement) -> FormulaGraph:
        return self.cache.get(stmt.text, stmt.ast, role="statement")

    def build_vocab(self, split: str = "train") -> Vocabulary:
        return build_vocab(self.records(split), self)


def build_vocab(records: Sequence[ConjectureRecord], data: Optional[HolStepData] = None, mode: str = "full") -> Vocabulary:
    """Vocabulary of every constant seen in the given (training) records."""
    cache = data.cache if data is not None else GraphCache(mode)
    graphs = []
    for rec in records:
        graphs.append(cache.get(rec.text, rec.ast, role="vocab"))
        graphs.extend(cache.get(s.text, s.ast, role="vocab") for s in rec.statements)
    return Vocabulary(constant_names(graphs))


@dataclass
class Batch:
    conjectures: Optional[list]
    statements: list
    labels: np.ndarray

    def __len__(self):
        return len(self.statements)


def batch_stream(
    data: HolStepData, split: str, batch_size: int = 32, epoch_seed: int = 0, setting: str = "conditional",
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Shuffled batches of graph pairs; the final batch may be short.

    In the unconditional setting conjecture graphs are never built or looked
    up, and ``Batch.conjectures`` is ``None``.
    """
    pairs = data.pairs(split)
    order = np.random.default_rng(epoch_seed).permutation(len(pairs)) if shuffle else np.arange(len(pairs))
    for start in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[start : start + batch_size]]
        conj = None
        if setting == "conditional":
            conj = [data.conjecture_graph(rec) for rec, _ in chunk]
        stmts = [data.statement_graph(s) for _, s in chunk]
        labels = np.array([s.label for _, s in chunk], dtype=np.int64)
        yield Batch(conj, stmts, labels)
