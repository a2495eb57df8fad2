"""Formula graphs: construction from an AST, treelets, hashing and I/O.

In ``full`` mode equal constants are shared, every bound variable collapses to
one node linked from its quantifier, and variable names are erased to ``VAR``
or ``VARFUNC``.  The three ablation modes stop part-way through that pipeline.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from functools import cached_property
from typing import Collection, Iterable, Optional, Sequence

import numpy as np

from .hol import (
    APPLY_HEAD,
    Apply,
    FormulaAst,
    Leaf,
    Quantifier,
    _is_constant,
    iter_nodes,
)

MODES = ("full", "tree-old-names", "tree-renamed", "graph-old-names")
VAR = "VAR"
VARFUNC = "VARFUNC"
KINDS = ("constant-value", "constant-function", "variable-value", "variable-function", "quantifier")


class FreeVariable(ValueError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"free variable {name!r}; close the formula first")


class GraphFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Treelet:
    left: int
    head: int
    right: int
    left_rank: int
    right_rank: int


@dataclass(frozen=True, eq=False)
class FormulaGraph:
    """Directed multigraph with rank-ordered out-edges.

    ``out_edges[v]`` lists the targets of ``v`` in rank order; the rank of the
    edge at position ``i`` is ``i + 1``.
    """

    names: tuple
    kinds: tuple
    out_edges: tuple
    mode: str = "full"

    def __post_init__(self):
        n = len(self.names)
        if len(self.kinds) != n or len(self.out_edges) != n:
            raise GraphFormatError("names, kinds and out_edges must have equal length")
        for targets in self.out_edges:
            for t in targets:
                if not 0 <= t < n:
                    raise GraphFormatError(f"edge target {t} out of range")

    @property
    def n_nodes(self) -> int:
        return len(self.names)

    @property
    def n_edges(self) -> int:
        return sum(len(t) for t in self.out_edges)

    @cached_property
    def in_edges(self) -> tuple:
        """Per node, the ``(source, rank)`` pairs of incoming edges."""
        incoming = [[] for _ in self.names]
        for src, targets in enumerate(self.out_edges):
            for rank, dst in enumerate(targets, start=1):
                incoming[dst].append((src, rank))
        return tuple(tuple(x) for x in incoming)

    def edges(self) -> list:
        """All edges as ``(src, rank, dst)`` triples."""
        return [
            (src, rank, dst)
            for src, targets in enumerate(self.out_edges)
            for rank, dst in enumerate(targets, start=1)
        ]

    def degree(self) -> np.ndarray:
        """In-degree plus out-degree, counting parallel edges and self-loops twice."""
        deg = np.array([len(t) for t in self.out_edges], dtype=np.int64)
        for targets in self.out_edges:
            for dst in targets:
                deg[dst] += 1
        return deg

    def __eq__(self, other):
        if not isinstance(other, FormulaGraph):
            return NotImplemented
        return (
            self.names == other.names
            and self.kinds == other.kinds
            and self.out_edges == other.out_edges
            and self.mode == other.mode
        )

    def __hash__(self):
        return hash((self.names, self.out_edges, self.mode))


# --------------------------------------------------------------------------
# Construction


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the earliest node as representative so ids follow preorder
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


class _TreeNode:
    __slots__ = ("name", "role", "binder", "children", "quant_var")

    def __init__(self, name, role, binder=None):
        self.name = name
        self.role = role  # "value" | "function" | "quantifier"
        self.binder = binder  # tree id of the binding quantifier, if a bound variable
        self.children = []
        self.quant_var = None


def _build_tree(ast: FormulaAst, constants) -> list:
    nodes: list = []

    def new(name, role, binder=None) -> int:
        nodes.append(_TreeNode(name, role, binder))
        return len(nodes) - 1

    def lookup(name, scope) -> Optional[int]:
        binder = scope.get(name)
        if binder is None and name != APPLY_HEAD and not _is_constant(name, constants):
            raise FreeVariable(name)
        return binder

    # explicit stack: (ast, scope, parent tree id or None)
    def visit(node: FormulaAst, scope: dict) -> int:
        if isinstance(node, Quantifier):
            q = new(node.name, "quantifier")
            nodes[q].quant_var = node.var
            inner = dict(scope)
            inner[node.var] = q
            nodes[q].children.append(visit(node.body, inner))
            return q
        if isinstance(node, Leaf):
            return new(node.name, "value", lookup(node.name, scope))
        binder = None if node.name == APPLY_HEAD else lookup(node.name, scope)
        f = new(node.name, "function", binder)
        for child in node.children:
            nodes[f].children.append(visit(child, scope))
        return f

    visit(ast, {})
    return nodes


def build_graph(
    ast: FormulaAst, mode: str = "full", constants: Optional[Collection[str]] = None
) -> FormulaGraph:
    """Compile a closed formula into a graph.

    ``constants`` decides which unbound names are legitimate constants; any
    other unbound name raises :class:`FreeVariable`.  ``None`` uses
    :func:`formulanet.hol.is_default_constant`.
    """
    if mode not in MODES:
        raise ValueError(f"unknown graph mode {mode!r}")
    tree = _build_tree(ast, constants)

    if mode in ("tree-old-names", "tree-renamed"):
        names, kinds = [], []
        for node in tree:
            if mode == "tree-renamed" and node.binder is not None:
                names.append(VARFUNC if node.role == "function" else VAR)
            else:
                names.append(node.name)
            kinds.append(_kind(node.role, node.binder is not None))
        return FormulaGraph(tuple(names), tuple(kinds), tuple(tuple(n.children) for n in tree), mode)

    n = len(tree)
    uf = _UnionFind(n)
    first_constant: dict = {}
    first_occurrence: dict = {}
    for i, node in enumerate(tree):
        if node.role == "quantifier" or node.name == APPLY_HEAD:
            continue
        if node.binder is None:
            key = node.name
            table = first_constant
        else:
            key = node.binder
            table = first_occurrence
        if key in table:
            uf.union(table[key], i)
        else:
            table[key] = i

    # quantifier -> body head (rank 1), quantifier -> merged variable (rank 2)
    occurrence_of = {b: i for b, i in first_occurrence.items()}

    reps = sorted({uf.find(i) for i in range(n)})
    new_id = {r: k for k, r in enumerate(reps)}

    is_function = [False] * len(reps)
    members_name = [None] * len(reps)
    bound = [False] * len(reps)
    role = [None] * len(reps)
    for i, node in enumerate(tree):
        k = new_id[uf.find(i)]
        members_name[k] = members_name[k] or node.name
        role[k] = "quantifier" if node.role == "quantifier" else role[k] or "value"
        if node.role == "function":
            is_function[k] = True
        if node.binder is not None:
            bound[k] = True

    out_edges: list = [[] for _ in reps]
    # merged nodes concatenate their occurrences' argument lists in preorder;
    # an argument slot already contributed by an earlier occurrence is skipped
    seen_slots = [set() for _ in reps]
    for i, node in enumerate(tree):
        k = new_id[uf.find(i)]
        if node.role == "quantifier":
            body = new_id[uf.find(node.children[0])]
            out_edges[k].append(body)
            var_tree = occurrence_of.get(i)
            if var_tree is not None:
                var = new_id[uf.find(var_tree)]
                if var != body:
                    out_edges[k].append(var)
            continue
        for pos, child in enumerate(node.children):
            slot = (pos, new_id[uf.find(child)])
            if slot in seen_slots[k]:
                continue
            seen_slots[k].add(slot)
            out_edges[k].append(slot[1])

    names, kinds = [], []
    for k in range(len(reps)):
        if role[k] == "quantifier":
            names.append(members_name[k])
            kinds.append("quantifier")
            continue
        if bound[k] and mode == "full":
            names.append(VARFUNC if is_function[k] else VAR)
        else:
            names.append(members_name[k])
        kinds.append(_kind("function" if is_function[k] else "value", bound[k]))
    return FormulaGraph(tuple(names), tuple(kinds), tuple(tuple(e) for e in out_edges), mode)


def _kind(role: str, bound: bool) -> str:
    if role == "quantifier":
        return "quantifier"
    if bound:
        return "variable-function" if role == "function" else "variable-value"
    return "constant-function" if role == "function" else "constant-value"


# --------------------------------------------------------------------------
# Treelets


def enumerate_treelets(graph: FormulaGraph) -> list[Treelet]:
    out = []
    for v, targets in enumerate(graph.out_edges):
        k = len(targets)
        for i in range(k):
            for j in range(i + 1, k):
                out.append(Treelet(targets[i], v, targets[j], i + 1, j + 1))
    return out


def treelet_arrays(graph: FormulaGraph) -> np.ndarray:
    """Treelets as an ``(m, 3)`` int array of (left, head, right)."""
    rows = [(t.left, t.head, t.right) for t in enumerate_treelets(graph)]
    if not rows:
        return np.zeros((0, 3), dtype=np.int64)
    return np.asarray(rows, dtype=np.int64)


def treelet_membership_counts(graph: FormulaGraph) -> np.ndarray:
    """Per node, the number of treelet roles it fills.

    A treelet that mentions a node twice (``f x x``) counts twice, so the
    counts always sum to three times the number of treelets.
    """
    counts = np.zeros(graph.n_nodes, dtype=np.int64)
    for t in enumerate_treelets(graph):
        counts[t.left] += 1
        counts[t.head] += 1
        counts[t.right] += 1
    return counts


# --------------------------------------------------------------------------
# Hashing


def _h(*parts) -> str:
    return hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=16).hexdigest()


def canonical_hash(graph: FormulaGraph) -> str:
    """Relabeling-invariant digest via iterated neighbourhood refinement.

    Labels start from node names and absorb the rank-ordered out-neighbour
    labels and the (rank, source label) multiset of in-neighbours each
    round, until the partition stops splitting.
    """
    labels = [_h("n", name) for name in graph.names]
    incoming = graph.in_edges
    n_classes = len(set(labels))
    for _ in range(graph.n_nodes + 1):
        new = []
        for v in range(graph.n_nodes):
            outs = tuple(labels[w] for w in graph.out_edges[v])
            ins = tuple(sorted((r, labels[u]) for u, r in incoming[v]))
            new.append(_h(labels[v], outs, ins))
        labels = new
        count = len(set(labels))
        if count == n_classes:
            break
        n_classes = count
    edges = sorted((labels[s], r, labels[d]) for s, r, d in graph.edges())
    return _h(graph.mode, tuple(sorted(labels)), tuple(edges))


def permute_nodes(graph: FormulaGraph, perm: Sequence[int]) -> FormulaGraph:
    """Relabel node ``i`` as ``perm[i]``; edge ranks are preserved."""
    n = graph.n_nodes
    names = [None] * n
    kinds = [None] * n
    out = [None] * n
    for i in range(n):
        j = perm[i]
        names[j] = graph.names[i]
        kinds[j] = graph.kinds[i]
        out[j] = tuple(perm[t] for t in graph.out_edges[i])
    return FormulaGraph(tuple(names), tuple(kinds), tuple(out), graph.mode)


# --------------------------------------------------------------------------
# Renaming


def bound_variable_names(ast: FormulaAst) -> list[str]:
    seen: dict = {}
    for node in iter_nodes(ast):
        if isinstance(node, Quantifier):
            seen.setdefault(node.var)
    return list(seen)


def rename_ast_variables(ast: FormulaAst, seed) -> FormulaAst:
    """Replace every bound variable name through a random injective map.

    Fresh names have the form ``v<k>`` and never coincide with a name already
    present in the formula, so binding structure is untouched.
    """
    bound = bound_variable_names(ast)
    if not bound:
        return ast
    taken = {node.name for node in iter_nodes(ast)} | set(bound)
    rng = random.Random(seed)
    pool = rng.sample(range(10 * len(taken) + 100), len(bound) + len(taken))
    fresh = [f"v{k}" for k in pool if f"v{k}" not in taken][: len(bound)]
    mapping = dict(zip(bound, fresh))

    def visit(node: FormulaAst, scope: frozenset) -> FormulaAst:
        if isinstance(node, Quantifier):
            return Quantifier(node.name, mapping[node.var], visit(node.body, scope | {node.var}))
        name = mapping[node.name] if node.name in scope else node.name
        if isinstance(node, Leaf):
            return Leaf(name)
        return Apply(name, tuple(visit(c, scope) for c in node.children))

    return visit(ast, frozenset())


# --------------------------------------------------------------------------
# Text formats


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def export_dot(graph: FormulaGraph) -> str:
    lines = ["digraph {"]
    for i, name in enumerate(graph.names):
        lines.append(f'  n{i} [label="{_dot_escape(name)}"];')
    for src, rank, dst in graph.edges():
        lines.append(f'  n{src} -> n{dst} [label="{rank}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def dumps_graph(graph: FormulaGraph) -> str:
    lines = [f"GRAPH {graph.mode} {graph.n_nodes}"]
    for i, (kind, name) in enumerate(zip(graph.kinds, graph.names)):
        lines.append(f"NODE {i} {kind} {name}")
    for src, rank, dst in graph.edges():
        lines.append(f"EDGE {src} {rank} {dst}")
    return "\n".join(lines) + "\n"


def loads_graph(text: str) -> FormulaGraph:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise GraphFormatError("empty graph text")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "GRAPH" or head[1] not in MODES:
        raise GraphFormatError(f"bad header {lines[0]!r}")
    n = int(head[2])
    names = [None] * n
    kinds = [None] * n
    edges: list = [dict() for _ in range(n)]
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(" ", 3)
        if parts[0] == "NODE" and len(parts) == 4:
            i = int(parts[1])
            if parts[2] not in KINDS:
                raise GraphFormatError(f"line {lineno}: unknown kind {parts[2]!r}")
            kinds[i], names[i] = parts[2], parts[3]
        elif parts[0] == "EDGE" and len(parts) == 4:
            src, rank, dst = int(parts[1]), int(parts[2]), int(parts[3])
            edges[src][rank] = dst
        else:
            raise GraphFormatError(f"line {lineno}: cannot parse {line!r}")
    if any(x is None for x in names):
        raise GraphFormatError("missing NODE lines")
    out = []
    for src, ranked in enumerate(edges):
        if sorted(ranked) != list(range(1, len(ranked) + 1)):
            raise GraphFormatError(f"non-contiguous ranks on node {src}")
        out.append(tuple(ranked[r] for r in range(1, len(ranked) + 1)))
    return FormulaGraph(tuple(names), tuple(kinds), tuple(out), head[1])


def graph_stats(graph: FormulaGraph) -> dict:
    return {
        "nodes": graph.n_nodes,
        "edges": graph.n_edges,
        "treelets": sum(len(t) * (len(t) - 1) // 2 for t in graph.out_edges),
    }


def constant_names(graphs: Iterable[FormulaGraph]) -> set:
    """Names of every non-variable node (constants and binder lexemes)."""
    out = set()
    for g in graphs:
        for name, kind in zip(g.names, g.kinds):
            if not kind.startswith("variable"):
                out.add(name)
    return out
