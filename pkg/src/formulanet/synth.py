"""Random formulas and a synthetic HolStep-format corpus.

The corpus stands in for HolStep when the real dataset is unavailable.  A
statement is useful for its conjecture when it contains the conjecture's
nested application ``A (B t)``.  Useless statements use exactly the same
constants but never nest one function constant inside another, so a
bag-of-tokens model sits at chance and any gain needs graph structure.
"""

from __future__ import annotations

import random
from pathlib import Path

from .hol import Apply, FormulaAst, Leaf, Quantifier, close_formula, print_formula

BINDER_CHOICES = ("!", "?", "?!", "@", "\\")
INFIX_CHOICES = ("/\\", "\\/", "==>", "<=>", "=")
VAR_POOL = ("x", "y", "z", "f", "g", "h", "a", "b")


def random_closed_formula(rng: random.Random, max_depth: int = 6) -> FormulaAst:
    """Random closed formula of depth at most ``max_depth``.

    Variables are lowercase and constants uppercase, matching the default
    constant heuristic.  Shadowing, variables in function position and all
    binder kinds occur.
    """

    def gen(depth: int, scope: tuple, must_bind: bool) -> FormulaAst:
        if must_bind and depth >= 2:
            v = rng.choice(VAR_POOL)
            return Quantifier(rng.choice(BINDER_CHOICES), v, gen(depth - 1, scope + (v,), False))
        if depth <= 1:
            if scope and rng.random() < 0.6:
                return Leaf(rng.choice(scope))
            return Leaf(f"C{rng.randrange(6)}")
        r = rng.random()
        if r < 0.25:
            v = rng.choice(VAR_POOL)
            return Quantifier(rng.choice(BINDER_CHOICES), v, gen(depth - 1, scope + (v,), False))
        if r < 0.5:
            op = rng.choice(INFIX_CHOICES)
            return Apply(op, (gen(depth - 1, scope, False), gen(depth - 1, scope, False)))
        if r < 0.9:
            if scope and rng.random() < 0.4:
                head = rng.choice(scope)
            else:
                head = f"F{rng.randrange(8)}"
            n_args = rng.randint(1, 3)
            return Apply(head, tuple(gen(depth - 1, scope, False) for _ in range(n_args)))
        return gen(1, scope, False)

    return gen(rng.randint(2, max_depth), (), True)


# --------------------------------------------------------------------------
# Synthetic premise-selection corpus


class _Vocab:
    def __init__(self, n_functions: int, n_predicates: int, n_values: int):
        self.functions = [f"F{i}" for i in range(n_functions)]
        self.predicates = [f"P{i}" for i in range(n_predicates)]
        self.values = [f"C{i}" for i in range(n_values)]


def _term(rng, variables, v: _Vocab) -> FormulaAst:
    if rng.random() < 0.6:
        return Leaf(rng.choice(variables))
    return Leaf(rng.choice(v.values))


def _join(rng, atoms) -> FormulaAst:
    out = atoms[-1]
    for atom in reversed(atoms[:-1]):
        out = Apply(rng.choice(("/\\", "/\\", "==>", "\\/")), (atom, out))
    return out


def _quantify(rng, body: FormulaAst, variables) -> FormulaAst:
    for name in reversed(variables):
        body = Quantifier(rng.choice(("!", "!", "?")), name, body)
    return close_formula(body)


def _statement(rng, key: tuple, v: _Vocab, useful: bool) -> FormulaAst:
    a, b = key
    other = rng.choice([f for f in v.functions if f not in key])
    p = [rng.choice(v.predicates) for _ in range(3)]
    variables = ["x", "y", "z"][: rng.randint(1, 3)]
    t = [_term(rng, variables, v) for _ in range(3)]
    if useful:
        atoms = [
            Apply(p[0], (Apply(a, (Apply(b, (t[0],)),)),)),
            Apply(p[1], (Apply(other, (t[1],)),)),
            Apply(p[2], (t[2],)),
        ]
    else:
        atoms = [
            Apply(p[0], (Apply(a, (t[0],)),)),
            Apply(p[1], (Apply(b, (t[1],)),)),
            Apply(p[2], (Apply(other, (t[2],)),)),
        ]
    for _ in range(rng.randint(0, 2)):
        f = rng.choice(v.functions)
        atoms.append(Apply(rng.choice(v.predicates), (Apply(f, (_term(rng, variables, v),)),)))
    rng.shuffle(atoms)
    return _quantify(rng, _join(rng, atoms), variables)


def _conjecture(rng, key: tuple, v: _Vocab) -> FormulaAst:
    a, b = key
    p, q = rng.sample(v.predicates, 2)
    body = Apply("==>", (Apply(p, (Apply(a, (Apply(b, (Leaf("x"),)),)),)), Apply(q, (Leaf("x"),))))
    return _quantify(rng, body, ["x"])


def synthetic_holstep_file(
    rng: random.Random, name: str, pairs: int, n_functions: int = 24, n_predicates: int = 8, n_values: int = 6
) -> str:
    """Text of one HolStep-format file with ``pairs // 2`` statements per label."""
    v = _Vocab(n_functions, n_predicates, n_values)
    key = tuple(rng.sample(v.functions, 2))
    conj = print_formula(_conjecture(rng, key, v))
    lines = [f"N {name}", f"C |- {conj}", f"T |- {conj}"]
    dep = print_formula(_statement(rng, key, v, True))
    lines += [f"D |- {dep}", f"T |- {dep}"]
    labels = [True] * (pairs // 2) + [False] * (pairs // 2)
    rng.shuffle(labels)
    for useful in labels:
        text = print_formula(_statement(rng, key, v, useful))
        lines.append(f"{'+' if useful else '-'} |- {text}")
        lines.append(f"T |- {text}")
    return "\n".join(lines) + "\n"


def write_synthetic_corpus(
    out_dir, n_train: int = 240, n_test: int = 20, pairs_per_conjecture: int = 100, seed: int = 0
) -> tuple[list, list]:
    """Write ``train/`` and ``test/`` directories; returns the two file lists."""
    out = Path(out_dir)
    rng = random.Random(seed)
    result = []
    for split, count in (("train", n_train), ("test", n_test)):
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for i in range(count):
            path = d / f"{split}_{i:05d}"
            path.write_text(synthetic_holstep_file(rng, f"{split}_{i:05d}", pairs_per_conjecture), encoding="utf-8")
            files.append(path)
        result.append(files)
    return result[0], result[1]
