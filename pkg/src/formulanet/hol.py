"""Tokenizer, parser and printer for HOL-Light-style formula text.

The grammar is small: binders (``!``, ``?``, ``?!``, ``@``, ``\\``) followed by
one or more variable names and a dot, right-associative infix operators, a
prefix ``~`` and left-associative juxtaposition for application.  Curried
applications are flattened, so ``f x y`` becomes a single :class:`Apply`
node with two arguments.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Collection, Iterable, Optional, Sequence

BINDERS = frozenset(["!", "?", "?!", "@", "\\"])

# Binding power of each infix operator, loosest first.  Everything is
# right-associative.
INFIX_PRECEDENCE = {
    "<=>": 2,
    "==>": 4,
    "\\/": 6,
    "/\\": 8,
    "=": 12,
    "==": 12,
    "<": 12,
    "<=": 12,
    ">": 12,
    ">=": 12,
    "IN": 12,
    "SUBSET": 12,
    "PSUBSET": 12,
    "HAS_SIZE": 12,
    "divides": 12,
    ",": 14,
    "UNION": 16,
    "INTER": 16,
    "DIFF": 16,
    "INSERT": 16,
    "DELETE": 16,
    "+": 16,
    "-": 16,
    "*": 20,
    "/": 20,
    "DIV": 20,
    "MOD": 20,
    "pow": 24,
    "EXP": 24,
    "o": 26,
}

NEGATION = "~"
TURNSTILE = "|-"
# Head name used when the applied function is itself a compound term,
# e.g. ``(\x. P x) c``.  Cannot collide with a lexed identifier.
APPLY_HEAD = "@app"

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<turnstile>\|-)
  | (?P<binder>\?!|\\(?!/)|!|\?|@)
  | (?P<op>/\\|\\/|[+\-*/<>=&|#$%^:]+)
  | (?P<neg>~)
  | (?P<ident>[A-Za-z0-9_'][A-Za-z0-9_']*)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<dot>\.)
  | (?P<comma>,)
    """,
    re.VERBOSE,
)


class HolSyntaxError(ValueError):
    """Base class for lexing and parsing failures; carries a character offset."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        self.detail = message
        if position is not None:
            message = f"{message} at column {position + 1}"
        super().__init__(message)


class IllegalCharacter(HolSyntaxError):
    pass


class UnbalancedParens(HolSyntaxError):
    pass


class DanglingBinder(HolSyntaxError):
    pass


class EmptyExpression(HolSyntaxError):
    pass


@dataclass(frozen=True)
class Token:
    kind: str  # binder | identifier | infix-op | lparen | rparen | dot
    text: str
    pos: int = field(default=0, compare=False)


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise IllegalCharacter(f"illegal character {text[pos]!r}", pos)
        group = m.lastgroup
        lexeme = m.group()
        if group == "binder":
            tokens.append(Token("binder", lexeme, pos))
        elif group in ("op", "comma"):
            # symbolic runs that are not known operators behave like names
            kind = "infix-op" if lexeme in INFIX_PRECEDENCE else "identifier"
            tokens.append(Token(kind, lexeme, pos))
        elif group == "ident":
            kind = "infix-op" if lexeme in INFIX_PRECEDENCE else "identifier"
            tokens.append(Token(kind, lexeme, pos))
        elif group in ("neg", "turnstile"):
            tokens.append(Token("identifier", lexeme, pos))
        elif group in ("lparen", "rparen", "dot"):
            tokens.append(Token(group, lexeme, pos))
        pos = m.end()
    return tokens


# --------------------------------------------------------------------------
# AST


class FormulaAst:
    """Common base of the three node kinds."""

    __slots__ = ()
    kind = ""

    def __str__(self):
        return print_formula(self)


@dataclass(frozen=True)
class Leaf(FormulaAst):
    name: str
    kind = "Leaf"

    @property
    def children(self) -> tuple:
        return ()


@dataclass(frozen=True)
class Apply(FormulaAst):
    name: str
    children: tuple
    kind = "Apply"

    def __post_init__(self):
        if not self.children:
            raise ValueError("Apply needs at least one argument")


@dataclass(frozen=True)
class Quantifier(FormulaAst):
    name: str
    var: str
    body: FormulaAst
    kind = "Quantifier"

    @property
    def children(self) -> tuple:
        return (self.body,)


# --------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, tokens: Sequence[Token]):
        self.tokens = list(tokens)
        self.i = 0

    def peek(self) -> Optional[Token]:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def peek2(self) -> Optional[Token]:
        j = self.i + 1
        return self.tokens[j] if j < len(self.tokens) else None

    def advance(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def _end_pos(self) -> int:
        if not self.tokens:
            return 0
        last = self.tokens[-1]
        return last.pos + len(last.text)

    def expr(self, min_prec: int = 0) -> FormulaAst:
        tok = self.peek()
        if tok is None:
            raise EmptyExpression("expected an expression", self._end_pos())
        if tok.kind == "binder":
            return self.binder()
        left = self.unary()
        while True:
            tok = self.peek()
            if tok is None or tok.kind != "infix-op":
                return left
            prec = INFIX_PRECEDENCE[tok.text]
            if prec < min_prec:
                return left
            self.advance()
            if self.peek() is None:
                raise EmptyExpression(f"missing right operand of {tok.text}", tok.pos)
            right = self.expr(prec)
            left = Apply(tok.text, (left, right))

    def binder(self) -> FormulaAst:
        btok = self.advance()
        names = []
        while (tok := self.peek()) is not None and tok.kind == "identifier" and tok.text not in (NEGATION, TURNSTILE):
            names.append(self.advance().text)
        tok = self.peek()
        if not names or tok is None or tok.kind != "dot":
            raise DanglingBinder(f"binder {btok.text} without variable and dot", btok.pos)
        self.advance()
        if self.peek() is None:
            raise DanglingBinder(f"binder {btok.text} without body", btok.pos)
        body = self.expr(0)
        for name in reversed(names):
            body = Quantifier(btok.text, name, body)
        return body

    def unary(self) -> FormulaAst:
        tok = self.peek()
        if tok is not None and tok.kind == "identifier" and tok.text == NEGATION:
            self.advance()
            if self.peek() is None:
                raise EmptyExpression("missing operand of ~", tok.pos)
            return Apply(NEGATION, (self.unary(),))
        return self.application()

    def _starts_atom(self, tok: Optional[Token]) -> bool:
        if tok is None:
            return False
        if tok.kind == "lparen" or tok.kind == "binder":
            return True
        return tok.kind == "identifier" and tok.text not in (NEGATION, TURNSTILE)

    def application(self) -> FormulaAst:
        tok = self.peek()
        if not self._starts_atom(tok):
            if tok is None:
                raise EmptyExpression("expected an expression", self._end_pos())
            if tok.kind == "rparen":
                if self.i > 0 and self.tokens[self.i - 1].kind == "lparen":
                    raise EmptyExpression("empty parentheses", tok.pos)
                raise UnbalancedParens("unexpected ')'", tok.pos)
            raise EmptyExpression(f"unexpected token {tok.text!r}", tok.pos)
        head = self.atom()
        args = []
        while self._starts_atom(self.peek()):
            if self.peek().kind == "binder":
                # a binder in argument position extends to the right
                args.append(self.binder())
                break
            args.append(self.atom())
        if not args:
            return head
        if isinstance(head, Leaf):
            return Apply(head.name, tuple(args))
        if isinstance(head, Apply):
            return Apply(head.name, head.children + tuple(args))
        return Apply(APPLY_HEAD, (head, *args))

    def atom(self) -> FormulaAst:
        tok = self.peek()
        if tok.kind == "binder":
            return self.binder()
        if tok.kind == "identifier":
            self.advance()
            return Leaf(tok.text)
        # lparen
        open_tok = self.advance()
        nxt, after = self.peek(), self.peek2()
        if (
            nxt is not None
            and after is not None
            and after.kind == "rparen"
            and (nxt.kind == "infix-op" or nxt.text == NEGATION)
        ):
            self.advance()
            self.advance()
            return Leaf(nxt.text)
        if nxt is None:
            raise UnbalancedParens("unclosed '('", open_tok.pos)
        inner = self.expr(0)
        close = self.peek()
        if close is None or close.kind != "rparen":
            raise UnbalancedParens("unclosed '('", open_tok.pos)
        self.advance()
        return inner


def parse(tokens: Sequence[Token]) -> FormulaAst:
    """Parse a token stream; a single leading ``|-`` is dropped."""
    tokens = list(tokens)
    if tokens and tokens[0].text == TURNSTILE:
        tokens = tokens[1:]
    p = _Parser(tokens)
    if p.peek() is None:
        raise EmptyExpression("empty formula", 0)
    ast = p.expr(0)
    tok = p.peek()
    if tok is not None:
        if tok.kind == "rparen":
            raise UnbalancedParens("unmatched ')'", tok.pos)
        raise HolSyntaxError(f"unexpected token {tok.text!r}", tok.pos)
    return ast


def parse_formula(text: str) -> FormulaAst:
    return parse(tokenize(text))


# --------------------------------------------------------------------------
# Printer


def _is_operator_name(name: str) -> bool:
    return name in INFIX_PRECEDENCE or name == NEGATION


def print_formula(ast: FormulaAst) -> str:
    """Canonical, fully parenthesised rendering that parses back to ``ast``."""
    if isinstance(ast, Leaf):
        return f"({ast.name})" if _is_operator_name(ast.name) else ast.name
    if isinstance(ast, Quantifier):
        return f"{ast.name}{ast.var}. {print_formula(ast.body)}"
    if ast.name in INFIX_PRECEDENCE and len(ast.children) == 2:
        left, right = ast.children
        return f"{_wrap(left)} {ast.name} {_wrap(right)}"
    if ast.name == NEGATION and len(ast.children) == 1:
        return f"~{_wrap(ast.children[0])}"
    if ast.name == APPLY_HEAD:
        head, *args = ast.children
        parts = [f"({print_formula(head)})"] + [_wrap(a) for a in args]
        return " ".join(parts)
    head = f"({ast.name})" if _is_operator_name(ast.name) else ast.name
    return " ".join([head] + [_wrap(a) for a in ast.children])


def _wrap(ast: FormulaAst) -> str:
    text = print_formula(ast)
    if isinstance(ast, Leaf):
        return text
    return f"({text})"


# --------------------------------------------------------------------------
# Scoping


def is_default_constant(name: str) -> bool:
    """Fallback classification when no constant vocabulary is supplied.

    Operators, numerals and capitalised names are constants; every other
    identifier (``x``, ``f``, ``t1``) is a variable candidate.
    """
    if name in INFIX_PRECEDENCE or name in (NEGATION, APPLY_HEAD) or name in BINDERS:
        return True
    first = name[0]
    if first.isdigit() or first.isupper():
        return True
    return not (first.isalpha() or first == "_")


def _is_constant(name: str, constants: Optional[Collection[str]]) -> bool:
    if name in INFIX_PRECEDENCE or name in (NEGATION, APPLY_HEAD):
        return True
    if constants is None:
        return is_default_constant(name)
    return name in constants


def free_variables(ast: FormulaAst, constants: Optional[Collection[str]] = None) -> list[str]:
    """Names occurring unbound in ``ast``, in first-occurrence order.

    With ``constants=None`` the :func:`is_default_constant` heuristic decides
    which unbound names are constants.
    """
    seen: dict[str, None] = {}

    def visit(node: FormulaAst, bound: frozenset):
        if isinstance(node, Quantifier):
            visit(node.body, bound | {node.var})
            return
        if node.name not in bound and not _is_constant(node.name, constants):
            seen.setdefault(node.name)
        for child in node.children:
            visit(child, bound)

    visit(ast, frozenset())
    return list(seen)


def close_formula(ast: FormulaAst, constants: Optional[Collection[str]] = None) -> FormulaAst:
    for name in reversed(free_variables(ast, constants)):
        ast = Quantifier("!", name, ast)
    return ast


def iter_nodes(ast: FormulaAst) -> Iterable[FormulaAst]:
    stack = [ast]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(node.children))


def ast_depth(ast: FormulaAst) -> int:
    if not ast.children:
        return 1
    return 1 + max(ast_depth(c) for c in ast.children)
