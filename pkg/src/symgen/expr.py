"""Prefix-token equations: tokens, trees, evaluation, complexity and text I/O.

An equation is stored as a sequence of tokens in prefix (Polish) order, e.g.
``mul x1 add x2 sin x1``.  Arity alone determines the tree structure.
"""

from __future__ import annotations

import ast
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Token", "Node", "ExprError", "IncompleteSequence", "ExtraTokens",
    "UnknownToken", "ConstArityMismatch", "token", "tokenize", "parse_prefix",
    "to_prefix", "prefix_text", "evaluate", "evaluate_tokens", "complexity",
    "const_slots", "bind_constants", "to_infix", "from_infix", "variables",
    "is_complete", "subtree_end",
]

BINARY = ("add", "sub", "mul", "div", "pow")
UNARY = ("exp", "log", "sin", "cos", "sqrt", "pow2", "pow3", "pow4", "pow5")
TRIG = frozenset({"sin", "cos"})

# per-token weights for C(f); pow2..pow5 count as a multiplication
_COMPLEXITY = {
    "add": 1, "sub": 1, "mul": 1, "div": 2, "pow": 4,
    "sin": 3, "cos": 3, "exp": 4, "log": 4, "sqrt": 4,
    "pow2": 1, "pow3": 1, "pow4": 1, "pow5": 1,
}

_INFIX_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "**"}
_VAR_RE = re.compile(r"^x([1-9][0-9]*)$")
_INT_RE = re.compile(r"^[+-]?[0-9]+$")


class ExprError(ValueError):
    """Base class for malformed expressions."""


class IncompleteSequence(ExprError):
    pass


class ExtraTokens(ExprError):
    pass


class UnknownToken(ExprError):
    pass


class ConstArityMismatch(ExprError):
    pass


@dataclass(frozen=True)
class Token:
    name: str
    kind: str  # binary | unary | variable | literal | const
    arity: int
    complexity: int
    index: int = 0  # 1-based variable index
    value: int | float | None = None

    @property
    def is_terminal(self) -> bool:
        return self.arity == 0

    @property
    def is_constant(self) -> bool:
        return self.kind in ("literal", "const")

    def __str__(self) -> str:
        return self.name


@lru_cache(maxsize=None)
def token(name: str) -> Token:
    """Look up a token by its text name (``mul``, ``x3``, ``const``, ``2.5``)."""
    if name in BINARY:
        return Token(name, "binary", 2, _COMPLEXITY[name])
    if name in UNARY:
        return Token(name, "unary", 1, _COMPLEXITY[name])
    if name == "const":
        return Token(name, "const", 0, 1)
    m = _VAR_RE.match(name)
    if m:
        return Token(name, "variable", 0, 1, index=int(m.group(1)))
    if _INT_RE.match(name):
        return Token(str(int(name)), "literal", 0, 1, value=int(name))
    try:
        value = float(name)
    except ValueError:
        raise UnknownToken(f"unknown token {name!r}") from None
    if not math.isfinite(value):
        raise UnknownToken(f"non-finite literal {name!r}")
    return Token(repr(value), "literal", 0, 1, value=value)


def literal(value: int | float) -> Token:
    if isinstance(value, float) and value.is_integer() and abs(value) < 2**53:
        # keep fitted floats as floats; exact integers only from int input
        return token(repr(value))
    return token(str(value) if isinstance(value, int) else repr(float(value)))


def tokenize(seq: str | Iterable[str | Token]) -> list[Token]:
    if isinstance(seq, str):
        seq = seq.split()
    return [t if isinstance(t, Token) else token(t) for t in seq]


@dataclass(frozen=True)
class Node:
    token: Token
    children: tuple["Node", ...] = ()

    def __iter__(self):
        """Pre-order traversal of nodes."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def __str__(self) -> str:
        return to_infix(self)

    def __repr__(self) -> str:
        return f"Node({prefix_text(self)!r})"


def is_complete(tokens: Sequence[Token]) -> bool:
    """Completeness-counter rule: start at 1, add arity-1 per token, end at 0."""
    if not tokens:
        return False
    counter = 1
    for i, t in enumerate(tokens):
        counter += t.arity - 1
        if counter == 0:
            return i == len(tokens) - 1
    return False


def subtree_end(arities: Sequence[int], start: int) -> int:
    """Index one past the subtree rooted at ``start`` in a prefix arity list."""
    need = 1
    i = start
    while need:
        need += arities[i] - 1
        i += 1
    return i


def parse_prefix(seq: str | Iterable[str | Token]) -> Node:
    tokens = tokenize(seq)
    if not tokens:
        raise IncompleteSequence("empty token sequence")
    counter = 1
    for i, t in enumerate(tokens):
        counter += t.arity - 1
        if counter == 0 and i != len(tokens) - 1:
            raise ExtraTokens(f"sequence complete after {i + 1} of {len(tokens)} tokens")
    if counter > 0:
        raise IncompleteSequence(f"{counter} open operand slot(s) at end of sequence")
    stack: list[Node] = []
    for t in reversed(tokens):
        if t.arity == 0:
            stack.append(Node(t))
        else:
            kids = tuple(stack.pop() for _ in range(t.arity))
            stack.append(Node(t, kids))
    return stack[0]


def to_prefix(tree: Node) -> list[Token]:
    return [node.token for node in tree]


def prefix_text(tree_or_tokens: Node | Sequence[Token]) -> str:
    tokens = to_prefix(tree_or_tokens) if isinstance(tree_or_tokens, Node) else tree_or_tokens
    return " ".join(t.name for t in tokens)


def const_slots(tree: Node | Sequence[Token]) -> int:
    tokens = to_prefix(tree) if isinstance(tree, Node) else tree
    return sum(1 for t in tokens if t.kind == "const")


def variables(tree: Node | Sequence[Token]) -> set[int]:
    tokens = to_prefix(tree) if isinstance(tree, Node) else tree
    return {t.index for t in tokens if t.kind == "variable"}


def complexity(tree: Node | Sequence[Token]) -> int:
    tokens = to_prefix(tree) if isinstance(tree, Node) else tree
    return sum(t.complexity for t in tokens)


def bind_constants(tree: Node, consts: Sequence[float]) -> Node:
    """Replace ``const`` placeholders, in pre-order, by float literals."""
    tokens = to_prefix(tree)
    if const_slots(tokens) != len(consts):
        raise ConstArityMismatch(f"{const_slots(tokens)} slots, {len(consts)} constants")
    values = iter(consts)
    return parse_prefix([literal(float(next(values))) if t.kind == "const" else t for t in tokens])


def _apply(name: str, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if name == "add":
        return a + b
    if name == "sub":
        return a - b
    if name == "mul":
        return a * b
    if name == "div":
        return a / b
    if name == "pow":
        return np.power(a, b)
    if name == "exp":
        return np.exp(a)
    if name == "log":
        return np.log(a)
    if name == "sin":
        return np.sin(a)
    if name == "cos":
        return np.cos(a)
    if name == "sqrt":
        return np.sqrt(a)
    if name == "pow2":
        return a * a
    if name == "pow3":
        return a * a * a
    if name == "pow4":
        a2 = a * a
        return a2 * a2
    if name == "pow5":
        a2 = a * a
        return a2 * a2 * a
    raise UnknownToken(name)


def evaluate_tokens(tokens: Sequence[Token], X: np.ndarray, consts: Sequence[float] = (),
                    strict: bool = True) -> np.ndarray | None:
    """Evaluate a complete prefix sequence row-wise.

    With ``strict`` any non-finite output makes the whole result ``None``;
    otherwise the raw array (possibly holding nan/inf) is returned.
    """
    n_const = sum(1 for t in tokens if t.kind == "const")
    if n_const != len(consts):
        raise ConstArityMismatch(f"{n_const} slots, {len(consts)} constants")
    n = X.shape[0]
    stack: list[np.ndarray] = []
    ci = n_const
    with np.errstate(all="ignore"):
        for t in reversed(tokens):
            kind = t.kind
            if kind == "variable":
                stack.append(X[:, t.index - 1])
            elif kind == "binary":
                a = stack.pop()
                stack.append(_apply(t.name, a, stack.pop()))
            elif kind == "unary":
                stack.append(_apply(t.name, stack.pop()))
            elif kind == "literal":
                stack.append(np.full(n, float(t.value)))
            else:
                ci -= 1
                stack.append(np.full(n, float(consts[ci])))
    out = stack[0]
    if out.shape != (n,):
        out = np.broadcast_to(out, (n,)).astype(float)
    if strict and not np.all(np.isfinite(out)):
        return None
    return out


def evaluate(tree: Node | Sequence[Token], X: np.ndarray, consts: Sequence[float] = (),
             strict: bool = True) -> np.ndarray | None:
    tokens = to_prefix(tree) if isinstance(tree, Node) else tree
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return evaluate_tokens(tokens, X, consts, strict)


_PRECEDENCE = {"add": 1, "sub": 1, "mul": 2, "div": 2, "pow": 3}


def to_infix(tree: Node) -> str:
    def render(node: Node) -> tuple[str, int]:
        t = node.token
        if t.arity == 0:
            if t.kind == "literal" and float(t.value) < 0:
                return f"({t.name})", 9
            return t.name, 9
        if t.arity == 1:
            inner, _ = render(node.children[0])
            if t.name.startswith("pow") and t.name != "pow":
                base, prec = render(node.children[0])
                base = base if prec > 3 else f"({base})"
                return f"{base}**{t.name[3:]}", 3
            return f"{t.name}({inner})", 9
        prec = _PRECEDENCE[t.name]
        left, lp = render(node.children[0])
        right, rp = render(node.children[1])
        if lp < prec or (t.name == "pow" and lp == prec):
            left = f"({left})"
        if rp < prec or (rp == prec and t.name in ("sub", "div", "pow")):
            right = f"({right})"
        return f"{left}{_INFIX_SYMBOL[t.name]}{right}", prec

    return render(tree)[0]


_AST_BINOPS = {ast.Add: "add", ast.Sub: "sub", ast.Mult: "mul", ast.Div: "div", ast.Pow: "pow"}
_FUNCS = {"exp", "log", "sin", "cos", "sqrt"}


def from_infix(text: str) -> Node:
    """Parse a Python-style infix formula (``x1*x2/(3*x4)``, ``sin(x1)**2``).

    Integer powers become repeated multiplication, unary minus becomes a
    multiplication by the literal ``-1``.
    """

    def build(node: ast.AST) -> Node:
        if isinstance(node, ast.BinOp):
            op = _AST_BINOPS.get(type(node.op))
            if op is None:
                raise ExprError(f"unsupported operator {ast.dump(node.op)}")
            left, right = build(node.left), build(node.right)
            if op == "pow" and right.token.kind == "literal" and isinstance(right.token.value, int) and 1 <= right.token.value <= 12:
                out = left
                for _ in range(right.token.value - 1):
                    out = Node(token("mul"), (out, left))
                return out
            return Node(token(op), (left, right))
        if isinstance(node, ast.UnaryOp):
            operand = build(node.operand)
            if isinstance(node.op, ast.UAdd):
                return operand
            if isinstance(node.op, ast.USub):
                if operand.token.kind == "literal":
                    return Node(literal(-operand.token.value))
                return Node(token("mul"), (Node(token("-1")), operand))
            raise ExprError("unsupported unary operator")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS or len(node.args) != 1:
                raise ExprError(f"unsupported call in {text!r}")
            return Node(token(node.func.id), (build(node.args[0]),))
        if isinstance(node, ast.Name):
            return Node(token(node.id))
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return Node(literal(node.value))
        raise ExprError(f"cannot parse {text!r}")

    return build(ast.parse(text.strip(), mode="eval").body)
