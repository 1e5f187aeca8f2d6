"""Token libraries, in-situ constraint masks and parent/sibling tree state.

Constraints enforced while a prefix sequence is generated:

a. no completion before ``min_len`` tokens
b. no operator whose minimal completion would exceed ``max_len``
c. a unary operator's child is not its inverse (``exp``/``log``)
d. no trigonometric token below any trigonometric ancestor
e. the last child of an operator is not a constant when all earlier children are
f. at most ``max_const_slots`` constant placeholders
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .expr import TRIG, Token, token

__all__ = [
    "LibrarySpec", "GrammarState", "AlreadyComplete", "koza", "synth",
    "library_from_name", "valid_next_mask", "tree_state", "check_sequence",
    "NONE_ID",
]

INVERSE = {"exp": "log", "log": "exp"}
NONE_ID = -1  # tree-state sentinel for "no parent / no sibling"


class AlreadyComplete(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LibrarySpec:
    tokens: tuple[Token, ...]
    name: str = "custom"
    min_len: int = 4
    max_len: int = 30
    max_const_slots: int = 3

    def __post_init__(self):
        if not any(t.arity == 0 for t in self.tokens):
            raise ValueError("library needs at least one terminal token")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if len({t.name for t in self.tokens}) != len(self.tokens):
            raise ValueError("duplicate tokens in library")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, LibrarySpec) and self.fingerprint == other.fingerprint

    def __hash__(self) -> int:
        return hash(self.fingerprint)

    @cached_property
    def index(self) -> dict[str, int]:
        return {t.name: i for i, t in enumerate(self.tokens)}

    @cached_property
    def d(self) -> int:
        return max((t.index for t in self.tokens if t.kind == "variable"), default=0)

    @cached_property
    def has_const(self) -> bool:
        return any(t.kind == "const" for t in self.tokens)

    @cached_property
    def arity(self) -> np.ndarray:
        return np.array([t.arity for t in self.tokens], dtype=np.int64)

    @cached_property
    def terminal(self) -> np.ndarray:
        return self.arity == 0

    @cached_property
    def constlike(self) -> np.ndarray:
        return np.array([t.kind in ("literal", "const") for t in self.tokens])

    @cached_property
    def const(self) -> np.ndarray:
        return np.array([t.kind == "const" for t in self.tokens])

    @cached_property
    def trig(self) -> np.ndarray:
        return np.array([t.name in TRIG for t in self.tokens])

    @cached_property
    def inverse_of(self) -> list[int]:
        """Token index of each token's inverse, or -1."""
        return [self.index.get(INVERSE.get(t.name, ""), -1) for t in self.tokens]

    @cached_property
    def fingerprint(self) -> str:
        text = "|".join(t.name for t in self.tokens)
        text += f";{self.min_len};{self.max_len};{self.max_const_slots}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def ids(self, tokens: Iterable[Token | str]) -> list[int]:
        out = []
        for t in tokens:
            name = t.name if isinstance(t, Token) else t
            if name not in self.index:
                raise KeyError(f"token {name!r} not in library {self.name}")
            out.append(self.index[name])
        return out

    def with_lengths(self, min_len: int, max_len: int) -> "LibrarySpec":
        return LibrarySpec(self.tokens, self.name, min_len, max_len, self.max_const_slots)

    def to_dict(self) -> dict:
        return {"name": self.name, "tokens": [t.name for t in self.tokens],
                "min_len": self.min_len, "max_len": self.max_len,
                "max_const_slots": self.max_const_slots}

    @classmethod
    def from_dict(cls, data: dict) -> "LibrarySpec":
        return cls(tuple(token(n) for n in data["tokens"]), data.get("name", "custom"),
                   data.get("min_len", 4), data.get("max_len", 30), data.get("max_const_slots", 3))


KOZA_OPS = ("add", "sub", "mul", "div", "exp", "log", "sin", "cos")
SYNTH_OPS = ("add", "sub", "mul", "div")


def _build(ops: Sequence[str], d: int, const: bool, name: str, **kw) -> LibrarySpec:
    names = list(ops) + [f"x{i}" for i in range(1, d + 1)] + (["const"] if const else [])
    return LibrarySpec(tuple(token(n) for n in names), name, **kw)


def koza(d: int, const: bool = False, **kw) -> LibrarySpec:
    return _build(KOZA_OPS, d, const, f"koza-d{d}" + ("-const" if const else ""), **kw)


def synth(d: int = 12, **kw) -> LibrarySpec:
    return _build(SYNTH_OPS, d, False, f"synth-d{d}", **kw)


_NAME_RE = re.compile(r"^(koza|synth)-d(\d+)(-const)?$")


def library_from_name(name: str, **kw) -> LibrarySpec:
    """``koza-d2``, ``koza-d1-const``, ``synth-d12`` or ``tokens:add,mul,x1``."""
    if name.startswith("tokens:"):
        names = [n.strip() for n in name[len("tokens:"):].split(",") if n.strip()]
        return LibrarySpec(tuple(token(n) for n in names), name, **kw)
    m = _NAME_RE.match(name)
    if not m:
        raise ValueError(f"unknown library {name!r}")
    kind, d, const = m.group(1), int(m.group(2)), bool(m.group(3))
    if kind == "koza":
        return koza(d, const, **kw)
    if const:
        return _build(SYNTH_OPS, d, True, name, **kw)
    return synth(d, **kw)


@dataclass
class _Frame:
    tok: int
    remaining: int
    filled: int = 0
    first_child: int = NONE_ID
    all_const: bool = True
    trig_ctx: bool = False  # this token or an ancestor is trigonometric


@dataclass
class GrammarState:
    """Incremental view of a partial prefix sequence."""

    lib: LibrarySpec
    tokens: list[int] = field(default_factory=list)
    stack: list[_Frame] = field(default_factory=list)
    open: int = 1
    n_const: int = 0

    @classmethod
    def replay(cls, lib: LibrarySpec, ids: Iterable[int]) -> "GrammarState":
        state = cls(lib)
        for i in ids:
            state.push(i)
        return state

    @property
    def complete(self) -> bool:
        return self.open == 0

    def push(self, tok: int) -> None:
        if self.open == 0:
            raise AlreadyComplete("sequence is already complete")
        lib = self.lib
        arity = int(lib.arity[tok])
        trig_ctx = bool(lib.trig[tok])
        if self.stack:
            top = self.stack[-1]
            trig_ctx = trig_ctx or top.trig_ctx
            if top.filled == 0:
                top.first_child = tok
            top.filled += 1
            top.all_const = top.all_const and bool(lib.constlike[tok])
            top.remaining -= 1
            if top.remaining == 0:
                self.stack.pop()
        if arity:
            self.stack.append(_Frame(tok, arity, trig_ctx=trig_ctx))
        self.tokens.append(tok)
        self.open += arity - 1
        self.n_const += bool(lib.const[tok])

    def mask(self) -> np.ndarray:
        if self.open == 0:
            raise AlreadyComplete("sequence is already complete")
        lib = self.lib
        length = len(self.tokens)
        # (b) minimal completion of the whole sequence must fit in max_len
        length_ok = length + self.open + lib.arity <= lib.max_len
        # (a) closing the last slot too early
        if self.open == 1 and length + 1 < lib.min_len:
            length_ok &= ~lib.terminal
        m = length_ok.copy()
        if self.stack:
            top = self.stack[-1]
            inv = lib.inverse_of[top.tok]
            if lib.arity[top.tok] == 1 and inv >= 0:
                m[inv] = False  # (c)
            if top.trig_ctx:
                m &= ~lib.trig  # (d)
            if top.remaining == 1 and top.all_const:
                m &= ~lib.constlike  # (e)
        if self.n_const >= lib.max_const_slots:
            m &= ~lib.const  # (f)
        if not m.any():
            m = length_ok if length_ok.any() else lib.terminal.copy()
        return m

    def allowed(self, tok: int) -> bool:
        """Scalar version of ``mask()[tok]`` (without the all-masked fallback)."""
        lib = self.lib
        length = len(self.tokens)
        arity = lib.arity[tok]
        if self.open == 0 or length + self.open + arity > lib.max_len:
            return False
        if arity == 0 and self.open == 1 and length + 1 < lib.min_len:
            return False
        if self.stack:
            top = self.stack[-1]
            if lib.arity[top.tok] == 1 and lib.inverse_of[top.tok] == tok:
                return False
            if top.trig_ctx and lib.trig[tok]:
                return False
            if top.remaining == 1 and top.all_const and lib.constlike[tok]:
                return False
        if lib.const[tok] and self.n_const >= lib.max_const_slots:
            return False
        return True

    def tree_state(self) -> tuple[int, int]:
        """(parent id, sibling id) for the next position; ``NONE_ID`` when absent."""
        if self.open == 0:
            raise AlreadyComplete("sequence is already complete")
        if not self.stack:
            return NONE_ID, NONE_ID
        top = self.stack[-1]
        sibling = top.first_child if top.filled == 1 and self.lib.arity[top.tok] == 2 else NONE_ID
        return top.tok, sibling


def valid_next_mask(partial: Sequence[Token | str], lib: LibrarySpec) -> np.ndarray:
    return GrammarState.replay(lib, lib.ids(partial)).mask()


def tree_state(partial: Sequence[Token | str], lib: LibrarySpec) -> tuple[int, int]:
    return GrammarState.replay(lib, lib.ids(partial)).tree_state()


def check_sequence(ids: Sequence[int], lib: LibrarySpec) -> bool:
    """True when ``ids`` is complete and every token was allowed at its position."""
    state = GrammarState(lib)
    for i in ids:
        if state.open == 0 or not state.allowed(i):
            return False
        state.push(i)
    return state.open == 0
