"""Pre-training equation corpora, benchmark problem specs and dataset sampling."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import registry as _registry
from .cas import Equivalence, symbolically_equal
from .expr import Node, Token, bind_constants, evaluate, from_infix, parse_prefix, prefix_text, token
from .grammar import LibrarySpec, library_from_name

__all__ = [
    "SamplingSpec", "ProblemSpec", "Dataset", "SkeletonSampler", "CorpusRecord",
    "ExhaustedResampling", "GroundTruthInvalidOnDomain", "TABLE12_WEIGHTS",
    "sample_skeleton", "build_pretrain_corpus", "write_corpus", "read_corpus",
    "sample_problem_dataset", "sample_dataset", "registry", "get_problem",
    "problem_set", "CorpusStats",
]

CORPUS_VERSION = 1

# unnormalized operator weights for random equation trees
TABLE12_WEIGHTS = {
    "add": 10, "mul": 10, "sub": 5, "div": 5,
    "pow2": 4, "pow3": 2, "pow4": 1, "pow5": 1,
    "log": 4, "exp": 4, "sin": 4, "cos": 4,
}


class ExhaustedResampling(RuntimeError):
    pass


class GroundTruthInvalidOnDomain(RuntimeError):
    pass


_SPEC_RE = re.compile(r"^\s*([UE])\s*\(\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*,\s*([0-9]+)\s*\)\s*$")


@dataclass(frozen=True)
class SamplingSpec:
    """``U(a, b, c)``: c uniform rows; ``E(a, b, c)``: c evenly spaced rows."""

    kind: str
    low: float
    high: float
    count: int

    @classmethod
    def parse(cls, text: str) -> "SamplingSpec":
        m = _SPEC_RE.match(text)
        if not m:
            raise ValueError(f"bad sampling spec {text!r}")
        return cls(m.group(1), float(m.group(2)), float(m.group(3)), int(m.group(4)))

    def __str__(self) -> str:
        return f"{self.kind}({self.low:g},{self.high:g},{self.count})"

    def with_count(self, count: int) -> "SamplingSpec":
        return SamplingSpec(self.kind, self.low, self.high, count)

    def draw(self, d: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "E":
            col = np.linspace(self.low, self.high, self.count)
            return np.repeat(col[:, None], d, axis=1)
        return rng.uniform(self.low, self.high, size=(self.count, d))


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    seed: int | None = None
    sigma_y: float = field(init=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != y.shape[0] or y.shape[0] < 1:
            raise ValueError("X and y need the same, non-zero number of rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset entries must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sigma_y", float(np.std(y)))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subsample(self, n: int, rng: np.random.Generator) -> "Dataset":
        if n >= self.n:
            return self
        idx = np.sort(rng.choice(self.n, size=n, replace=False))
        return Dataset(self.X[idx], self.y[idx], self.seed)


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    ground_truth: str  # infix text; empty for black-box problems
    sampling: SamplingSpec
    library_name: str

    @cached_property
    def tree(self) -> Node | None:
        return from_infix(self.ground_truth) if self.ground_truth else None

    @cached_property
    def library(self) -> LibrarySpec:
        return library_from_name(self.library_name)

    @property
    def d(self) -> int:
        return self.library.d

    def to_dict(self) -> dict:
        return {"name": self.name, "ground_truth": self.ground_truth,
                "ground_truth_prefix": prefix_text(self.tree) if self.tree else "",
                "sampling": str(self.sampling), "library": self.library_name, "d": self.d}


def registry() -> list[ProblemSpec]:
    return [ProblemSpec(n, f, SamplingSpec.parse(s), lib) for n, f, s, lib in _registry.ENTRIES]


def get_problem(name: str) -> ProblemSpec:
    for p in registry():
        if p.name.lower() == name.lower():
            return p
    raise KeyError(f"unknown problem {name!r}")


def problem_set(name: str) -> list[ProblemSpec]:
    names = {r[0] for r in _registry.PROBLEM_SETS[name]}
    return [p for p in registry() if p.name in names]


def registry_json() -> str:
    return json.dumps([p.to_dict() for p in registry()], indent=2)


def sample_problem_dataset(spec: ProblemSpec, split: str = "train", seed: int = 0,
                           max_tries: int = 100) -> Dataset:
    """Train and test sets use independent streams; ``E`` specs give identical points."""
    if spec.tree is None:
        raise ValueError(f"{spec.name} has no ground truth")
    split_id = {"train": 0, "test": 1}[split]
    rng = np.random.default_rng(np.random.SeedSequence([seed, split_id]))
    for _ in range(max_tries):
        X = spec.sampling.draw(spec.d, rng)
        y = evaluate(spec.tree, X)
        if y is not None:
            return Dataset(X, y, seed)
        if spec.sampling.kind == "E":
            break
    raise GroundTruthInvalidOnDomain(f"{spec.name} is not finite on {spec.sampling}")


@dataclass
class SkeletonSampler:
    d: int
    l_min: int = 3
    l_max: int = 5
    weights: dict[str, float] = field(default_factory=lambda: dict(TABLE12_WEIGHTS))
    p_variable: float = 0.8
    int_low: int = 1
    int_high: int = 5
    has_const: bool = False
    p_const: float = 0.5
    max_const: int = 3

    def __post_init__(self):
        if any(w <= 0 for w in self.weights.values()):
            raise ValueError("operator weights must be strictly positive")
        if not 1 <= self.l_min <= self.l_max:
            raise ValueError("need 1 <= l_min <= l_max")
        if not any(token(op).arity == 2 for op in self.weights) and self.l_max > 1:
            raise ValueError("multi-leaf trees need a binary operator")
        self._ops = [token(op) for op in self.weights]
        w = np.array([self.weights[op] for op in self.weights], dtype=float)
        self._probs = w / w.sum()
        self._cum = np.cumsum(self._probs)


@dataclass
class _Slot:
    tok: Token | None = None
    kids: list = field(default_factory=list)
    value: float = 0.0


def sample_skeleton(rng: np.random.Generator, sampler: SkeletonSampler) -> tuple[Node, tuple[float, ...]]:
    """Random unary-binary tree; returns the tree and placeholder values (if any)."""
    leaves = int(rng.integers(sampler.l_min, sampler.l_max + 1))
    ops: list[Token] = []
    n_binary = 0
    while n_binary < leaves - 1:
        i = int(np.searchsorted(sampler._cum, rng.random() * sampler._cum[-1], side="right"))
        op = sampler._ops[min(i, len(sampler._ops) - 1)]
        ops.append(op)
        n_binary += op.arity == 2
    root = _Slot()
    open_slots = [root]
    for op in ops:
        slot = open_slots.pop(int(rng.integers(len(open_slots))))
        slot.tok = op
        slot.kids = [_Slot() for _ in range(op.arity)]
        open_slots.extend(slot.kids)
    n_const = 0
    for slot in open_slots:
        if rng.random() < sampler.p_variable:
            slot.tok = token(f"x{int(rng.integers(1, sampler.d + 1))}")
        else:
            value = int(rng.integers(sampler.int_low, sampler.int_high + 1))
            if sampler.has_const and n_const < sampler.max_const and rng.random() < sampler.p_const:
                slot.tok = token("const")
                slot.value = float(rng.uniform(-1.0, 1.0))
                n_const += 1
            else:
                slot.tok = token(str(value))

    def build(slot: _Slot) -> Node:
        return Node(slot.tok, tuple(build(k) for k in slot.kids))

    tree = build(root)
    used = sorted({n.token.index for n in tree if n.token.kind == "variable"})
    relabel = {old: new for new, old in enumerate(used, start=1)}
    if any(k != v for k, v in relabel.items()):
        tree = parse_prefix([token(f"x{relabel[t.index]}") if t.kind == "variable" else t
                             for t in (n.token for n in tree)])
    consts = tuple(s.value for s in _preorder_leaves(root) if s.tok.kind == "const")
    return tree, consts


def _preorder_leaves(root: _Slot) -> list[_Slot]:
    out, stack = [], [root]
    while stack:
        s = stack.pop()
        if not s.kids:
            out.append(s)
        stack.extend(reversed(s.kids))
    return out


@dataclass(frozen=True)
class CorpusRecord:
    prefix: str
    consts: tuple[float, ...] = ()

    @cached_property
    def tree(self) -> Node:
        return parse_prefix(self.prefix)

    @property
    def bound_tree(self) -> Node:
        return bind_constants(self.tree, self.consts) if self.consts else self.tree


def sample_dataset(tree: Node, consts: Sequence[float], spec: SamplingSpec, d: int,
                   rng: np.random.Generator) -> Dataset | None:
    """One dataset from a corpus equation; ``None`` if non-finite or constant."""
    X = spec.draw(d, rng)
    y = evaluate(tree, X, consts)
    if y is None:
        return None
    with np.errstate(over="ignore", invalid="ignore"):
        sd = float(np.std(y))
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, float(np.max(np.abs(y)))):
        return None
    return Dataset(X, y)


@dataclass
class CorpusStats:
    accepted: int = 0
    rejected_invalid: int = 0
    rejected_holdout: int = 0
    rejected_novar: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def build_pretrain_corpus(m: int, sampler: SkeletonSampler, domain: SamplingSpec,
                          holdouts: Iterable[Node] = (), seed: int = 0,
                          max_rejections: int = 100,
                          stats: CorpusStats | None = None) -> list[CorpusRecord]:
    """``m`` skeletons; record ``i`` uses the stream ``default_rng(seed + i)``.

    Skeletons without variables, with a non-finite or constant probe dataset,
    or equal (or undecidably close) to a holdout are rejected and resampled.
    """
    holdouts = list(holdouts)
    stats = stats if stats is not None else CorpusStats()
    probe_domain = (domain.low, domain.high)
    out = []
    for i in range(m):
        rng = np.random.default_rng(seed + i)
        for _ in range(max_rejections):
            tree, consts = sample_skeleton(rng, sampler)
            if not any(n.token.kind == "variable" for n in tree):
                stats.rejected_novar += 1
                continue
            if sample_dataset(tree, consts, domain.with_count(10 * sampler.d), sampler.d, rng) is None:
                stats.rejected_invalid += 1
                continue
            bound = bind_constants(tree, consts) if consts else tree
            if any(symbolically_equal(bound, h, domain=probe_domain) != Equivalence.NOT_EQUAL
                   for h in holdouts):
                stats.rejected_holdout += 1
                continue
            out.append(CorpusRecord(prefix_text(tree), consts))
            stats.accepted += 1
            break
        else:
            raise ExhaustedResampling(f"record {i}: {max_rejections} consecutive rejections")
    return out


def write_corpus(path: str | Path, records: Sequence[CorpusRecord], library: str,
                 domain: SamplingSpec, d: int) -> None:
    lines = [f"#corpus\tversion={CORPUS_VERSION}\tlibrary={library}\tdomain={domain}\td={d}"]
    for r in records:
        lines.append(r.prefix + "\t" + ",".join(repr(c) for c in r.consts))
    Path(path).write_text("\n".join(lines) + "\n")


def read_corpus(path: str | Path) -> tuple[dict, list[CorpusRecord]]:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#corpus"):
        raise ValueError(f"{path}: missing corpus header")
    header = dict(kv.split("=", 1) for kv in text[0].split("\t")[1:])
    if int(header.get("version", -1)) != CORPUS_VERSION:
        raise ValueError(f"{path}: unsupported corpus version {header.get('version')}")
    header["domain"] = SamplingSpec.parse(header["domain"])
    header["d"] = int(header["d"])
    records = []
    for line in text[1:]:
        if not line.strip():
            continue
        prefix, _, consts = line.partition("\t")
        values = tuple(float(c) for c in consts.split(",") if c)
        records.append(CorpusRecord(prefix, values))
    return header, records
