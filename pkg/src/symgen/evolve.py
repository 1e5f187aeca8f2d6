"""Genetic-programming refinement seeded with generator samples."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .expr import subtree_end
from .grammar import LibrarySpec, check_sequence
from .optim import Evaluator, RewardRecord

__all__ = ["GPConfig", "gp_refine", "crossover", "mutate", "MUTATIONS"]

MUTATIONS = ("uniform", "replace", "insert", "shrink")
_RETRIES = 3

Ids = tuple[int, ...]


@dataclass
class GPConfig:
    generations: int = 25
    crossover_prob: float = 0.5
    mutation_prob: float = 0.5
    tournament_size: int = 5
    mutate_tree_max: int = 3
    n_elites: int = 50

    def __post_init__(self):
        if not (0 <= self.crossover_prob <= 1 and 0 <= self.mutation_prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.generations < 1 or self.tournament_size < 2:
            raise ValueError("need generations >= 1 and tournament_size >= 2")


def _arities(ids: Sequence[int], lib: LibrarySpec) -> list[int]:
    return [int(lib.arity[i]) for i in ids]


def _span(ids: Sequence[int], lib: LibrarySpec, start: int) -> int:
    return subtree_end(_arities(ids, lib), start)


def random_subtree(lib: LibrarySpec, depth: int, rng: np.random.Generator) -> list[int]:
    """Grow-method random subtree of depth at most ``depth`` (leaves at depth 0)."""
    ops = np.nonzero(~lib.terminal)[0]
    leaves = np.nonzero(lib.terminal)[0]
    out: list[int] = []

    def grow(level: int):
        if level == 0 or rng.random() < len(leaves) / len(lib):
            out.append(int(rng.choice(leaves)))
            return
        op = int(rng.choice(ops))
        out.append(op)
        for _ in range(lib.arity[op]):
            grow(level - 1)

    grow(depth)
    return out


def crossover(a: Ids, b: Ids, lib: LibrarySpec, rng: np.random.Generator) -> tuple[Ids, Ids]:
    """Swap uniformly chosen subtrees; invalid offspring fall back to their parent."""
    if a == b:
        return a, b
    out = []
    for x, y in ((a, b), (b, a)):
        child = x
        for _ in range(_RETRIES):
            i = int(rng.integers(len(x)))
            j = int(rng.integers(len(y)))
            cand = x[:i] + y[j:_span(y, lib, j)] + x[_span(x, lib, i):]
            if check_sequence(cand, lib):
                child = cand
                break
        out.append(child)
    return out[0], out[1]


def _mutate_once(ids: Ids, kind: str, lib: LibrarySpec, depth: int, rng: np.random.Generator) -> Ids:
    i = int(rng.integers(len(ids)))
    end = _span(ids, lib, i)
    if kind == "uniform":
        return ids[:i] + tuple(random_subtree(lib, depth, rng)) + ids[end:]
    if kind == "replace":
        same = np.nonzero(lib.arity == lib.arity[ids[i]])[0]
        return ids[:i] + (int(rng.choice(same)),) + ids[i + 1:]
    if kind == "insert":
        op = int(rng.choice(np.nonzero(~lib.terminal)[0]))
        node = ids[i:end]
        if lib.arity[op] == 1:
            new = (op,) + node
        else:
            leaf = (int(rng.choice(np.nonzero(lib.terminal)[0])),)
            new = (op,) + (node + leaf if rng.random() < 0.5 else leaf + node)
        return ids[:i] + new + ids[end:]
    # shrink: replace an internal node with one of its children
    internal = [p for p, t in enumerate(ids) if lib.arity[t] > 0]
    if not internal:
        return ids
    i = internal[int(rng.integers(len(internal)))]
    end = _span(ids, lib, i)
    children, c = [], i + 1
    while c < end:
        e = _span(ids, lib, c)
        children.append(ids[c:e])
        c = e
    return ids[:i] + children[int(rng.integers(len(children)))] + ids[end:]


def mutate(ids: Ids, lib: LibrarySpec, rng: np.random.Generator, depth: int = 3,
           kind: str | None = None) -> Ids:
    """One of uniform, node-replacement, insertion or shrink mutation."""
    kind = kind or MUTATIONS[int(rng.integers(len(MUTATIONS)))]
    for _ in range(_RETRIES):
        cand = _mutate_once(ids, kind, lib, depth, rng)
        if cand != ids and check_sequence(cand, lib):
            return cand
    return ids


def gp_refine(seeds: Sequence[Sequence[int]], lib: LibrarySpec, evaluator: Evaluator,
              config: GPConfig | None = None, rng: np.random.Generator | None = None,
              stop_on_recovery: bool = True) -> list[tuple[Ids, RewardRecord]]:
    """Evolve a population seeded with ``seeds`` (library id sequences).

    Returns up to ``min(len(seeds), n_elites)`` distinct best individuals
    seen over all generations, best first.
    """
    if not seeds:
        raise ValueError("seed population is empty")
    cfg = config or GPConfig()
    rng = rng if rng is not None else np.random.default_rng()
    tokens = lib.tokens
    pop: list[Ids] = [tuple(s) for s in seeds]
    hall: dict[Ids, RewardRecord] = {}

    def fitness(ind: Ids) -> float:
        rec = evaluator([tokens[i] for i in ind])
        hall[ind] = rec
        return rec.reward

    def done() -> bool:
        return evaluator.counter.exhausted or (stop_on_recovery and evaluator.recovered)

    fit = [fitness(ind) for ind in pop]
    for _ in range(cfg.generations):
        if done():
            break
        best = pop[int(np.argmax(fit))]
        # tournament selection
        picks = rng.integers(len(pop), size=(len(pop), cfg.tournament_size))
        chosen = [pop[max(row, key=lambda j: fit[j])] for row in picks]
        # variation: pairwise crossover, then mutation
        for i in range(1, len(chosen), 2):
            if rng.random() < cfg.crossover_prob:
                chosen[i - 1], chosen[i] = crossover(chosen[i - 1], chosen[i], lib, rng)
        for i in range(len(chosen)):
            if rng.random() < cfg.mutation_prob:
                chosen[i] = mutate(chosen[i], lib, rng, cfg.mutate_tree_max)
        new_fit = [fitness(ind) for ind in chosen]
        # elitism: the previous best replaces the worst offspring
        if best not in chosen:
            worst = int(np.argmin(new_fit))
            chosen[worst], new_fit[worst] = best, hall[best].reward
        pop, fit = chosen, new_fit
    n = min(len(seeds), cfg.n_elites)
    ranked = sorted(hall.items(), key=lambda kv: -kv[1].reward)
    return ranked[:n]
