"""Rewards, policy-gradient losses, regularizers, Adam and constant fitting."""

from __future__ import annotations

import heapq
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Sequence

import numpy as np
import torch
from scipy.optimize import minimize

from .cas import Equivalence, symbolically_equal
from .corpus import Dataset
from .expr import Node, Token, bind_constants, evaluate_tokens, parse_prefix, prefix_text, to_prefix

__all__ = [
    "ZeroVariance", "EmptyQueue", "NonFiniteGradient", "BudgetCounter", "RewardRecord",
    "TrainConfig", "MaxRewardQueue", "Baseline", "Adam", "Evaluator",
    "nmse", "nmse_values", "reward", "risk_filter", "vpg_loss", "pqt_loss",
    "entropy_loss", "length_penalty", "length_prior_loss", "regularizers",
    "grad_step", "fit_constants",
]

# fitted objective value used for invalid points so the line search backs off
_PENALTY = 1e12


class ZeroVariance(ValueError):
    pass


class EmptyQueue(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class BudgetCounter:
    """Thread-safe count of equation evaluations against an optional limit."""

    def __init__(self, limit: int | None = None, count: int = 0):
        self.limit = limit
        self.count = count
        self._lock = threading.Lock()

    def charge(self, n: int = 1) -> int:
        with self._lock:
            self.count += n
            return self.count

    @property
    def exhausted(self) -> bool:
        return self.limit is not None and self.count >= self.limit

    @property
    def remaining(self) -> float:
        return math.inf if self.limit is None else max(self.limit - self.count, 0)


@dataclass
class RewardRecord:
    nmse: float | None  # None marks an invalid equation
    reward: float
    eval_count_delta: int
    consts: tuple[float, ...] = ()
    prefix: str = ""
    recovered: bool = False

    @property
    def valid(self) -> bool:
        return self.nmse is not None


@dataclass
class TrainConfig:
    k: int = 500
    t: int = 5
    alpha: float = 0.5
    entropy_weight: float = 0.003
    entropy_decay: float = 0.9
    lr: float = 1e-3
    risk_eps: float = 0.02
    queue_size: int = 10
    patience: int = 100
    min_len: int = 4
    max_len: int = 30
    length_weight: float = 0.01
    length_target: float | None = None  # midpoint of [min_len, max_len] when unset
    budget: int = 2_000_000

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 < self.risk_eps < 1:
            raise ValueError("risk_eps must lie in (0, 1)")
        if self.queue_size < 1 or self.budget < 0 or self.k < 1 or self.t < 1:
            raise ValueError("queue_size, k and t must be >= 1 and budget >= 0")
        if self.length_target is None:
            self.length_target = (self.min_len + self.max_len) / 2


# ----------------------------------------------------------------- rewards
def nmse_values(y: np.ndarray, yhat: np.ndarray | None, sigma_y: float | None = None) -> float | None:
    if sigma_y is None:
        sigma_y = float(np.std(y))
    if sigma_y == 0:
        raise ZeroVariance("target has zero variance")
    if yhat is None:
        return None
    with np.errstate(over="ignore"):
        value = float(np.mean((y - yhat) ** 2) / sigma_y)
    return value if math.isfinite(value) else None


def nmse(f: Node | Sequence[Token], consts: Sequence[float], dataset: Dataset) -> float | None:
    """Normalized mean squared error, or None when ``f`` is invalid on the data."""
    if dataset.sigma_y == 0:
        raise ZeroVariance("target has zero variance")
    tokens = to_prefix(f) if isinstance(f, Node) else f
    return nmse_values(dataset.y, evaluate_tokens(tokens, dataset.X, consts), dataset.sigma_y)


def reward(value: float | None) -> float:
    return 0.0 if value is None else 1.0 / (1.0 + value)


# -------------------------------------------------------- constant fitting
def fit_constants(skeleton: Node | Sequence[Token], dataset: Dataset,
                  counter: BudgetCounter | None = None, max_iter: int = 100,
                  gtol: float = 1e-8, rel_step: float = 1e-6) -> tuple[tuple[float, ...], float | None, int]:
    """BFGS over constant slots from an all-ones start.

    Returns (constants, nmse, evaluations).  Every objective evaluation,
    including finite-difference probes and the final one, is charged.
    """
    tokens = to_prefix(skeleton) if isinstance(skeleton, Node) else list(skeleton)
    n_slots = sum(1 for t in tokens if t.kind == "const")
    if dataset.sigma_y == 0:
        raise ZeroVariance("target has zero variance")
    evals = 0
    best: list[Any] = [None, None]

    def objective(c: np.ndarray) -> float:
        nonlocal evals
        evals += 1
        value = nmse_values(dataset.y, evaluate_tokens(tokens, dataset.X, tuple(c)), dataset.sigma_y)
        if value is not None and (best[1] is None or value < best[1]):
            best[0], best[1] = tuple(float(v) for v in c), value
        return _PENALTY if value is None else min(value, _PENALTY)

    consts: tuple[float, ...] = ()
    if n_slots:
        x0 = np.ones(n_slots)
        if objective(x0) < _PENALTY:
            with np.errstate(all="ignore"):
                minimize(objective, x0, method="BFGS", jac="3-point",
                         options={"maxiter": max_iter, "gtol": gtol, "finite_diff_rel_step": rel_step})
        consts = best[0] if best[0] is not None else tuple(x0)
    # final evaluation at the returned constants
    evals += 1
    value = nmse_values(dataset.y, evaluate_tokens(tokens, dataset.X, consts), dataset.sigma_y)
    if counter is not None:
        counter.charge(evals)
    return consts, value, evals


class Evaluator:
    """Cached reward computation for one dataset with budget accounting.

    With a ground truth, equations whose reward exceeds ``threshold`` are
    checked for exact symbolic equality; ``evals_at_recovery`` records the
    counter value at the first success.
    """

    def __init__(self, dataset: Dataset, counter: BudgetCounter | None = None,
                 ground_truth: Node | None = None, threshold: float = 0.999,
                 key: Callable[[Sequence[Token]], Hashable] | None = None):
        if dataset.sigma_y == 0:
            raise ZeroVariance("target has zero variance")
        self.dataset = dataset
        self.counter = counter if counter is not None else BudgetCounter()
        self.ground_truth = ground_truth
        self.threshold = threshold
        self.key = key or (lambda toks: " ".join(t.name for t in toks))
        self.cache: dict[Hashable, RewardRecord] = {}
        self.best: RewardRecord | None = None
        self.evals_at_recovery: int | None = None

    def __call__(self, f: Node | Sequence[Token]) -> RewardRecord:
        tokens = to_prefix(f) if isinstance(f, Node) else list(f)
        k = self.key(tokens)
        hit = self.cache.get(k)
        if hit is not None:
            return hit
        consts, value, evals = fit_constants(tokens, self.dataset, self.counter)
        rec = RewardRecord(value, reward(value), evals, consts, " ".join(t.name for t in tokens))
        if self.ground_truth is not None and rec.reward > self.threshold:
            rec.recovered = self.is_recovery(tokens, consts)
            if rec.recovered and self.evals_at_recovery is None:
                self.evals_at_recovery = self.counter.count
        self.cache[k] = rec
        # a recovered equation stays best even if a later one fits marginally better
        if self.best is None or (rec.recovered and not self.best.recovered) or (
                rec.reward > self.best.reward and not self.best.recovered):
            self.best = rec
        return rec

    def is_recovery(self, tokens: Sequence[Token], consts: Sequence[float]) -> bool:
        tree = bind_constants(parse_prefix(tokens), consts)
        return symbolically_equal(tree, self.ground_truth) == Equivalence.EQUAL

    def many(self, seqs: Sequence[Node | Sequence[Token]]) -> list[RewardRecord]:
        return [self(s) for s in seqs]

    @property
    def recovered(self) -> bool:
        return self.evals_at_recovery is not None


# --------------------------------------------------------------- selection
def risk_filter(rewards: Sequence[float], eps: float) -> np.ndarray:
    """Indices whose reward strictly exceeds the empirical (1 - eps) quantile."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.nonzero(r > np.quantile(r, 1 - eps))[0]


class MaxRewardQueue:
    """Top-``capacity`` entries by reward with unique keys."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._heap: list[tuple[float, int, Hashable]] = []  # min-heap on reward
        self._entries: dict[Hashable, tuple[float, Any]] = {}
        self._tick = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: Hashable) -> bool:
        return key in self._entries

    def push(self, key: Hashable, reward_value: float, item: Any) -> bool:
        """Insert or upgrade ``key``; returns True when the queue changed."""
        old = self._entries.get(key)
        if old is not None:
            if reward_value <= old[0]:
                return False
            self._entries[key] = (reward_value, item)
            self._rebuild()
            return True
        if len(self._entries) >= self.capacity:
            if reward_value <= self._heap[0][0]:
                return False
            _, _, evicted = heapq.heappop(self._heap)
            del self._entries[evicted]
        self._entries[key] = (reward_value, item)
        self._tick += 1
        heapq.heappush(self._heap, (reward_value, self._tick, key))
        return True

    def _rebuild(self) -> None:
        self._heap = []
        for key, (r, _) in self._entries.items():
            self._tick += 1
            self._heap.append((r, self._tick, key))
        heapq.heapify(self._heap)

    def items(self) -> list[tuple[Hashable, float, Any]]:
        """Entries sorted by reward, best first."""
        return sorted(((k, r, it) for k, (r, it) in self._entries.items()), key=lambda e: -e[1])

    def rewards(self) -> list[float]:
        return [r for _, r, _ in self.items()]

    def min_reward(self) -> float:
        return self._heap[0][0] if self._heap else -math.inf


# ------------------------------------------------------------------ losses
@dataclass
class Baseline:
    """EWMA reward baseline, initialized to the first batch mean."""

    alpha: float = 0.5
    value: float | None = None

    def current(self, rewards: np.ndarray) -> float:
        return float(np.mean(rewards)) if self.value is None else self.value

    def update(self, rewards: np.ndarray) -> float:
        m = float(np.mean(rewards))
        self.value = m if self.value is None else self.alpha * m + (1 - self.alpha) * self.value
        return self.value


def vpg_loss(logp: torch.Tensor, rewards: Sequence[float], baseline: Baseline) -> torch.Tensor:
    """REINFORCE surrogate ``-(1/k) sum (R - b) log p``; updates ``baseline``."""
    r = np.asarray(rewards, dtype=float)
    b = baseline.current(r)
    adv = torch.tensor(r - b, dtype=logp.dtype)
    loss = -(adv * logp).mean()
    baseline.update(r)
    return loss


def pqt_loss(logps: torch.Tensor | Sequence[torch.Tensor]) -> torch.Tensor:
    """Negative mean log-likelihood of the queue sequences."""
    if isinstance(logps, torch.Tensor):
        if logps.numel() == 0:
            raise EmptyQueue("priority queue is empty")
        return -logps.mean()
    if len(logps) == 0:
        raise EmptyQueue("priority queue is empty")
    return -torch.stack(list(logps)).mean()


def entropy_loss(entropies: torch.Tensor, valid: torch.Tensor, weight: float, decay: float) -> torch.Tensor:
    """``-weight * mean_b sum_i decay**i H_i`` over (B, L) per-step entropies."""
    L = entropies.shape[1]
    w = torch.tensor(decay ** np.arange(L), dtype=entropies.dtype)
    ent = torch.where(valid, entropies, torch.zeros((), dtype=entropies.dtype))
    return -weight * (ent * w).sum(1).mean()


def length_penalty(lengths: Sequence[int], weight: float, target: float) -> np.ndarray:
    return weight * (np.asarray(lengths, dtype=float) - target) ** 2


def length_prior_loss(logp: torch.Tensor, lengths: Sequence[int], weight: float, target: float) -> torch.Tensor:
    """Reward shaping by the length penalty as a score-function surrogate.

    The penalty is centred on its batch mean, which acts as its baseline.
    """
    pen = length_penalty(lengths, weight, target)
    adv = torch.tensor(pen - pen.mean(), dtype=logp.dtype)
    return (adv * logp).mean()


def regularizers(logp: torch.Tensor, entropies: torch.Tensor, valid: torch.Tensor,
                 lengths: Sequence[int], cfg: TrainConfig) -> torch.Tensor:
    return (entropy_loss(entropies, valid, cfg.entropy_weight, cfg.entropy_decay)
            + length_prior_loss(logp, lengths, cfg.length_weight, cfg.length_target))


# --------------------------------------------------------------- optimizer
@dataclass
class Adam:
    params: list[torch.Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [torch.zeros_like(p) for p in self.params]
            self.v = [torch.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[torch.Tensor | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(self.params, grads)]
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter expected")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            if not torch.isfinite(g).all():
                raise NonFiniteGradient("gradient contains non-finite values")
        self.step_count += 1
        c1 = 1 - self.beta1 ** self.step_count
        c2 = 1 - self.beta2 ** self.step_count
        with torch.no_grad():
            for p, g, m, v in zip(self.params, grads, self.m, self.v):
                m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
                p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {"step": torch.tensor([float(self.step_count)], dtype=torch.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m.detach().clone()
            out[f"v.{i}"] = v.detach().clone()
        return out

    def load_state_tensors(self, state: dict[str, torch.Tensor]) -> None:
        self.step_count = int(state["step"].item())
        for i in range(len(self.params)):
            self.m[i].copy_(state[f"m.{i}"])
            self.v[i].copy_(state[f"v.{i}"])


def grad_step(params: list[torch.Tensor], grads: Sequence[torch.Tensor], state: Adam | None = None,
              lr: float = 1e-3) -> Adam:
    """One Adam update of ``params`` in place; returns the (new) optimizer state."""
    if state is None:
        state = Adam(list(params), lr=lr)
    state.lr = lr
    state.step(grads)
    return state

