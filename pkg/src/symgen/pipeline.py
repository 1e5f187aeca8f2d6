"""Pre-training over sampled dataset mini-batches and per-dataset inference."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .bench import test_metrics
from .corpus import CorpusRecord, Dataset, ProblemSpec, SamplingSpec, sample_dataset, sample_problem_dataset
from .evolve import GPConfig, gp_refine
from .expr import Node, bind_constants, parse_prefix, prefix_text, to_infix, token
from .generator import ArchConfig, Generator, MaskViolation, SampleBatch
from .grammar import LibrarySpec
from .optim import (Adam, Baseline, BudgetCounter, Evaluator, MaxRewardQueue, RewardRecord,
                    TrainConfig, entropy_loss, pqt_loss, regularizers, risk_filter, vpg_loss)

__all__ = [
    "NonFiniteLoss", "IterationRecord", "RunTrace", "InferConfig", "PretrainConfig",
    "PretrainResult", "infer", "pretrain", "add_noise", "expand_sugar", "library_ids",
    "RECOVERED", "BUDGET_EXHAUSTED", "CONVERGED", "solve_problem", "load_traces",
    "validation_reward",
]

log = logging.getLogger(__name__)

RECOVERED = "Recovered"
BUDGET_EXHAUSTED = "BudgetExhausted"
CONVERGED = "Converged"


class NonFiniteLoss(FloatingPointError):
    pass


# ------------------------------------------------------------------ traces
@dataclass
class IterationRecord:
    iteration: int
    evaluations: int
    best_reward: float
    best_equation: str
    valid_fraction: float
    high_reward_fraction: float
    gt_nll: float | None = None


@dataclass
class RunTrace:
    records: list[IterationRecord] = field(default_factory=list)
    status: str = ""
    evaluations: int = 0
    evals_at_recovery: int | None = None
    best_equation: str = ""
    best_infix: str = ""
    best_reward: float = 0.0
    best_consts: tuple[float, ...] = ()
    problem: str = ""
    seed: int | None = None
    test: dict = field(default_factory=dict)  # held-out metrics of the best equation

    @property
    def recovered(self) -> bool:
        return self.status == RECOVERED

    def summary(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "records"}
        out["best_consts"] = list(self.best_consts)
        out["iterations"] = len(self.records)
        return out

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")

    @classmethod
    def read(cls, jsonl: str | Path, summary: str | Path) -> "RunTrace":
        records = [IterationRecord(**json.loads(line)) for line in Path(jsonl).read_text().splitlines() if line]
        data = json.loads(Path(summary).read_text())
        data.pop("iterations", None)
        data["best_consts"] = tuple(data.get("best_consts", ()))
        return cls(records=records, **data)


@dataclass
class InferConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    gp: GPConfig = field(default_factory=GPConfig)
    use_gp: bool = True
    max_iterations: int | None = None
    nll_every: int = 10
    recovery_threshold: float = 0.999
    high_reward: float = 0.9  # reward level counted by ``high_reward_fraction``


def add_noise(dataset: Dataset, alpha: float, rng: np.random.Generator) -> Dataset:
    """Gaussian target noise with std ``alpha * sqrt(sum y^2)``."""
    if alpha < 0:
        raise ValueError("noise level must be >= 0")
    if alpha == 0:
        return dataset
    scale = alpha * math.sqrt(float(np.sum(dataset.y ** 2)))
    return Dataset(dataset.X, dataset.y + rng.normal(0.0, scale, size=dataset.n), dataset.seed)


def _batch_of(gen: Generator, seqs: Sequence[Sequence[int]]) -> SampleBatch:
    traced = [gen.trace(s) for s in seqs]
    return SampleBatch(*[[getattr(t, f)[0] for t in traced] for f in
                         ("ids", "parents", "siblings", "masks", "logp_steps", "entropy_steps")])


def _gt_nll(gen: Generator, V: torch.Tensor, gt_ids: list[int] | None) -> float | None:
    if gt_ids is None:
        return None
    with torch.no_grad():
        try:
            return float(-gen.log_prob(V, gt_ids))
        except MaskViolation:
            return None


def library_ids(tree: Node, lib: LibrarySpec) -> list[int] | None:
    """Library ids of ``tree`` after sugar expansion, or None if not expressible."""
    names = prefix_text(expand_sugar(tree)).split()
    if any(n not in lib.index for n in names):
        return None
    return lib.ids(names)


def expand_sugar(tree: Node) -> Node:
    """Rewrite pow2..pow5 as multiplication chains."""
    name = tree.token.name
    kids = tuple(expand_sugar(c) for c in tree.children)
    if name in ("pow2", "pow3", "pow4", "pow5"):
        n = int(name[-1])
        out = kids[0]
        for _ in range(n - 1):
            out = Node(token("mul"), (kids[0], out))
        return out
    return Node(tree.token, kids)


# --------------------------------------------------------------- inference
def infer(dataset: Dataset, gen: Generator, config: InferConfig | None = None,
          rng: np.random.Generator | None = None, ground_truth: Node | None = None,
          trace_path: str | Path | None = None) -> tuple[RewardRecord, RunTrace]:
    """Search for an equation fitting ``dataset``.

    Each iteration samples ``k`` equations, refines them with GP (unless
    disabled), pushes the risk-filtered best into a max-reward queue and takes
    one priority-queue step on the decoder; the encoder stays frozen.
    """
    cfg = config or InferConfig()
    tc = cfg.train
    rng = rng if rng is not None else np.random.default_rng()
    gen = copy.deepcopy(gen)
    lib = gen.lib
    with torch.no_grad():
        V = gen.encode(dataset).detach()
    for p in gen.encoder_parameters():
        p.requires_grad_(False)
    counter = BudgetCounter(tc.budget)
    ev = Evaluator(dataset, counter, ground_truth, cfg.recovery_threshold)
    queue = MaxRewardQueue(tc.queue_size)
    opt = Adam(gen.decoder_parameters(), lr=tc.lr)
    gt_ids = library_ids(ground_truth, lib) if ground_truth is not None else None
    trace = RunTrace()
    fh = open(trace_path, "w") if trace_path else None
    it = 0
    try:
        while True:
            batch = gen.sample(V, tc.k, rng)
            recs = ev.many([[lib.tokens[i] for i in s] for s in batch.ids])
            cands = [(tuple(s), r) for s, r in zip(batch.ids, recs)]
            if cfg.use_gp and not ev.recovered and not counter.exhausted:
                cands += gp_refine(batch.ids, lib, ev, cfg.gp, rng)
            rewards = np.array([r.reward for _, r in cands])
            keep = set(int(i) for i in risk_filter(rewards, tc.risk_eps))
            keep.add(int(np.argmax(rewards)))  # the single best is always offered
            for i in sorted(keep):
                queue.push(cands[i][1].prefix, cands[i][1].reward, cands[i][0])

            nll = _gt_nll(gen, V, gt_ids) if it % cfg.nll_every == 0 else None
            best = ev.best
            rec = IterationRecord(
                it, counter.count, best.reward, best.prefix,
                float(np.mean([r.valid for r in recs])),
                float(np.mean([r.reward > cfg.high_reward for r in recs])), nll)
            trace.records.append(rec)
            if fh:
                fh.write(json.dumps(asdict(rec)) + "\n")
                fh.flush()
            it += 1
            if ev.recovered:
                trace.status = RECOVERED
                break
            if counter.exhausted:
                trace.status = BUDGET_EXHAUSTED
                break
            if cfg.max_iterations is not None and it >= cfg.max_iterations:
                trace.status = CONVERGED
                break

            # priority-queue step on the decoder, with the entropy bonus on
            # the risk-filtered generator samples
            opt.lr = tc.lr
            q_batch = _batch_of(gen, [s for _, _, s in queue.items()])
            logp, _, _ = gen.score(V, q_batch)
            loss = pqt_loss(logp)
            top = [i for i in keep if i < batch.k]
            if top and tc.entropy_weight:
                _, ent, valid = gen.score(V, batch.subset(top))
                loss = loss + entropy_loss(ent, valid, tc.entropy_weight, tc.entropy_decay)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"iteration {it}: loss {loss.item()}")
            grads = torch.autograd.grad(loss, opt.params, allow_unused=True)
            opt.step(list(grads))
    finally:
        if fh:
            fh.close()
    best = ev.best
    trace.evaluations = counter.count
    trace.evals_at_recovery = ev.evals_at_recovery
    trace.best_equation = best.prefix
    trace.best_reward = best.reward
    trace.best_consts = best.consts
    tree = parse_prefix(best.prefix)
    if best.consts:
        tree = bind_constants(tree, best.consts)
    trace.best_infix = to_infix(tree)
    return best, trace


# ------------------------------------------------------------- pre-training
@dataclass
class PretrainConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    domain: SamplingSpec = field(default_factory=lambda: SamplingSpec("U", 1.0, 5.0, 20))
    max_iterations: int = 1000
    mode: str = "vpg"  # or "ce" for teacher-forced likelihood on corpus equations
    val_every: int = 10
    val_k: int | None = None  # samples per validation dataset, defaults to k
    restore_best: bool = True  # reload the best-validation weights at the end

    def __post_init__(self):
        if self.mode not in ("vpg", "ce"):
            raise ValueError("mode must be 'vpg' or 'ce'")


@dataclass
class PretrainResult:
    gen: Generator
    optimizer: Adam
    history: list[dict]
    best_val: float
    iterations: int
    baseline: float | None = None


def _datasets(records: Sequence[CorpusRecord], domain: SamplingSpec, d: int,
              rng: np.random.Generator, count: int) -> list[tuple[CorpusRecord, Dataset]]:
    out = []
    attempts = 0
    while len(out) < count and attempts < 100 * count:
        attempts += 1
        rec = records[int(rng.integers(len(records)))]
        ds = sample_dataset(rec.tree, rec.consts, domain, d, rng)
        if ds is not None:
            out.append((rec, ds))
    return out


def validation_reward(gen: Generator, val: Sequence[Dataset], k: int, rng: np.random.Generator) -> float:
    """Mean best-of-``k`` reward over the validation datasets."""
    lib = gen.lib
    scores = []
    with torch.no_grad():
        for ds in val:
            batch = gen.sample(gen.encode(ds), k, rng)
            ev = Evaluator(ds)
            scores.append(max(ev([lib.tokens[i] for i in s]).reward for s in batch.ids))
    return float(np.mean(scores))


def pretrain(records: Sequence[CorpusRecord], lib: LibrarySpec, config: PretrainConfig | None = None,
             seed: int = 0, gen: Generator | None = None, arch: ArchConfig | None = None,
             val_records: Sequence[CorpusRecord] | None = None, optimizer_state: dict | None = None,
             log_path: str | Path | None = None) -> PretrainResult:
    """Train the generator on datasets drawn from corpus equations.

    ``vpg`` mode maximizes expected reward over ``t * k`` sampled equations
    per mini-batch with entropy and length regularization; ``ce`` mode
    maximizes the likelihood of the corpus equations themselves (records not
    expressible in the library are skipped).  Early stopping watches the mean
    best-of-batch validation reward.
    """
    if not records:
        raise ValueError("corpus is empty")
    cfg = config or PretrainConfig()
    tc = cfg.train
    rng = np.random.default_rng(seed)
    if gen is None:
        gen = Generator(lib, arch, seed=seed)
    opt = Adam(list(gen.parameters()), lr=tc.lr)
    if optimizer_state:
        opt.load_state_tensors(optimizer_state)
    baseline = Baseline(tc.alpha)
    d = max(lib.d, 1)
    val_rng = np.random.default_rng(seed + 1)
    val_sets = []
    for rec in val_records or records[:100]:
        ds = sample_dataset(rec.tree, rec.consts, cfg.domain, d, val_rng)
        if ds is not None:
            val_sets.append(ds)
    if not val_sets:
        raise ValueError("no validation equation is valid on the domain")
    val_k = cfg.val_k or tc.k
    ce_ids: dict[str, list[int] | None] = {}
    history: list[dict] = []
    best_val = validation_reward(gen, val_sets, val_k, np.random.default_rng(seed + 2))
    history.append({"iteration": 0, "val_reward": best_val})
    best_state = copy.deepcopy(gen.state_dict())
    stale = 0
    fh = open(log_path, "w") if log_path else None
    it = 0
    try:
        for it in range(1, cfg.max_iterations + 1):
            pairs = _datasets(records, cfg.domain, d, rng, tc.t)
            losses = []
            if cfg.mode == "vpg":
                logps, rewards, terms = [], [], []
                for _, ds in pairs:
                    V = gen.encode(ds)
                    batch = gen.sample(V.detach(), tc.k, rng)
                    ev = Evaluator(ds)
                    rewards.extend(ev([lib.tokens[i] for i in s]).reward for s in batch.ids)
                    logp, ent, valid = gen.score(V, batch)
                    logps.append(logp)
                    terms.append(regularizers(logp, ent, valid, batch.lengths, tc))
                logp_all = torch.cat(logps)
                loss = vpg_loss(logp_all, rewards, baseline) + torch.stack(terms).mean()
                mean_r = float(np.mean(rewards))
            else:
                seqs = []
                for rec, ds in pairs:
                    if rec.prefix not in ce_ids:
                        ids = library_ids(rec.tree, lib)
                        if ids is not None:
                            try:
                                gen.trace(ids)
                            except MaskViolation:
                                ids = None
                        ce_ids[rec.prefix] = ids
                    if ce_ids[rec.prefix] is not None:
                        seqs.append((ds, ce_ids[rec.prefix]))
                if not seqs:
                    continue
                loss = torch.stack([-gen.log_prob(ds, ids) for ds, ids in seqs]).mean()
                mean_r = float("nan")
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"iteration {it}: loss {loss.item()}")
            grads = torch.autograd.grad(loss, opt.params, allow_unused=True)
            opt.step(list(grads))
            entry = {"iteration": it, "loss": float(loss.item()), "mean_reward": mean_r}
            if it % cfg.val_every == 0 or it == cfg.max_iterations:
                v = validation_reward(gen, val_sets, val_k, np.random.default_rng(seed + 2))
                entry["val_reward"] = v
                if v > best_val:
                    best_val, stale = v, 0
                    best_state = copy.deepcopy(gen.state_dict())
                else:
                    stale += cfg.val_every
            history.append(entry)
            if fh:
                fh.write(json.dumps(entry) + "\n")
                fh.flush()
            log.debug("pretrain %s", entry)
            if stale >= tc.patience:
                break
    finally:
        if fh:
            fh.close()
    if cfg.restore_best:
        gen.load_state_dict(best_state)
    return PretrainResult(gen, opt, history, best_val, it, baseline.value)


def solve_problem(problem: ProblemSpec, seed: int, gen: Generator, config: InferConfig | None = None,
                  noise: float = 0.0, subsample: int | None = None,
                  out_dir: str | Path | None = None) -> RunTrace:
    """One benchmark run: sample train/test data, search, score on the test split."""
    train = sample_problem_dataset(problem, "train", seed)
    test = sample_problem_dataset(problem, "test", seed)
    rng = np.random.default_rng([seed, 1])
    if subsample:
        train = train.subsample(subsample, rng)
    train = add_noise(train, noise, rng)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best, trace = infer(train, gen, config, np.random.default_rng(seed), problem.tree,
                        out / "trace.jsonl" if out is not None else None)
    trace.problem = problem.name
    trace.seed = seed
    trace.test = test_metrics(best.prefix, best.consts, test)
    if out is not None:
        (out / "summary.json").write_text(json.dumps(trace.summary(), indent=2) + "\n")
        (out / "equation.txt").write_text(f"{trace.best_equation}\n{trace.best_infix}\n")
    return trace


def load_traces(root: str | Path) -> list[RunTrace]:
    """All runs below ``root`` that carry a summary and a trace."""
    out = []
    for summary in sorted(Path(root).rglob("summary.json")):
        jsonl = summary.with_name("trace.jsonl")
        if jsonl.exists():
            out.append(RunTrace.read(jsonl, summary))
    return out
