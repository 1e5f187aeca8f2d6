"""Benchmark metrics: recovery rate, fit accuracy, Pareto fronts and reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Dataset
from .expr import bind_constants, complexity, evaluate, parse_prefix, to_infix
from .optim import ZeroVariance, nmse_values

__all__ = [
    "DivisionByZeroTarget", "ZeroVariance", "RecoveryRate", "ProblemResult", "BenchReport",
    "recovery_rate", "binomial_ci", "r_squared", "acc_tau", "pareto_front", "dominates",
    "test_metrics", "report_schema", "CI_METHOD",
]

Z95 = 1.96
CI_METHOD = "binomial normal approximation, 1.96*sqrt(p(1-p)/n) per problem, averaged over problems"


class DivisionByZeroTarget(ValueError):
    pass


def binomial_ci(successes: int, n: int) -> float:
    """Half-width of the 95% normal-approximation interval, as a fraction."""
    if n <= 0:
        raise ValueError("need at least one run")
    p = successes / n
    return Z95 * math.sqrt(p * (1 - p) / n)


@dataclass
class RecoveryRate:
    rate: float  # percent
    ci: float  # percent half-width
    problems: int
    runs: int


def _recovered(trace) -> bool:
    return trace.recovered if hasattr(trace, "recovered") else bool(trace)


def recovery_rate(traces: Sequence) -> RecoveryRate:
    """Percent of recovered runs, averaged over problems, with the mean 95% CI.

    Traces are grouped by their ``problem`` attribute when present.
    """
    if not traces:
        raise ValueError("no traces")
    groups: dict[str, list[bool]] = {}
    for t in traces:
        groups.setdefault(getattr(t, "problem", ""), []).append(_recovered(t))
    rates, cis = [], []
    for runs in groups.values():
        rates.append(100.0 * sum(runs) / len(runs))
        cis.append(100.0 * binomial_ci(sum(runs), len(runs)))
    return RecoveryRate(float(np.mean(rates)), float(np.mean(cis)), len(groups), len(traces))


def r_squared(y: Sequence[float], yhat: Sequence[float]) -> float:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.size < 2:
        raise ValueError("need at least two points")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise ZeroVariance("target has zero variance")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot


def acc_tau(y: Sequence[float], yhat: Sequence[float], tau: float) -> int:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if np.any(y == 0):
        raise DivisionByZeroTarget("relative error undefined for zero targets")
    return int(np.max(np.abs((yhat - y) / y)) <= tau)


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """``a`` is no worse in complexity and NMSE, and strictly better in one."""
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def pareto_front(candidates: Iterable[tuple]) -> list[tuple]:
    """Non-dominated (complexity, nmse, ...) tuples sorted by complexity.

    Candidates with a missing or non-finite NMSE are ignored; duplicated
    points keep their first occurrence.
    """
    pts = [c for c in candidates if c[1] is not None and math.isfinite(c[1])]
    order = sorted(range(len(pts)), key=lambda i: (pts[i][0], pts[i][1], i))
    front, best = [], math.inf
    for i in order:
        if pts[i][1] < best:
            front.append(pts[i])
            best = pts[i][1]
    return front


def test_metrics(prefix: str, consts: Sequence[float], test: Dataset, tau: float = 0.05) -> dict:
    """NMSE, R^2, Acc_tau and complexity of an equation on held-out data."""
    tree = parse_prefix(prefix)
    yhat = evaluate(tree, test.X, consts)
    out = {"complexity": complexity(tree), "test_nmse": None, "r2": None, "acc_tau": None, "tau": tau}
    if yhat is None:
        return out
    if test.sigma_y > 0:
        out["test_nmse"] = nmse_values(test.y, yhat, test.sigma_y)
        if test.n >= 2:
            out["r2"] = r_squared(test.y, yhat)
    if not np.any(test.y == 0):
        out["acc_tau"] = acc_tau(test.y, yhat, tau)
    return out


@dataclass
class ProblemResult:
    problem: str
    runs: int
    recovered: int
    recovery: float
    ci: float
    gamma_mean: float | None  # evaluations to recovery, recovered runs only
    gamma_std: float | None
    test_nmse_median: float | None
    r2_median: float | None
    acc_tau_mean: float | None
    pareto: list[tuple[int, float, str]] = field(default_factory=list)

    @property
    def gamma_text(self) -> str:
        if self.gamma_mean is None:
            return "DNF"
        return f"{self.gamma_mean:.0f} ± {self.gamma_std:.0f}"


def _median(values: list) -> float | None:
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.median(vals)) if vals else None


@dataclass
class BenchReport:
    problems: list[ProblemResult]
    recovery: RecoveryRate
    ci_method: str = CI_METHOD

    @classmethod
    def from_traces(cls, traces: Sequence) -> "BenchReport":
        groups: dict[str, list] = {}
        for t in traces:
            groups.setdefault(t.problem, []).append(t)
        rows = []
        for name in sorted(groups):
            runs = groups[name]
            rec = [t for t in runs if t.recovered]
            gam = [t.evals_at_recovery for t in rec if t.evals_at_recovery is not None]
            test = [getattr(t, "test", {}) or {} for t in runs]
            cands = []
            for t, m in zip(runs, test):
                if m.get("test_nmse") is not None:
                    cands.append((m["complexity"], m["test_nmse"], t.best_infix))
            accs = [m.get("acc_tau") for m in test if m.get("acc_tau") is not None]
            rows.append(ProblemResult(
                name, len(runs), len(rec), 100.0 * len(rec) / len(runs),
                100.0 * binomial_ci(len(rec), len(runs)),
                float(np.mean(gam)) if gam else None,
                float(np.std(gam)) if gam else None,
                _median([m.get("test_nmse") for m in test]),
                _median([m.get("r2") for m in test]),
                float(np.mean(accs)) if accs else None,
                pareto_front(cands)))
        return cls(rows, recovery_rate(traces))

    def to_dict(self) -> dict:
        return {
            "recovery_rate": self.recovery.rate,
            "recovery_ci": self.recovery.ci,
            "n_problems": self.recovery.problems,
            "n_runs": self.recovery.runs,
            "ci_method": self.ci_method,
            "problems": [
                {**{k: v for k, v in asdict(p).items() if k != "pareto"},
                 "gamma": p.gamma_text,
                 "pareto": [{"complexity": c, "nmse": e, "equation": s} for c, e, s in p.pareto]}
                for p in self.problems
            ],
        }

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / "report.json", "csv": out / "report.csv", "pareto": out / "pareto.csv"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        cols = ["problem", "runs", "recovered", "recovery", "ci", "gamma", "test_nmse_median",
                "r2_median", "acc_tau_mean"]
        with open(paths["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for p in self.problems:
                w.writerow([p.problem, p.runs, p.recovered, f"{p.recovery:.2f}", f"{p.ci:.2f}",
                            p.gamma_text, p.test_nmse_median, p.r2_median, p.acc_tau_mean])
        with open(paths["pareto"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["problem", "complexity", "nmse", "equation"])
            for p in self.problems:
                for c, e, s in p.pareto:
                    w.writerow([p.problem, c, e, s])
        return paths


def report_schema() -> dict:
    text = resources.files("symgen").joinpath("schemas/report.schema.json").read_text()
    return json.loads(text)


def pareto_rows(rows: Iterable[tuple[str, Sequence[float]]], test: Dataset) -> list[tuple[int, float, str]]:
    """Frontier of (prefix, consts) candidates scored on ``test``."""
    cands = []
    for prefix, consts in rows:
        m = test_metrics(prefix, consts, test)
        if m["test_nmse"] is not None:
            tree = parse_prefix(prefix)
            tree = bind_constants(tree, consts) if consts else tree
            cands.append((m["complexity"], m["test_nmse"], to_infix(tree)))
    return pareto_front(cands)
