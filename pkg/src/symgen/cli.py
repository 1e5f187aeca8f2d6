"""Command-line entry point: corpus generation, pre-training, runs and reports."""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Sequence

from .bench import BenchReport, pareto_front
from .cas import equal_prefix
from .corpus import (CorpusStats, SamplingSpec, SkeletonSampler, build_pretrain_corpus, get_problem,
                     problem_set, read_corpus, registry, write_corpus)
from .evolve import GPConfig
from .expr import ExprError
from .generator import (ArchConfig, Generator, IncompatibleCheckpoint, ShapeMismatch, VersionMismatch,
                        load_checkpoint, save_checkpoint)
from .grammar import library_from_name
from .optim import TrainConfig
from .pipeline import InferConfig, PretrainConfig, load_traces, pretrain, solve_problem

__all__ = ["main", "UsageError", "parse_seeds", "load_config"]

log = logging.getLogger("symgen")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- config
def parse_seeds(text: str) -> list[int]:
    """``0..9`` (inclusive) or ``1,4,7`` or a mix such as ``0..2,10``."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                a, b = part.split("..", 1)
                seeds.extend(range(int(a), int(b) + 1))
            else:
                seeds.append(int(part))
        except ValueError as exc:
            raise UsageError(f"bad seed list {text!r}") from exc
    if not seeds or len(set(seeds)) != len(seeds):
        raise UsageError(f"seed list {text!r} must be non-empty and distinct")
    return seeds


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float) or like is None:
        return float(value)
    return value


def _apply_section(obj, section: dict, name: str):
    """Copy of dataclass ``obj`` with INI overrides (re-validated)."""
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, value in section.items():
        if key not in known:
            raise UsageError(f"unknown key {key!r} in section [{name}]")
        changes[key] = _coerce(value, getattr(obj, key))
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"section [{name}]: {exc}") from exc


def load_config(path: str | None) -> dict[str, dict[str, str]]:
    """Sections of an INI file (``[train]``, ``[gp]``, ``[pretrain]``, ``[arch]``, ``[corpus]``)."""
    if not path:
        return {}
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise UsageError(f"cannot read config {path}")
    return {s: dict(cp[s]) for s in cp.sections()}


def _train_config(cfg: dict, args) -> TrainConfig:
    tc = _apply_section(TrainConfig(), cfg.get("train", {}), "train")
    for flag in ("k", "t", "budget", "lr", "patience"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(tc, flag, value)
    tc.__post_init__()
    return tc


def _threads() -> int:
    return max(1, int(os.environ.get("SYMGEN_THREADS", "1")))


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


# --------------------------------------------------------------- commands
def cmd_gen_corpus(args) -> int:
    cfg = load_config(args.config)
    lib = library_from_name(args.library)
    section = cfg.get("corpus", {})
    sampler = SkeletonSampler(d=max(lib.d, 1), l_min=int(section.get("l_min", args.l_min)),
                              l_max=int(section.get("l_max", args.l_max)))
    domain = SamplingSpec.parse(section.get("domain", args.domain))
    holdouts = []
    if args.holdouts != "none":
        specs = registry() if args.holdouts == "all" else [s for n in args.holdouts.split(",") for s in problem_set(n)]
        holdouts = [s.tree for s in specs if s.tree is not None and s.d <= max(lib.d, 1)]
    stats = CorpusStats()
    records = build_pretrain_corpus(args.count, sampler, domain, holdouts, args.seed, stats=stats)
    out = Path(args.out)
    write_corpus(out, records, lib.name, domain, max(lib.d, 1))
    manifest = {
        "seed": args.seed, "count": args.count, "library": lib.name, "domain": str(domain),
        "sampler": {"l_min": sampler.l_min, "l_max": sampler.l_max, "d": sampler.d},
        "holdouts": len(holdouts), "stats": stats.to_dict(),
        "sha256": hashlib.sha256(out.read_bytes()).hexdigest(),
    }
    _write_json(out.with_name(out.name + ".manifest.json"), manifest)
    print(f"wrote {len(records)} equations to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    header, records = read_corpus(args.corpus)
    lib = library_from_name(header["library"])
    tc = _train_config(cfg, args)
    pc = _apply_section(PretrainConfig(train=tc, domain=header["domain"]), cfg.get("pretrain", {}), "pretrain")
    if args.iterations is not None:
        pc.max_iterations = args.iterations
    if args.ce_pretrain:
        pc.mode = "ce"
    if args.val_k is not None:
        pc.val_k = args.val_k
    arch = _apply_section(ArchConfig(d=max(lib.d, 1)), cfg.get("arch", {}), "arch")
    if args.no_encoder:
        arch.use_encoder = False
    gen, opt_state = None, None
    if args.resume:
        gen, _, extra = load_checkpoint(args.resume, library=lib)
        opt_state = {k[len("adam."):]: v for k, v in extra.items() if k.startswith("adam.")} or None
    n_val = min(args.val_count, len(records))
    val, train = records[:n_val], records[n_val:] or records
    result = pretrain(train, lib, pc, seed=args.seed, gen=gen, arch=arch, val_records=val,
                      optimizer_state=opt_state, log_path=Path(args.out).with_suffix(".log.jsonl"))
    snapshot = {"train": asdict(tc), "pretrain": {k: str(v) for k, v in asdict(pc).items() if k != "train"},
                "arch": asdict(result.gen.cfg), "corpus": str(args.corpus), "seed": args.seed}
    meta = {"config": snapshot, "iterations": result.iterations, "best_val": result.best_val}
    extra = {f"adam.{k}": v for k, v in result.optimizer.state_tensors().items()}
    save_checkpoint(result.gen, args.out, meta, extra)
    print(f"checkpoint {args.out}: {result.iterations} iterations, validation reward {result.best_val:.4f}")
    return 0


def _generator_for(problem, args) -> Generator:
    if args.checkpoint:
        gen, _, _ = load_checkpoint(args.checkpoint, library=problem.library, extend=args.extend)
        return gen
    arch = ArchConfig(d=max(problem.library.d, 1), use_encoder=not args.no_encoder)
    return Generator(problem.library, arch, seed=0)


def _run_one(job) -> dict:
    problem_name, seed, args, icfg = job
    problem = get_problem(problem_name)
    gen = _generator_for(problem, args)
    out = Path(args.out) / problem_name / f"seed-{seed}"
    trace = solve_problem(problem, seed, gen, icfg, args.noise, args.subsample, out)
    return {"problem": problem_name, "seed": seed, "status": trace.status,
            "evaluations": trace.evaluations, "equation": trace.best_infix}


def _problems(args) -> list[str]:
    names = []
    for item in args.problem or []:
        names.extend(n.strip() for n in item.split(",") if n.strip())
    for item in args.problem_set or []:
        names.extend(p.name for p in problem_set(item))
    if not names:
        raise UsageError("give --problem or --problem-set")
    for n in names:
        get_problem(n)
    return names


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    tc = _train_config(cfg, args)
    gp = _apply_section(GPConfig(), cfg.get("gp", {}), "gp")
    icfg = InferConfig(train=tc, gp=gp, use_gp=not args.no_gp, max_iterations=args.max_iterations)
    names = _problems(args)
    seeds = parse_seeds(args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {
        "train": asdict(tc), "gp": asdict(gp), "use_gp": icfg.use_gp, "problems": names, "seeds": seeds,
        "checkpoint": args.checkpoint, "noise": args.noise, "subsample": args.subsample,
        "no_encoder": args.no_encoder, "extend": args.extend, "max_iterations": args.max_iterations})
    jobs = [(n, s, args, icfg) for n in names for s in seeds]
    workers = min(args.workers or 1, _threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    for r in results:
        print(f"{r['problem']}\tseed={r['seed']}\t{r['status']}\tevals={r['evaluations']}\t{r['equation']}")
    return 0


def cmd_bench(args) -> int:
    root = Path(args.runs)
    traces = load_traces(root) if root.is_dir() else []
    if not traces:
        print(f"no runs found under {root}", file=sys.stderr)
        return 2
    report = BenchReport.from_traces(traces)
    paths = report.write(args.out or root)
    r = report.recovery
    print(f"recovery {r.rate:.2f}% ± {r.ci:.2f} over {r.problems} problems, {r.runs} runs")
    for p in report.problems:
        print(f"{p.problem}\t{p.recovered}/{p.runs}\tgamma={p.gamma_text}")
    print(f"wrote {paths['json']}, {paths['csv']}, {paths['pareto']}")
    return 0


def cmd_canon(args) -> int:
    print(equal_prefix(args.f, args.g))
    return 0


def cmd_pareto(args) -> int:
    rows = []
    with open(args.input) as fh:
        header = fh.readline().strip().split(",")
        try:
            ic, ie, iq = header.index("complexity"), header.index("nmse"), header.index("equation")
        except ValueError as exc:
            raise UsageError("input needs complexity,nmse,equation columns") from exc
        for line in fh:
            parts = line.rstrip("\n").split(",", max(ic, ie, iq))
            if len(parts) <= max(ic, ie, iq):
                continue
            rows.append((int(parts[ic]), float(parts[ie]), parts[iq]))
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write("complexity,nmse,equation\n")
        for c, e, q in pareto_front(rows):
            out.write(f"{c},{e!r},{q}\n")
    finally:
        if args.out:
            out.close()
    return 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="symgen", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="sample a pre-training equation corpus")
    g.add_argument("--library", default="koza-d2")
    g.add_argument("--count", type=int, default=5000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--domain", default="U(1,5,20)")
    g.add_argument("--l-min", type=int, default=3)
    g.add_argument("--l-max", type=int, default=5)
    g.add_argument("--holdouts", default="all", help="'all', 'none' or comma-separated problem sets")
    g.add_argument("--out", default="corpus.tsv")
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("pretrain", help="pre-train a generator on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", default="generator.ckpt")
    t.add_argument("--iterations", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--t", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-count", type=int, default=100)
    t.add_argument("--val-k", type=int)
    t.add_argument("--ce-pretrain", action="store_true")
    t.add_argument("--no-encoder", action="store_true")
    t.add_argument("--resume")
    t.add_argument("--config")
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("run", help="search equations for benchmark problems")
    r.add_argument("--problem", action="append")
    r.add_argument("--problem-set", action="append")
    r.add_argument("--seeds", default="0")
    r.add_argument("--budget", type=int)
    r.add_argument("--k", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--checkpoint")
    r.add_argument("--extend", action="store_true", help="map a checkpoint onto a library with more variables")
    r.add_argument("--no-gp", action="store_true")
    r.add_argument("--no-encoder", action="store_true")
    r.add_argument("--noise", type=float, default=0.0)
    r.add_argument("--subsample", type=int)
    r.add_argument("--max-iterations", type=int)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", default="runs")
    r.add_argument("--config")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="aggregate run directories into a report")
    b.add_argument("--runs", required=True)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("canon", help="decide symbolic equality of two prefix expressions")
    c.add_argument("f")
    c.add_argument("g")
    c.set_defaults(func=cmd_canon)

    q = sub.add_parser("pareto", help="Pareto front of a complexity,nmse,equation CSV")
    q.add_argument("--input", required=True)
    q.add_argument("--out")
    q.set_defaults(func=cmd_pareto)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, KeyError, FileNotFoundError, ExprError, IncompatibleCheckpoint,
            VersionMismatch, ShapeMismatch, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
