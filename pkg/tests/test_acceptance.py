"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import symgen
from conftest import random_tree_tokens, record_criterion
from fdcheck import fd_relative_error
from latex_forms import equivalent_forms, latex_to_infix
from rules import violations
from symgen.cas import Equivalence, symbolically_equal
from symgen.corpus import (Dataset, ProblemSpec, SamplingSpec, SkeletonSampler, build_pretrain_corpus,
                           get_problem, sample_problem_dataset)
from symgen.expr import ExprError, bind_constants, evaluate, from_infix, parse_prefix, to_infix, token
from symgen.generator import Generator, load_checkpoint, save_checkpoint
from symgen.grammar import koza
from symgen.optim import (Baseline, MaxRewardQueue, TrainConfig, entropy_loss, fit_constants,
                          length_prior_loss, nmse_values, pqt_loss, reward, risk_filter, vpg_loss)
from symgen.bench import dominates, pareto_front
from symgen.pipeline import RECOVERED, InferConfig, PretrainConfig, pretrain, solve_problem


# ------------------------------------------------------------ grammar validity
def test_grammar_validity():
    lib = koza(2)
    gen = Generator(lib, seed=0)
    rng = np.random.default_rng(0)
    names = [t.name for t in lib.tokens]
    bad = 0
    n = 0
    with torch.no_grad():
        for _ in range(20):
            X = rng.uniform(-3, 3, size=(20, 2))
            ds = Dataset(X, X[:, 0] * np.sin(X[:, 1]) + rng.normal(size=20))
            for s in gen.sample(gen.encode(ds), 500, rng).ids:
                n += 1
                seq = [names[i] for i in s]
                try:
                    parse_prefix(seq)
                except ExprError:
                    bad += 1
                    continue
                if violations(seq, 4, 30, 0):
                    bad += 1
    # contrast: unmasked categorical sampling over the same tokens
    unmasked_ok = 0
    for _ in range(10_000):
        seq = [names[i] for i in rng.integers(len(names), size=int(rng.integers(4, 31)))]
        try:
            parse_prefix(seq)
            unmasked_ok += not violations(seq, 4, 30, 0)
        except ExprError:
            pass
    ok = n == 10_000 and bad == 0 and unmasked_ok < 10_000
    record_criterion("grammar validity", ok,
                     f"masked {n - bad}/{n} valid; unmasked baseline {unmasked_ok}/10000 valid")
    assert ok


# ---------------------------------------------------- permutation invariance
def test_encoder_permutation_invariance():
    gen = Generator(koza(2), seed=1)
    rng = np.random.default_rng(1)
    worst = 0.0
    with torch.no_grad():
        for _ in range(100):
            n = int(rng.integers(5, 60))
            X = rng.uniform(-5, 5, size=(n, 2))
            ds = Dataset(X, np.cos(X[:, 0]) * X[:, 1] + rng.normal(size=n))
            v0 = gen.encode(ds)
            for _ in range(10):
                p = rng.permutation(n)
                v = gen.encode(Dataset(X[p], ds.y[p]))
                worst = max(worst, float((v - v0).abs().max() / v0.abs().max()))
    ok = worst <= 1e-9
    record_criterion("encoder permutation invariance", ok, f"max relative deviation {worst:.2e} (<= 1e-9)")
    assert ok


# ---------------------------------------------------------- autodiff vs FD
def _layer_groups(gen):
    groups = {}
    for name, p in gen.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:3]) if parts[0] == "encoder" else ".".join(parts[:2]) if parts[1].isdigit() else parts[0]
        groups.setdefault(key, []).append(p)
    return groups


def test_autodiff_matches_finite_differences():
    gen = Generator(koza(2), seed=2)
    rng = np.random.default_rng(2)
    X = rng.uniform(1, 4, size=(10, 2))
    ds = Dataset(X, X[:, 0] * X[:, 1])
    with torch.no_grad():
        batch = gen.sample(gen.encode(ds), 6, rng)
    rewards = list(np.linspace(0.05, 0.95, batch.k))
    cfg = TrainConfig()

    def scored():
        return gen.score(gen.encode(ds), batch)

    losses = {
        "log_prob": lambda: gen.log_prob(ds, batch.ids[0]),
        "vpg": lambda: vpg_loss(scored()[0], rewards, Baseline(0.5, value=0.5)),
        "pqt": lambda: pqt_loss(scored()[0][:3]),
        "entropy": lambda: (lambda lp, e, v: entropy_loss(e, v, cfg.entropy_weight, cfg.entropy_decay))(*scored()),
        "length_prior": lambda: length_prior_loss(scored()[0], batch.lengths, cfg.length_weight, cfg.length_target),
    }
    worst = {}
    everything = list(gen.parameters())
    for name, fn in losses.items():
        worst[f"loss:{name}"] = fd_relative_error(fn, everything, n=30, seed=len(name))

    # every layer, through a combined objective touching all outputs
    def combined():
        logp, ent, valid = scored()
        return logp.sum() + 0.1 * ent.sum()

    for key, params in _layer_groups(gen).items():
        worst[f"layer:{key}"] = fd_relative_error(combined, params, n=8, seed=3)
    top = max(worst, key=worst.get)
    ok = all(v <= 1e-4 for v in worst.values())
    record_criterion("autodiff vs finite differences", ok,
                     f"{len(worst)} checks, worst {top} rel. err {worst[top]:.2e} (<= 1e-4)")
    assert ok


# -------------------------------------------------------------- CAS oracle
CAS_NAMES = {0: ["x1", "x2", "2", "3"], 1: ["exp", "log", "sin", "cos", "sqrt"], 2: ["add", "sub", "mul", "div"]}


def test_cas_oracle():
    start = time.perf_counter()
    target = from_infix("3/2*x1*x2")
    blocks = equivalent_forms()
    forms = blocks["further"]
    equal = sum(symbolically_equal(from_infix(latex_to_infix(f)), target) == Equivalence.EQUAL for f in forms)
    rng = np.random.default_rng(3)
    pairs = []
    while len(pairs) < 1000:
        names = random_tree_tokens(rng, CAS_NAMES, max_depth=4)
        mutated = list(names)
        i = int(rng.integers(len(names)))
        mutated[i] = str(rng.choice([n for n in CAS_NAMES[token(names[i]).arity] if n != names[i]]))
        f, g = parse_prefix(names), parse_prefix(mutated)
        Xs = rng.uniform(0.5, 2.5, size=(64, 2))
        a, b = evaluate(f, Xs, strict=False), evaluate(g, Xs, strict=False)
        fin = np.isfinite(a) & np.isfinite(b)
        if fin.sum() >= 8 and np.any(~np.isclose(a[fin], b[fin], rtol=1e-6, atol=1e-9)):
            pairs.append((f, g))
    not_equal = sum(symbolically_equal(f, g) == Equivalence.NOT_EQUAL for f, g in pairs)
    elapsed = time.perf_counter() - start
    ok = equal == len(forms) and not_equal == 1000 and elapsed < 60
    record_criterion("CAS oracle", ok, f"{equal}/{len(forms)} listed forms Equal to (3/2)x1x2, "
                     f"{not_equal}/1000 mutated pairs NotEqual, {elapsed:.1f}s (< 60s)")
    assert ok


# ------------------------------------------------------------- reward/NMSE
def test_reward_nmse():
    v = nmse_values(np.array([0.0, 2.0]), np.array([1.0, 1.0]))
    hand = abs(v - 1.0) < 1e-15 and abs(reward(v) - 0.5) < 1e-15
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 50))
        y = rng.normal(size=n) * rng.uniform(0.01, 100) + rng.normal() * 10
        yhat = y + rng.normal(size=n) * rng.uniform(0, 5)
        mean = sum(y) / n
        sd = math.sqrt(sum((a - mean) ** 2 for a in y) / n)
        ref = sum((a - b) ** 2 for a, b in zip(y, yhat)) / n / sd
        got = nmse_values(y, yhat)
        worst = max(worst, abs(got - ref) / max(1.0, ref), abs(reward(got) - 1 / (1 + ref)))
    ok = hand and worst <= 1e-12
    record_criterion("reward/NMSE", ok, f"hand case NMSE={v} reward={reward(v)}; 1000 cases max err {worst:.1e}")
    assert ok


# -------------------------------------------------- queue/quantile/Pareto
def test_queue_quantile_pareto_oracles():
    rng = np.random.default_rng(5)
    q_ok = 0
    for _ in range(1000):
        cap = int(rng.integers(1, 12))
        stream = [(int(rng.integers(0, 30)), float(rng.random())) for _ in range(int(rng.integers(0, 80)))]
        q = MaxRewardQueue(cap)
        kept = {}
        for key, r in stream:
            q.push(key, r, None)
            if key in kept:
                kept[key] = max(kept[key], r)
            elif len(kept) < cap:
                kept[key] = r
            else:
                worst = min(kept, key=kept.get)
                if r > kept[worst]:
                    del kept[worst]
                    kept[key] = r
        q_ok += {k: r for k, r, _ in q.items()} == kept
    r_ok = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        r = rng.random(n)
        if rng.random() < 0.3:
            r = np.round(r, 1)
        eps = float(rng.uniform(0.01, 0.5))
        s = sorted(r)
        pos = (1 - eps) * (n - 1)
        lo = math.floor(pos)
        hi = min(lo + 1, n - 1)
        thr = s[lo] + (pos - lo) * (s[hi] - s[lo])
        r_ok += risk_filter(r, eps).tolist() == [i for i in range(n) if r[i] > thr]
    p_ok = 0
    for _ in range(1000):
        pts = [(int(rng.integers(1, 15)), float(rng.choice([rng.random(), round(rng.random(), 1)])))
               for _ in range(int(rng.integers(0, 30)))]
        brute = sorted({p for p in pts if not any(dominates(o, p) for o in pts)})
        p_ok += sorted(set(pareto_front(pts))) == brute
    ok = q_ok == r_ok == p_ok == 1000
    record_criterion("queue/quantile/Pareto oracles", ok, f"queue {q_ok}/1000, quantile {r_ok}/1000, Pareto {p_ok}/1000")
    assert ok


# -------------------------------------------------------- constant fitting
def test_constant_fitting():
    X = np.linspace(1, 5, 20)[:, None]
    (b0,), v1, _ = fit_constants(parse_prefix("mul const x1"), Dataset(X, 3 * X[:, 0]))
    ds = sample_problem_dataset(get_problem("Nguyen-1c"), "train", 0)
    consts, v2, _ = fit_constants(from_infix("const*x1**3 + const*x1**2 + const*x1"), ds)
    err = float(np.max(np.abs(np.array(consts) - [3.39, 2.12, 1.78])))
    ok = abs(b0 - 3.0) <= 1e-6 and err <= 1e-3
    record_criterion("constant fitting", ok, f"beta0={b0:.9f}; Nguyen-1c constants {np.round(consts, 6).tolist()} "
                     f"max err {err:.1e}")
    assert ok


# ------------------------------------------------- desk-scale reproductions
DOMAIN = "U(1,5,20)"
# Entropy weight and length prior used for desk-scale pre-training; the
# library defaults collapse the policy to one dataset-independent form on a
# corpus this small (see the README section on pre-training settings).
PRETRAIN = dict(k=500, t=5, lr=1e-3, entropy_weight=0.03, length_weight=1e-4, patience=100)
PRETRAIN_ITERATIONS = 100


def _held_out_problems():
    sampler = SkeletonSampler(d=2)
    records = build_pretrain_corpus(20, sampler, SamplingSpec.parse(DOMAIN), seed=10**6)
    problems = []
    for i, rec in enumerate(records):
        tree = bind_constants(rec.tree, rec.consts) if rec.consts else rec.tree
        problems.append(ProblemSpec(f"held-out-{i}", to_infix(tree), SamplingSpec.parse(DOMAIN), "koza-d2"))
    return problems


@pytest.fixture(scope="session")
def pretrained(request):
    """Generator pre-trained on a 5,000-equation d=2 corpus, cached across sessions by source hash."""
    lib = koza(2)
    key = hashlib.sha256(repr((PRETRAIN, PRETRAIN_ITERATIONS, DOMAIN)).encode())
    for src in sorted(Path(symgen.__file__).parent.glob("*.py")):
        key.update(src.read_bytes())
    path = Path(request.config.cache.mkdir("symgen-acceptance")) / f"pretrained-{key.hexdigest()[:16]}.pt"
    if path.exists():
        gen, _, _ = load_checkpoint(path, library=lib)
        return gen
    domain = SamplingSpec.parse(DOMAIN)
    sampler = SkeletonSampler(d=2)
    holdouts = [p.tree for p in _held_out_problems()]
    holdouts += [get_problem(n).tree for n in ("Feynman-1", "Feynman-3", "Feynman-5")]
    corpus = build_pretrain_corpus(5000, sampler, domain, holdouts=holdouts, seed=0)
    cfg = PretrainConfig(train=TrainConfig(**PRETRAIN), domain=domain, max_iterations=PRETRAIN_ITERATIONS,
                         val_every=10, val_k=100)
    res = pretrain(corpus[100:], lib, cfg, seed=0, val_records=corpus[:100])
    save_checkpoint(res.gen, path)
    return res.gen


def _run(problem, seed, gen, budget, use_gp=True):
    return solve_problem(problem, seed, gen, InferConfig(train=TrainConfig(budget=budget), use_gp=use_gp))


@pytest.mark.slow
def test_feynman_recovery_with_pretrained_generator(pretrained):
    lines = []
    ok = True
    for name in ("Feynman-1", "Feynman-3"):
        traces = [_run(get_problem(name), s, pretrained, 200_000) for s in range(10)]
        rec = [t for t in traces if t.status == RECOVERED]
        ok &= len(rec) == 10
        gamma = np.mean([t.evals_at_recovery for t in rec]) if rec else float("nan")
        lines.append(f"{name} {len(rec)}/10 (mean evaluations {gamma:.0f})")
    record_criterion("Feynman-1/3 recovery", ok, "; ".join(lines) + " within 200000")
    assert ok


@pytest.mark.slow
def test_nguyen_polynomial_recovery():
    lines = []
    ok = True
    for name in ("Nguyen-1", "Nguyen-2", "Nguyen-3", "Nguyen-4"):
        problem = get_problem(name)
        gen = Generator(problem.library, seed=0)
        n = sum(_run(problem, s, gen, 500_000).status == RECOVERED for s in range(10))
        ok &= n >= 9
        lines.append(f"{name} {n}/10")
    record_criterion("Nguyen-1..4 recovery", ok, "; ".join(lines) + " within 500000 (>= 9/10)")
    assert ok


@pytest.mark.slow
def test_pretraining_benefit(pretrained):
    untrained = Generator(koza(2), seed=0)
    stats = {}
    for label, gen in (("pre-trained", pretrained), ("untrained", untrained)):
        traces = [_run(p, 0, gen, 100_000) for p in _held_out_problems()]
        stats[label] = ([i for i, t in enumerate(traces) if t.status == RECOVERED],
                        float(np.mean([t.records[0].high_reward_fraction for t in traces])))
    (rp, hp), (ru, hu) = stats["pre-trained"], stats["untrained"]
    ok = len(rp) >= len(ru) and hp > hu
    record_criterion("pre-training benefit", ok,
                     f"recovered {len(rp)}/20 {rp} vs {len(ru)}/20 {ru}; "
                     f"iteration-0 high-reward fraction {hp:.4f} vs {hu:.4f}")
    assert ok


@pytest.mark.slow
def test_no_gp_ablation_ordering(pretrained):
    budget = 200_000
    untrained = Generator(koza(2), seed=0)
    means = {}
    for label, gen in (("pre-trained", pretrained), ("untrained", untrained)):
        evals = []
        for name in ("Feynman-1", "Feynman-3", "Feynman-5"):
            for s in range(5):
                t = _run(get_problem(name), s, gen, budget, use_gp=False)
                # runs that never recover are counted at the full budget
                evals.append(t.evals_at_recovery if t.status == RECOVERED else budget)
        means[label] = float(np.mean(evals))
    ok = means["untrained"] > means["pre-trained"]
    record_criterion("no-GP ablation ordering", ok, f"mean evaluations to recovery untrained "
                     f"{means['untrained']:.0f} > pre-trained {means['pre-trained']:.0f}")
    assert ok
