import hashlib
import math
from collections import Counter

import numpy as np
import pytest

from symgen.cas import Equivalence, symbolically_equal
from symgen.corpus import (TABLE12_WEIGHTS, CorpusStats, Dataset, ExhaustedResampling,
                           GroundTruthInvalidOnDomain, ProblemSpec, SamplingSpec, SkeletonSampler,
                           build_pretrain_corpus, get_problem, problem_set, read_corpus, registry,
                           sample_dataset, sample_problem_dataset, sample_skeleton, write_corpus)
from symgen.expr import evaluate, from_infix, parse_prefix, token


def test_single_leaf_variable_probability():
    sampler = SkeletonSampler(d=1, l_min=1, l_max=1)
    n = 4000
    kinds = [sample_skeleton(np.random.default_rng(s), sampler)[0].token.kind for s in range(n)]
    assert set(kinds) <= {"variable", "literal"}
    frac = kinds.count("variable") / n
    assert abs(frac - 0.8) < 3 * math.sqrt(0.8 * 0.2 / n)


def test_leaf_count_and_variable_monotonicity():
    sampler = SkeletonSampler(d=3, l_min=3, l_max=5)
    rng = np.random.default_rng(0)
    for _ in range(3000):
        tree, _ = sample_skeleton(rng, sampler)
        leaves = [n for n in tree if not n.children]
        assert 3 <= len(leaves) <= 5
        used = {n.token.index for n in tree if n.token.kind == "variable"}
        if used:
            assert used == set(range(1, max(used) + 1))
        for n in leaves:
            if n.token.kind == "literal":
                assert 1 <= n.token.value <= 5


def test_operator_frequencies_follow_weights():
    sampler = SkeletonSampler(d=2)
    rng = np.random.default_rng(1)
    counts = Counter()
    for _ in range(100_000):
        tree, _ = sample_skeleton(rng, sampler)
        counts.update(n.token.name for n in tree if n.children)
    # within each arity class the draws are i.i.d. from the weights
    for arity in (1, 2):
        names = [n for n in TABLE12_WEIGHTS if token(n).arity == arity]
        total = sum(counts[n] for n in names)
        wsum = sum(TABLE12_WEIGHTS[n] for n in names)
        for n in names:
            p = TABLE12_WEIGHTS[n] / wsum
            sd = math.sqrt(total * p * (1 - p))
            assert abs(counts[n] - total * p) <= 3 * sd, (n, counts[n], total * p)
    assert abs(counts["add"] / counts["sub"] - 2.0) < 0.1


def test_weights_must_be_positive():
    with pytest.raises(ValueError):
        SkeletonSampler(d=1, weights={"add": 1.0, "mul": 0.0})


def test_constant_placeholders_when_enabled():
    sampler = SkeletonSampler(d=1, has_const=True)
    rng = np.random.default_rng(2)
    seen = 0
    for _ in range(500):
        tree, consts = sample_skeleton(rng, sampler)
        slots = sum(1 for n in tree if n.token.kind == "const")
        assert slots == len(consts) <= 3
        assert all(-1 <= c <= 1 for c in consts)
        seen += slots
    assert seen > 0


def test_corpus_excludes_holdouts():
    holdout = from_infix("x1*x2")
    records = build_pretrain_corpus(100, SkeletonSampler(d=2), SamplingSpec.parse("U(1,5,20)"),
                                    [holdout], seed=3)
    assert len(records) == 100
    for r in records:
        assert symbolically_equal(r.bound_tree, holdout) != Equivalence.EQUAL


def test_negative_log_argument_rejected():
    tree = parse_prefix("log sub x1 7")
    assert sample_dataset(tree, (), SamplingSpec.parse("U(1,5,20)"), 1, np.random.default_rng(0)) is None


def test_empty_corpus_has_header(tmp_path):
    path = tmp_path / "c.tsv"
    write_corpus(path, build_pretrain_corpus(0, SkeletonSampler(d=2), SamplingSpec.parse("U(1,5,20)")),
                 "koza-d2", SamplingSpec.parse("U(1,5,20)"), 2)
    header, records = read_corpus(path)
    assert records == [] and header["library"] == "koza-d2" and header["d"] == 2


def test_corpus_deterministic_and_round_trips(tmp_path):
    dom = SamplingSpec.parse("U(1,5,20)")
    sampler = SkeletonSampler(d=2, has_const=True)
    paths = []
    for name in ("a.tsv", "b.tsv"):
        recs = build_pretrain_corpus(50, sampler, dom, seed=9)
        write_corpus(tmp_path / name, recs, "koza-d2-const", dom, 2)
        paths.append(tmp_path / name)
    digests = {hashlib.sha256(p.read_bytes()).hexdigest() for p in paths}
    assert len(digests) == 1
    _, back = read_corpus(paths[0])
    assert back == recs


def test_exhausted_resampling():
    sampler = SkeletonSampler(d=1, l_min=1, l_max=1)
    with pytest.raises(ExhaustedResampling):
        build_pretrain_corpus(1, sampler, SamplingSpec.parse("U(1,5,20)"), [from_infix("x1")],
                              max_rejections=20)


def test_corpus_stats_count_rejections():
    stats = CorpusStats()
    build_pretrain_corpus(30, SkeletonSampler(d=1), SamplingSpec.parse("U(-1,1,20)"), seed=0, stats=stats)
    assert stats.accepted == 30
    assert stats.rejected_invalid + stats.rejected_novar > 0


def test_problem_dataset_examples():
    spec = get_problem("Nguyen-1")
    assert str(spec.sampling) == "U(-1,1,20)"
    ds = sample_problem_dataset(spec, "train", 0)
    x = ds.X[:, 0]
    np.testing.assert_allclose(ds.y, x ** 3 + x ** 2 + x, rtol=1e-12)
    assert ds.X.shape == (20, 1) and np.all((x >= -1) & (x <= 1))

    spec = get_problem("Feynman-7")
    ds = sample_problem_dataset(spec, "train", 0)
    assert str(spec.sampling) == "U(1,5,20)"
    np.testing.assert_allclose(ds.y, 1.5 * ds.X[:, 0] * ds.X[:, 1], rtol=1e-12)

    spec = ProblemSpec("toy", "x1", SamplingSpec.parse("E(-1,1,3)"), "koza-d1")
    tr, te = sample_problem_dataset(spec, "train", 0), sample_problem_dataset(spec, "test", 5)
    assert tr.X[:, 0].tolist() == [-1.0, 0.0, 1.0]
    np.testing.assert_array_equal(tr.X, te.X)


def test_uniform_train_test_disjoint():
    for name in ("Nguyen-1", "Feynman-1", "Synthetic-3"):
        spec = get_problem(name)
        tr, te = sample_problem_dataset(spec, "train", 1), sample_problem_dataset(spec, "test", 1)
        rows = {tuple(r) for r in tr.X}
        assert len(rows) == tr.n
        assert not rows & {tuple(r) for r in te.X}


def test_ground_truth_invalid_on_domain():
    spec = ProblemSpec("bad", "log(x1)", SamplingSpec.parse("U(-2,-1,5)"), "koza-d1")
    with pytest.raises(GroundTruthInvalidOnDomain):
        sample_problem_dataset(spec, "train", 0)


def test_sigma_matches_two_pass():
    rng = np.random.default_rng(5)
    for _ in range(200):
        y = rng.normal(size=int(rng.integers(1, 50))) * rng.uniform(0.1, 100)
        ds = Dataset(rng.normal(size=(y.size, 2)), y)
        mean = sum(y) / len(y)
        two_pass = math.sqrt(sum((v - mean) ** 2 for v in y) / len(y))
        assert abs(ds.sigma_y - two_pass) <= 1e-12 * max(1.0, two_pass)


def test_dataset_rejects_nonfinite():
    with pytest.raises(ValueError):
        Dataset(np.array([[1.0], [np.nan]]), np.array([1.0, 2.0]))


def test_registry_lookups():
    p = get_problem("Nguyen-7")
    assert str(p.sampling) == "U(0,2,20)" and p.library_name == "koza-d1"
    assert symbolically_equal(p.tree, from_infix("log(x1 + 1) + log(x1**2 + 1)")) == Equivalence.EQUAL
    p = get_problem("Feynman-12")
    assert str(p.sampling) == "U(1,5,50)" and p.d == 5
    assert symbolically_equal(p.tree, from_infix("x1*x2**2*x3/(3*x4*x5)")) == Equivalence.EQUAL
    p = get_problem("Synthetic-3")
    assert p.d == 12 and str(p.sampling) == "U(-1,1,120)" and p.library_name == "synth-d12"


def test_registry_families_complete_and_sampleable():
    names = [p.name for p in registry()]
    assert len(names) == len(set(names))
    fam = Counter(n.split("-")[0] for n in names)
    assert fam["Livermore"] == 22 and fam["Synthetic"] == 7
    assert len([n for n in names if n.startswith("Feynman-A")]) == 32
    assert len([n for n in names if n.startswith("Feynman-") and not n.startswith("Feynman-A")]) == 15
    assert {f"Nguyen-{i}" for i in range(1, 13)} <= set(names)
    assert {"Nguyen-1c", "Nguyen-5c", "Nguyen-7c", "Nguyen-8c", "Nguyen-10c"} <= set(names)
    assert {"R-1", "R-2", "R-3", "R-1*", "R-2*", "R-3*"} <= set(names)
    for p in registry():
        ds = sample_problem_dataset(p, "train", 0)
        assert ds.n == p.sampling.count and ds.d == p.d
        assert np.allclose(ds.y, evaluate(p.tree, ds.X))
    assert len(problem_set("Feynman")) == 15
    with pytest.raises(KeyError):
        problem_set("nope")
