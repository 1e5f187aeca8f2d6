import numpy as np
import pytest
import torch

from symgen.corpus import Dataset
from symgen.generator import (ArchConfig, Generator, IncompatibleCheckpoint, MaskViolation,
                              NonFiniteInput, ShapeMismatch, VersionMismatch, load_checkpoint,
                              save_checkpoint)
from symgen.grammar import check_sequence, koza

from fdcheck import fd_relative_error
from rules import violations


@pytest.fixture(scope="module")
def gen2():
    return Generator(koza(2), seed=0)


def _ds(rng, n=20, d=2):
    X = rng.uniform(-2, 2, size=(n, d))
    return Dataset(X, np.sin(X[:, 0]) + X[:, -1] ** 2)


def test_encoder_permutation_invariant(gen2):
    rng = np.random.default_rng(0)
    ds = _ds(rng, 30)
    with torch.no_grad():
        v0 = gen2.encode(ds)
        for _ in range(5):
            p = rng.permutation(ds.n)
            v = gen2.encode(Dataset(ds.X[p], ds.y[p]))
            assert float((v - v0).abs().max() / v0.abs().max()) <= 1e-9


def test_encoder_single_row_and_duplicates(gen2):
    rng = np.random.default_rng(1)
    one = Dataset(np.array([[0.5, -1.0]]), np.array([2.0]))
    with torch.no_grad():
        v = gen2.encode(one)
        assert v.shape == (1, gen2.cfg.hidden) and torch.isfinite(v).all()
        ds = _ds(rng, 10)
        twice = Dataset(np.vstack([ds.X, ds.X]), np.concatenate([ds.y, ds.y]))
        a, b = gen2.encode(ds), gen2.encode(twice)
        assert float((a - b).abs().max()) <= 1e-6 * max(1.0, float(a.abs().max()))


def test_encoder_rejects_nonfinite(gen2):
    ds = _ds(np.random.default_rng(2))
    ds.y[0] = np.inf
    with pytest.raises(NonFiniteInput):
        gen2.encode(ds)


def test_conditioning_changes_output(gen2):
    rng = np.random.default_rng(3)
    a = _ds(rng)
    X = rng.uniform(-2, 2, size=(20, 2))
    b = Dataset(X, np.exp(X[:, 0]) * X[:, 1])
    ids = [gen2.lib.index[n] for n in ("mul", "x1", "sin", "x2")]
    with torch.no_grad():
        assert abs(float(gen2.log_prob(a, ids) - gen2.log_prob(b, ids))) > 1e-8


def test_samples_valid_and_masked_entries_zero(gen2):
    rng = np.random.default_rng(4)
    lib = gen2.lib
    with torch.no_grad():
        batch = gen2.sample(gen2.encode(_ds(rng)), 500, rng)
    names = [t.name for t in lib.tokens]
    for s, m, lp in zip(batch.ids, batch.masks, batch.logp_steps):
        assert check_sequence(s, lib)
        assert lib.min_len <= len(s) <= lib.max_len
        assert not violations([names[i] for i in s], lib.min_len, lib.max_len, 0)
        assert all(m[t, i] for t, i in enumerate(s))
        assert np.all(np.isfinite(lp)) and np.all(lp <= 0)


def test_masked_logits_get_zero_probability(gen2):
    rng = np.random.default_rng(5)
    with torch.no_grad():
        V = gen2.encode(_ds(rng))
        batch = gen2.sample(V, 20, rng)
        ids, par, sib, masks, valid = gen2.pad(batch)
        L = ids.shape[1]
        # recompute full distributions through the same path
        logp, ent = gen2.teacher_forced(V, ids, par, sib, masks)
        assert torch.isfinite(torch.where(valid, logp, torch.zeros(()))).all()
        assert torch.isfinite(ent).all() and (ent >= -1e-12).all()
        # every sampled sequence never contains a masked token
        for b in range(batch.k):
            n = len(batch.ids[b])
            assert masks[b, torch.arange(n), ids[b, :n]].all()
        assert L <= gen2.lib.max_len


def test_sampling_reproducible(gen2):
    ds = _ds(np.random.default_rng(6))
    with torch.no_grad():
        V = gen2.encode(ds)
        a = gen2.sample(V, 50, np.random.default_rng(11))
        b = gen2.sample(V, 50, np.random.default_rng(11))
    assert a.ids == b.ids


def test_log_prob_matches_sampling(gen2):
    rng = np.random.default_rng(7)
    ds = _ds(rng)
    with torch.no_grad():
        V = gen2.encode(ds)
        batch = gen2.sample(V, 30, rng)
        logp, ent, valid = gen2.score(V, batch)
        for i, s in enumerate(batch.ids):
            lp = float(gen2.log_prob(ds, s))
            assert abs(lp - batch.total_logp[i]) <= 1e-8
            assert abs(lp - float(logp[i])) <= 1e-8
            assert lp <= 0
            n = len(s)
            np.testing.assert_allclose(ent[i, :n].numpy(), batch.entropy_steps[i], atol=1e-8)


def test_trace_rejects_masked_sequence(gen2):
    lib = gen2.lib
    with pytest.raises(MaskViolation):
        gen2.trace([lib.index["exp"], lib.index["log"], lib.index["x1"], lib.index["x2"]])
    with pytest.raises(MaskViolation):
        gen2.trace([lib.index["add"], lib.index["x1"]])


def test_log_prob_gradient_matches_finite_differences():
    gen = Generator(koza(2), ArchConfig(d=2, hidden=16, inducing=8, ff=32), seed=1)
    rng = np.random.default_rng(8)
    ds = _ds(rng, 8)
    with torch.no_grad():
        batch = gen.sample(gen.encode(ds), 4, rng)
    params = [p for p in gen.parameters()]

    def fn():
        logp, ent, valid = gen.score(gen.encode(ds), batch)
        return logp.sum() + 0.1 * ent.sum()

    assert fd_relative_error(fn, params, n=50) <= 1e-4


def test_no_encoder_mode_ignores_dataset():
    gen = Generator(koza(2), ArchConfig(d=2, use_encoder=False), seed=0)
    rng = np.random.default_rng(9)
    with torch.no_grad():
        assert torch.equal(gen.encode(_ds(rng)), gen.encode(_ds(rng)))
    assert not gen.encoder_parameters() or all(not p.requires_grad for p in gen.encoder_parameters()) \
        or gen.encode(None) is not None


def test_checkpoint_round_trip(tmp_path, gen2):
    path = tmp_path / "g.ckpt"
    save_checkpoint(gen2, path, meta={"note": "x"}, extra={"adam.m.0": torch.ones(3, dtype=torch.float64)})
    back, meta, extra = load_checkpoint(path, koza(2))
    assert meta == {"note": "x"} and torch.equal(extra["adam.m.0"], torch.ones(3, dtype=torch.float64))
    for (n1, a), (n2, b) in zip(gen2.named_parameters(), back.named_parameters()):
        assert n1 == n2 and torch.equal(a, b)
    ds = _ds(np.random.default_rng(10))
    with torch.no_grad():
        a = gen2.sample(gen2.encode(ds), 20, np.random.default_rng(0))
        b = back.sample(back.encode(ds), 20, np.random.default_rng(0))
    assert a.ids == b.ids


def test_checkpoint_errors(tmp_path, gen2):
    path = tmp_path / "g.ckpt"
    save_checkpoint(gen2, path)
    data = bytearray(path.read_bytes())
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + bytes(data[8:]))
    with pytest.raises(VersionMismatch):
        load_checkpoint(bad)
    corrupt = bytearray(data)
    corrupt[17] = 0xFF
    bad.write_bytes(bytes(corrupt))
    with pytest.raises(VersionMismatch):
        load_checkpoint(bad)
    bad.write_bytes(bytes(data[:-8]))
    with pytest.raises(ShapeMismatch):
        load_checkpoint(bad)
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(path, koza(3))


def test_checkpoint_extends_variables(tmp_path, gen2):
    path = tmp_path / "g.ckpt"
    save_checkpoint(gen2, path)
    big, _, _ = load_checkpoint(path, koza(5), extend=True)
    assert big.lib.d == 5
    old, new = gen2.lib, big.lib
    for t in old.tokens:
        assert torch.equal(big.token_emb.weight[new.index[t.name]], gen2.token_emb.weight[old.index[t.name]])
    x5 = big.token_emb.weight[new.index["x5"]]
    assert float(x5.detach().abs().max()) < 0.2
    rng = np.random.default_rng(12)
    X = rng.uniform(1, 5, size=(30, 5))
    with torch.no_grad():
        batch = big.sample(big.encode(Dataset(X, X[:, 0] * X[:, 4])), 50, rng)
    assert all(check_sequence(s, big.lib) for s in batch.ids)
