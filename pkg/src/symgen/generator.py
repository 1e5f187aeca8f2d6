"""Dataset-conditioned equation generator.

A set-transformer encoder maps a dataset to a latent ``V``.  At each decoding
step the parent/sibling tree state runs through a causal attention encoder,
is concatenated with ``V`` and attended to (causally) by an autoregressive
token decoder.  Sampling uses cached keys/values so each step only processes
the newest position; teacher-forced scoring runs all positions at once.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Dataset
from .grammar import NONE_ID, GrammarState, LibrarySpec

__all__ = [
    "ArchConfig", "Generator", "SampleBatch", "MaskViolation", "NonFiniteInput",
    "ShapeMismatch", "VersionMismatch", "IncompatibleCheckpoint", "save_checkpoint",
    "load_checkpoint", "checkpoint_bytes", "set_threads",
]

DTYPE = torch.float64
MAGIC = b"SYMGENCK"
FORMAT_VERSION = 1
NEW_ROW_GAIN = 0.02


class MaskViolation(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class IncompatibleCheckpoint(ValueError):
    pass


def set_threads(n: int | None = None) -> int:
    """Cap torch intra-op threads (``SYMGEN_THREADS`` env var, default 1)."""
    if n is None:
        n = int(os.environ.get("SYMGEN_THREADS", "1") or 1)
    n = max(1, n)
    torch.set_num_threads(n)
    return n


@dataclass(frozen=True)
class ArchConfig:
    d: int  # dataset input variables fed to the encoder
    hidden: int = 32
    heads: int = 1
    inducing: int = 64
    n_isab: int = 3
    pma_seeds: int = 1
    state_emb: int = 16
    state_layers: int = 3
    dec_layers: int = 2
    ff: int = 160
    max_rows: int = 512
    use_encoder: bool = True


def _sinusoid(n: int, dim: int) -> torch.Tensor:
    pos = np.arange(n)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return torch.tensor(pe, dtype=DTYPE)


def _attend(q, k, v, heads: int, mask=None):
    b, nq, dim = q.shape
    nk = k.shape[1]
    dh = dim // heads
    q = q.view(b, nq, heads, dh).transpose(1, 2)
    k = k.view(b, nk, heads, dh).transpose(1, 2)
    v = v.view(b, nk, heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if mask is not None:
        scores = scores.masked_fill(mask, float("-inf"))
    out = torch.softmax(scores, dim=-1) @ v
    return out.transpose(1, 2).reshape(b, nq, dim)


class MAB(nn.Module):
    """Multihead attention block: ``H = LN(Q' + Att(Q', K')); out = LN(H + relu(W H))``."""

    def __init__(self, dim_q: int, dim_k: int, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.fc_q = nn.Linear(dim_q, dim, dtype=DTYPE)
        self.fc_k = nn.Linear(dim_k, dim, dtype=DTYPE)
        self.fc_v = nn.Linear(dim_k, dim, dtype=DTYPE)
        self.fc_o = nn.Linear(dim, dim, dtype=DTYPE)
        self.ln0 = nn.LayerNorm(dim, dtype=DTYPE)
        self.ln1 = nn.LayerNorm(dim, dtype=DTYPE)

    def forward(self, Q, K):
        q = self.fc_q(Q)
        h = self.ln0(q + _attend(q, self.fc_k(K), self.fc_v(K), self.heads))
        return self.ln1(h + torch.relu(self.fc_o(h)))


class ISAB(nn.Module):
    def __init__(self, dim_in: int, dim: int, heads: int, inducing: int):
        super().__init__()
        self.I = nn.Parameter(torch.zeros(1, inducing, dim, dtype=DTYPE))
        self.mab0 = MAB(dim, dim_in, dim, heads)
        self.mab1 = MAB(dim_in, dim, dim, heads)

    def forward(self, X):
        h = self.mab0(self.I.expand(X.shape[0], -1, -1), X)
        return self.mab1(X, h)


class PMA(nn.Module):
    def __init__(self, dim: int, heads: int, seeds: int):
        super().__init__()
        self.S = nn.Parameter(torch.zeros(1, seeds, dim, dtype=DTYPE))
        self.mab = MAB(dim, dim, dim, heads)

    def forward(self, X):
        return self.mab(self.S.expand(X.shape[0], -1, -1), X)


class SetEncoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        dims = [cfg.d + 1] + [cfg.hidden] * cfg.n_isab
        self.isabs = nn.ModuleList(ISAB(dims[i], cfg.hidden, cfg.heads, cfg.inducing)
                                   for i in range(cfg.n_isab))
        self.pma = PMA(cfg.hidden, cfg.heads, cfg.pma_seeds)

    def forward(self, Z):
        for isab in self.isabs:
            Z = isab(Z)
        return self.pma(Z).reshape(Z.shape[0], -1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.wq = nn.Linear(dim, dim, dtype=DTYPE)
        self.wk = nn.Linear(dim, dim, dtype=DTYPE)
        self.wv = nn.Linear(dim, dim, dtype=DTYPE)
        self.wo = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, x, kv, mask=None):
        return self.wo(_attend(self.wq(x), self.wk(kv), self.wv(kv), self.heads, mask))

    def step(self, x, kv_new, cache: list, t: int):
        """Attend from position ``t`` to cached keys/values (buffers filled in place)."""
        cache[0][:, t:t + 1] = self.wk(kv_new)
        cache[1][:, t:t + 1] = self.wv(kv_new)
        k, v = cache[0][:, :t + 1], cache[1][:, :t + 1]
        return self.wo(_attend(self.wq(x), k, v, self.heads))


class FeedForward(nn.Module):
    def __init__(self, dim: int, ff: int):
        super().__init__()
        self.l1 = nn.Linear(dim, ff, dtype=DTYPE)
        self.l2 = nn.Linear(ff, dim, dtype=DTYPE)

    def forward(self, x):
        return self.l2(torch.relu(self.l1(x)))


class EncoderLayer(nn.Module):
    """Post-norm causal self-attention layer."""

    def __init__(self, dim: int, heads: int, ff: int):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.ff = FeedForward(dim, ff)
        self.ln1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(dim, dtype=DTYPE)

    def forward(self, x, mask):
        x = self.ln1(x + self.attn(x, x, mask))
        return self.ln2(x + self.ff(x))

    def step(self, x, cache, t):
        x = self.ln1(x + self.attn.step(x, x, cache, t))
        return self.ln2(x + self.ff(x))


class DecoderLayer(nn.Module):
    """Post-norm layer: causal self-attention, causal memory attention, feed-forward."""

    def __init__(self, dim: int, heads: int, ff: int):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.cross_attn = Attention(dim, heads)
        self.ff = FeedForward(dim, ff)
        self.ln1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.ln3 = nn.LayerNorm(dim, dtype=DTYPE)

    def forward(self, x, mem, mask):
        x = self.ln1(x + self.self_attn(x, x, mask))
        x = self.ln2(x + self.cross_attn(x, mem, mask))
        return self.ln3(x + self.ff(x))

    def step(self, x, mem_t, cache, t):
        x = self.ln1(x + self.self_attn.step(x, x, cache[0], t))
        x = self.ln2(x + self.cross_attn.step(x, mem_t, cache[1], t))
        return self.ln3(x + self.ff(x))


@dataclass
class SampleBatch:
    """Sampled sequences with everything needed to rescore them."""

    ids: list[list[int]]
    parents: list[list[int]]
    siblings: list[list[int]]
    masks: list[np.ndarray]  # per sequence, (length, |library|) bools
    logp_steps: list[np.ndarray]
    entropy_steps: list[np.ndarray]

    @property
    def k(self) -> int:
        return len(self.ids)

    @property
    def total_logp(self) -> np.ndarray:
        return np.array([s.sum() for s in self.logp_steps])

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(s) for s in self.ids])

    def subset(self, idx: Sequence[int]) -> "SampleBatch":
        return SampleBatch(*[[getattr(self, f)[i] for i in idx] for f in
                             ("ids", "parents", "siblings", "masks", "logp_steps", "entropy_steps")])


class Generator(nn.Module):
    def __init__(self, lib: LibrarySpec, cfg: ArchConfig | None = None, seed: int = 0):
        super().__init__()
        self.lib = lib
        self.cfg = cfg or ArchConfig(d=max(lib.d, 1))
        c = self.cfg
        n_tok = len(lib)
        self.special = n_tok  # START for tokens, NONE for parent/sibling
        if c.use_encoder:
            self.encoder = SetEncoder(c)
        else:
            self.v_const = nn.Parameter(torch.zeros(1, c.hidden, dtype=DTYPE))
        self.parent_emb = nn.Embedding(n_tok + 1, c.state_emb, dtype=DTYPE)
        self.sibling_emb = nn.Embedding(n_tok + 1, c.state_emb, dtype=DTYPE)
        self.state_in = nn.Linear(2 * c.state_emb, c.hidden, dtype=DTYPE) if 2 * c.state_emb != c.hidden else None
        self.state_layers = nn.ModuleList(EncoderLayer(c.hidden, c.heads, c.ff) for _ in range(c.state_layers))
        self.token_emb = nn.Embedding(n_tok + 1, c.hidden, dtype=DTYPE)
        self.mem_proj = nn.Linear(2 * c.hidden, c.hidden, dtype=DTYPE)
        self.dec_layers = nn.ModuleList(DecoderLayer(c.hidden, c.heads, c.ff) for _ in range(c.dec_layers))
        self.out = nn.Linear(c.hidden, n_tok, dtype=DTYPE)
        self.register_buffer("pe", _sinusoid(lib.max_len + 1, c.hidden), persistent=False)
        self.reset_parameters(seed)

    # ------------------------------------------------------------------ init
    def reset_parameters(self, seed: int = 0) -> None:
        """Scaled-normal weights (variance 1/fan_in) drawn from a numpy stream."""
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                if ".ln" in name or name.startswith("ln"):
                    p.fill_(1.0 if leaf == "weight" else 0.0)
                elif leaf == "bias":
                    p.zero_()
                else:
                    fan_in = p.shape[-1]
                    p.copy_(torch.tensor(rng.standard_normal(tuple(p.shape)) / math.sqrt(fan_in), dtype=DTYPE))

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encoder_parameters(self) -> list[nn.Parameter]:
        mod = self.encoder if self.cfg.use_encoder else None
        return list(mod.parameters()) if mod is not None else [self.v_const]

    def decoder_parameters(self) -> list[nn.Parameter]:
        enc = {id(p) for p in self.encoder_parameters()}
        return [p for p in self.parameters() if id(p) not in enc]

    # --------------------------------------------------------------- encoder
    def _encoder_input(self, dataset: Dataset) -> torch.Tensor:
        X, y = dataset.X, dataset.y
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise NonFiniteInput("dataset contains non-finite values")
        if X.shape[1] > self.cfg.d:
            raise ValueError(f"dataset has {X.shape[1]} variables, encoder accepts {self.cfg.d}")
        if X.shape[0] > self.cfg.max_rows:
            idx = np.sort(np.random.default_rng(0).choice(X.shape[0], self.cfg.max_rows, replace=False))
            X, y = X[idx], y[idx]
        Z = np.zeros((X.shape[0], self.cfg.d + 1))
        Z[:, :X.shape[1]] = X
        Z[:, -1] = y
        cols = list(range(X.shape[1])) + [self.cfg.d]
        mu = Z[:, cols].mean(axis=0)
        sd = Z[:, cols].std(axis=0)
        sd[sd <= 1e-12] = 1.0
        Z[:, cols] = (Z[:, cols] - mu) / sd
        return torch.tensor(Z[None], dtype=DTYPE)

    def encode(self, dataset: Dataset | None) -> torch.Tensor:
        """Latent ``V`` of shape (1, hidden)."""
        if not self.cfg.use_encoder:
            return self.v_const
        return self.encoder(self._encoder_input(dataset))

    # ---------------------------------------------------------- full passes
    def _state_embed(self, parents: torch.Tensor, siblings: torch.Tensor) -> torch.Tensor:
        s = torch.cat([self.parent_emb(parents), self.sibling_emb(siblings)], dim=-1)
        if self.state_in is not None:
            s = self.state_in(s)
        return s

    def teacher_forced(self, V: torch.Tensor, ids: torch.Tensor, parents: torch.Tensor,
                       siblings: torch.Tensor, masks: torch.Tensor):
        """Per-step masked log-probs and entropies for padded (B, L) inputs.

        ``masks`` is (B, L, |library|); padded steps must be all-True.
        Returns (logp of chosen tokens, entropies), both (B, L).
        """
        B, L = ids.shape
        causal = torch.triu(torch.ones(L, L, dtype=torch.bool), diagonal=1)
        pe = self.pe[:L]
        s = self._state_embed(parents, siblings) + pe
        for layer in self.state_layers:
            s = layer(s, causal)
        Vb = V.expand(B, -1) if V.shape[0] == 1 else V
        mem = self.mem_proj(torch.cat([Vb[:, None, :].expand(B, L, -1), s], dim=-1))
        prev = torch.cat([torch.full((B, 1), self.special, dtype=torch.long), ids[:, :-1]], dim=1)
        x = self.token_emb(prev) + pe
        for layer in self.dec_layers:
            x = layer(x, mem, causal)
        logits = self.out(x).masked_fill(~masks, float("-inf"))
        logp_all = torch.log_softmax(logits, dim=-1)
        # zero the masked log-probs first so -inf never meets a zero gradient
        safe = torch.where(masks, logp_all, torch.zeros((), dtype=DTYPE))
        ent = -(logp_all.exp() * safe).sum(-1)
        logp = logp_all.gather(-1, ids[..., None]).squeeze(-1)
        return logp, ent

    def pad(self, batch: SampleBatch):
        """Padded tensors (ids, parents, siblings, masks, valid) for a batch."""
        B = batch.k
        L = max(len(s) for s in batch.ids)
        n_tok = len(self.lib)
        ids = np.zeros((B, L), dtype=np.int64)
        par = np.full((B, L), self.special, dtype=np.int64)
        sib = np.full((B, L), self.special, dtype=np.int64)
        masks = np.ones((B, L, n_tok), dtype=bool)
        valid = np.zeros((B, L), dtype=bool)
        for b in range(B):
            n = len(batch.ids[b])
            ids[b, :n] = batch.ids[b]
            par[b, :n] = [self.special if v == NONE_ID else v for v in batch.parents[b]]
            sib[b, :n] = [self.special if v == NONE_ID else v for v in batch.siblings[b]]
            masks[b, :n] = batch.masks[b]
            valid[b, :n] = True
        return (torch.from_numpy(ids), torch.from_numpy(par), torch.from_numpy(sib),
                torch.from_numpy(masks), torch.from_numpy(valid))

    def score(self, V: torch.Tensor, batch: SampleBatch):
        """Differentiable (sequence log-probs (B,), entropies (B, L), valid (B, L))."""
        ids, par, sib, masks, valid = self.pad(batch)
        logp, ent = self.teacher_forced(V, ids, par, sib, masks)
        zero = torch.zeros((), dtype=DTYPE)
        logp = torch.where(valid, logp, zero)
        ent = torch.where(valid, ent, zero)
        return logp.sum(1), ent, valid

    def trace(self, ids: Sequence[int]) -> SampleBatch:
        """Grammar replay of a complete sequence (raises MaskViolation)."""
        state = GrammarState(self.lib)
        par, sib, masks = [], [], []
        for pos, t in enumerate(ids):
            if state.complete:
                raise MaskViolation("tokens after the sequence is complete")
            p, s = state.tree_state()
            m = state.mask()
            if not m[t]:
                raise MaskViolation(f"token {self.lib.tokens[t].name} masked at position {pos}")
            par.append(p)
            sib.append(s)
            masks.append(m)
            state.push(t)
        if not state.complete:
            raise MaskViolation("sequence is incomplete")
        n = len(ids)
        return SampleBatch([list(ids)], [par], [sib], [np.array(masks)], [np.zeros(n)], [np.zeros(n)])

    def log_prob(self, dataset_or_V, ids: Sequence[int]) -> torch.Tensor:
        V = dataset_or_V if isinstance(dataset_or_V, torch.Tensor) else self.encode(dataset_or_V)
        logp, _, _ = self.score(V, self.trace(ids))
        return logp[0]

    # -------------------------------------------------------------- sampling
    @torch.no_grad()
    def sample(self, V: torch.Tensor, k: int, rng: np.random.Generator) -> SampleBatch:
        """Draw ``k`` complete, constraint-satisfying sequences in lockstep."""
        lib = self.lib
        states = [GrammarState(lib) for _ in range(k)]
        par = [[] for _ in range(k)]
        sib = [[] for _ in range(k)]
        masks = [[] for _ in range(k)]
        logps = [[] for _ in range(k)]
        ents = [[] for _ in range(k)]
        n_tok = len(lib)
        rows = np.arange(k)  # buffer row -> sequence index, -1 once finished
        prev = torch.full((k, 1), self.special, dtype=torch.long)
        Vk = V.detach().expand(k, -1)
        L, H = lib.max_len, self.cfg.hidden

        def buf():
            return [torch.zeros(k, L, H, dtype=DTYPE), torch.zeros(k, L, H, dtype=DTYPE)]

        state_cache = [buf() for _ in self.state_layers]
        dec_cache = [[buf(), buf()] for _ in self.dec_layers]
        t = 0
        n_live = k
        while n_live:
            nb = len(rows)
            ps = np.full(nb, self.special, dtype=np.int64)
            ss = np.full(nb, self.special, dtype=np.int64)
            m = np.ones((nb, n_tok), dtype=bool)
            for j, i in enumerate(rows):
                if i < 0:
                    continue
                p, s = states[i].tree_state()
                if p != NONE_ID:
                    ps[j] = p
                if s != NONE_ID:
                    ss[j] = s
                m[j] = states[i].mask()
                par[i].append(p)
                sib[i].append(s)
                masks[i].append(m[j])
            pe = self.pe[t:t + 1]
            x = self._state_embed(torch.from_numpy(ps)[:, None], torch.from_numpy(ss)[:, None]) + pe
            for li, layer in enumerate(self.state_layers):
                x = layer.step(x, state_cache[li], t)
            mem_t = self.mem_proj(torch.cat([Vk[:nb, None, :], x], dim=-1))
            h = self.token_emb(prev) + pe
            for li, layer in enumerate(self.dec_layers):
                h = layer.step(h, mem_t, dec_cache[li], t)
            logits = self.out(h[:, 0]).masked_fill(~torch.from_numpy(m), float("-inf"))
            logp_all = torch.log_softmax(logits, dim=-1).numpy()
            probs = np.exp(logp_all)
            cdf = np.cumsum(probs, axis=1)
            live = rows >= 0
            u = np.zeros(nb)
            u[live] = rng.random(int(live.sum()))
            u *= cdf[:, -1]
            choice = np.minimum((cdf <= u[:, None]).sum(axis=1), n_tok - 1)
            # guard against landing on a zero-probability entry through rounding
            bad = ~m[np.arange(nb), choice]
            for j in np.nonzero(bad)[0]:
                choice[j] = int(np.argmax(np.where(m[j], probs[j], -1.0)))
            with np.errstate(invalid="ignore"):
                ent = -np.where(m, probs * logp_all, 0.0).sum(axis=1)
            for j, i in enumerate(rows):
                if i < 0:
                    continue
                c = int(choice[j])
                states[i].push(c)
                logps[i].append(logp_all[j, c])
                ents[i].append(ent[j])
                if states[i].complete:
                    rows[j] = -1
                    n_live -= 1
            t += 1
            if n_live and n_live < 0.75 * nb:
                keep = np.nonzero(rows >= 0)[0]
                sel = torch.from_numpy(keep)
                state_cache = [_select(c, sel, t) for c in state_cache]
                dec_cache = [[_select(c[0], sel, t), _select(c[1], sel, t)] for c in dec_cache]
                rows = rows[keep]
                choice = choice[keep]
            prev = torch.from_numpy(choice)[:, None]
        return SampleBatch([s.tokens for s in states], par, sib,
                           [np.array(mm) for mm in masks],
                           [np.array(lp) for lp in logps], [np.array(e) for e in ents])

    # -------------------------------------------------------- library change
    def extended(self, lib: LibrarySpec, seed: int = 0) -> "Generator":
        """Copy onto a library with more variables; new rows start at small scale."""
        old = self.lib
        missing = [t.name for t in old.tokens if t.name not in lib.index]
        if missing:
            raise IncompatibleCheckpoint(f"target library lacks tokens {missing}")
        cfg = ArchConfig(**{**asdict(self.cfg), "d": max(lib.d, self.cfg.d)})
        new = Generator(lib, cfg, seed)
        rng = np.random.default_rng(seed + 1)
        row_map = {old.index[t.name]: lib.index[t.name] for t in old.tokens}
        row_map[len(old)] = len(lib)
        src = dict(self.named_parameters())
        with torch.no_grad():
            for name, p in new.named_parameters():
                q = src[name]
                if p.shape == q.shape and not _is_token_table(name) and not _is_encoder_input(name):
                    p.copy_(q)
                    continue
                fresh = torch.tensor(rng.standard_normal(tuple(p.shape)) * NEW_ROW_GAIN, dtype=DTYPE)
                if _is_token_table(name):
                    # rows are token ids (embeddings, output weight/bias)
                    fresh_rows = fresh.clone()
                    if name.startswith("out.bias"):
                        fresh_rows.zero_()
                    for a, b in row_map.items():
                        if a < q.shape[0]:
                            fresh_rows[b] = q[a]
                    p.copy_(fresh_rows)
                elif _is_encoder_input(name):
                    # columns: old variables, then new variables, then y last
                    out = fresh.clone()
                    d_old = q.shape[1] - 1
                    out[:, :d_old] = q[:, :d_old]
                    out[:, -1] = q[:, -1]
                    p.copy_(out)
                else:
                    raise ShapeMismatch(f"{name}: {tuple(q.shape)} -> {tuple(p.shape)}")
        return new


def _select(cache: list, rows: torch.Tensor, filled: int) -> list:
    out = []
    for buf in cache:
        new = torch.empty((len(rows),) + tuple(buf.shape[1:]), dtype=buf.dtype)
        new[:, :filled] = buf[rows, :filled]
        out.append(new)
    return out


def _is_token_table(name: str) -> bool:
    return name.split(".")[0] in ("token_emb", "parent_emb", "sibling_emb", "out")


def _is_encoder_input(name: str) -> bool:
    return name.startswith("encoder.isabs.0.") and (
        ".mab0.fc_k.weight" in name or ".mab0.fc_v.weight" in name or ".mab1.fc_q.weight" in name)


# ----------------------------------------------------------------- checkpoints
def checkpoint_bytes(gen: Generator, meta: dict | None = None,
                     extra: dict[str, torch.Tensor] | None = None) -> bytes:
    tensors = [(n, p.detach()) for n, p in gen.named_parameters()]
    tensors += sorted((extra or {}).items())
    header = {
        "format": FORMAT_VERSION,
        "library": gen.lib.to_dict(),
        "library_hash": gen.lib.fingerprint,
        "arch": asdict(gen.cfg),
        "tensors": [[n, list(t.shape)] for n, t in tensors],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(t.contiguous().numpy().astype("<f8").tobytes() for _, t in tensors)
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + payload


def save_checkpoint(gen: Generator, path: str | Path, meta: dict | None = None,
                    extra: dict[str, torch.Tensor] | None = None) -> None:
    data = checkpoint_bytes(gen, meta, extra)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, library: LibrarySpec | None = None,
                    extend: bool = False) -> tuple[Generator, dict, dict[str, torch.Tensor]]:
    """Returns (generator, meta, extra tensors such as optimizer moments).

    With ``library`` given, the checkpoint's library must match it exactly,
    unless ``extend`` is set, in which case extra variable tokens are added.
    """
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise VersionMismatch(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(data[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VersionMismatch(f"{path}: corrupt header") from exc
    if header.get("format") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: header format mismatch")
    lib = LibrarySpec.from_dict(header["library"])
    gen = Generator(lib, ArchConfig(**header["arch"]))
    params = dict(gen.named_parameters())
    offset = 16 + hlen
    extra = {}
    with torch.no_grad():
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(data):
                raise ShapeMismatch(f"{path}: payload truncated at {name}")
            arr = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape)
            offset = end
            t = torch.tensor(arr.copy(), dtype=DTYPE)
            if name in params:
                if tuple(params[name].shape) != tuple(shape):
                    raise ShapeMismatch(f"{name}: {tuple(params[name].shape)} vs {tuple(shape)}")
                params[name].copy_(t)
            else:
                extra[name] = t
    missing = set(params) - {n for n, _ in header["tensors"]}
    if missing:
        raise ShapeMismatch(f"{path}: missing tensors {sorted(missing)[:3]}")
    if offset != len(data):
        raise ShapeMismatch(f"{path}: {len(data) - offset} trailing bytes")
    meta = header.get("meta", {})
    if library is not None and library.fingerprint != lib.fingerprint:
        if not extend:
            raise IncompatibleCheckpoint(f"checkpoint library {lib.name} != {library.name}")
        gen = gen.extended(library)
        extra = {}
    return gen, meta, extra


def fingerprint_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
