"""Tiny decoder-only autoregressive transformer.

Pre-norm blocks with learned positional embeddings and a GELU feed-forward.
The forward pass is written once against the autodiff op set: feed it
parameter Nodes to get a differentiable graph, or plain arrays (a
ParamStore) to get fast raw-numpy inference.

Sequence convention: a :class:`TokenSeq` holds prompt tokens followed by
answer tokens (no padding); logits at position i predict the token at
position i+1, and only answer tokens contribute to likelihoods.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, StructuralMismatchError
from .store import ParamStore

PAD, BOS, EOS, UNK = 0, 1, 2, 3  # reserved token ids


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    ctx_len: int = 48
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must be >= 4 (got {self.vocab_size})")
        if self.ctx_len < 2:
            raise ConfigError(f"ctx_len must be >= 2 (got {self.ctx_len})")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        for field in ("d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive")


@dataclass(frozen=True)
class TokenSeq:
    """Prompt tokens followed by a contiguous answer suffix."""

    tokens: tuple[int, ...]
    answer_len: int = 0

    def __post_init__(self):
        if self.answer_len < 0 or self.answer_len > len(self.tokens):
            raise ValueError(
                f"answer_len {self.answer_len} out of range for {len(self.tokens)} tokens"
            )

    @property
    def prompt_len(self) -> int:
        return len(self.tokens) - self.answer_len

    @property
    def prompt_tokens(self) -> tuple[int, ...]:
        return self.tokens[: self.prompt_len]

    @property
    def answer_tokens(self) -> tuple[int, ...]:
        return self.tokens[self.prompt_len :]

    def __len__(self) -> int:
        return len(self.tokens)


def param_template(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter names and shapes, in store order."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    spec: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (v, d)),
        ("pos_emb", (cfg.ctx_len, d)),
    ]
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        spec += [
            (p + "ln1.g", (d,)),
            (p + "ln1.b", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)),
            (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)),
            (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)),
            (p + "attn.bo", (d,)),
            (p + "ln2.g", (d,)),
            (p + "ln2.b", (d,)),
            (p + "ff.w1", (d, f)),
            (p + "ff.b1", (f,)),
            (p + "ff.w2", (f, d)),
            (p + "ff.b2", (d,)),
        ]
    spec += [
        ("ln_f.g", (d,)),
        ("ln_f.b", (d,)),
        ("head.w", (d, v)),
        ("head.b", (v,)),
    ]
    return spec


def init_params(cfg: ModelConfig) -> ParamStore:
    """Seeded scaled-normal weights, unit layer-norm gains, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    std = 0.02
    resid_std = std / np.sqrt(2.0 * cfg.n_layers)  # residual branches scaled down
    entries = []
    for name, shape in param_template(cfg):
        base = name.split(".")[-1]
        if base == "g":
            arr = np.ones(shape)
        elif base.startswith("b"):
            arr = np.zeros(shape)
        elif name.endswith(("attn.wo", "ff.w2")):
            arr = rng.normal(0.0, resid_std, shape)
        else:
            arr = rng.normal(0.0, std, shape)
        entries.append((name, arr))
    return ParamStore(entries)


def zero_params(cfg: ModelConfig) -> ParamStore:
    """All-zero parameters; the model then outputs the uniform distribution."""
    return ParamStore((name, np.zeros(shape)) for name, shape in param_template(cfg))


def check_theta(theta: ParamStore, cfg: ModelConfig) -> None:
    expected = param_template(cfg)
    if list(zip(theta.names, theta.shapes())) != expected:
        raise StructuralMismatchError("parameter store does not match model config")


def _params_of(theta) -> Mapping:
    return theta.as_dict() if isinstance(theta, ParamStore) else theta


def logits_matrix(theta, ids: np.ndarray, cfg: ModelConfig):
    """Batched forward pass: ids [B, L] -> logits [B, L, vocab].

    `theta` may be a ParamStore (raw inference) or a mapping of autodiff
    Nodes (differentiable).  Causal masking is enforced inside attention.
    """
    p = _params_of(theta)
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"ids must be [B, L], got shape {ids.shape}")
    B, L = ids.shape
    if L > cfg.ctx_len:
        raise ValueError(f"sequence length {L} exceeds ctx_len {cfg.ctx_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")

    nh, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
    causal = np.where(np.tril(np.ones((L, L), dtype=bool)), 0.0, -1e9)[None, None]

    x = ad.add(ad.embedding(p["tok_emb"], ids), ad.embedding(p["pos_emb"], np.arange(L)))
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        h = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = ad.add(ad.matmul(h, p[pre + "attn.wq"]), p[pre + "attn.bq"])
        k = ad.add(ad.matmul(h, p[pre + "attn.wk"]), p[pre + "attn.bk"])
        v = ad.add(ad.matmul(h, p[pre + "attn.wv"]), p[pre + "attn.bv"])
        # [B, L, D] -> [B, nh, L, hd]
        q = ad.transpose(ad.reshape(q, (B, L, nh, hd)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (B, L, nh, hd)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (B, L, nh, hd)), (0, 2, 1, 3))
        scores = ad.add(
            ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd)),
            causal,
        )
        att = ad.softmax(scores)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, L, cfg.d_model))
        x = ad.add(x, ad.add(ad.matmul(ctx, p[pre + "attn.wo"]), p[pre + "attn.bo"]))
        h2 = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        ff = ad.gelu(ad.add(ad.matmul(h2, p[pre + "ff.w1"]), p[pre + "ff.b1"]))
        ff = ad.add(ad.matmul(ff, p[pre + "ff.w2"]), p[pre + "ff.b2"])
        x = ad.add(x, ff)
    x = ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    return ad.add(ad.matmul(x, p["head.w"]), p["head.b"])


def forward_logits(theta: ParamStore, seq: TokenSeq, cfg: ModelConfig) -> np.ndarray:
    """Logits [len, vocab] for one sequence; position i predicts token i+1."""
    check_theta(theta, cfg)
    if len(seq) == 0:
        raise ValueError("empty sequence")
    return logits_matrix(theta, np.asarray(seq.tokens)[None, :], cfg)[0]


def pack_sequences(seqs: Sequence[TokenSeq], pad_id: int = PAD) -> np.ndarray:
    """Right-pad tokens into an int matrix [B, Lmax]."""
    lmax = max(len(s) for s in seqs)
    ids = np.full((len(seqs), lmax), pad_id, dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s.tokens
    return ids


def answer_target_mask(seqs: Sequence[TokenSeq], lmax: int) -> np.ndarray:
    """mask [B, Lmax]: True at positions whose target (next token) is an answer token."""
    mask = np.zeros((len(seqs), lmax), dtype=bool)
    for b, s in enumerate(seqs):
        mask[b, s.prompt_len - 1 : len(s) - 1] = True
    return mask


def answer_logprob_rows(theta, seqs: Sequence[TokenSeq], cfg: ModelConfig):
    """Per-target-token log-probs for a batch.

    Returns (logp, mask, lengths): logp is [B, Lmax] (Node or array) where
    column j holds the log-prob of token j+1 given the prefix (the final
    column is a dummy), mask selects answer targets, lengths is the
    per-sequence answer token count.
    """
    for s in seqs:
        if s.answer_len < 1:
            raise ValueError("sequence has no answer tokens")
        if s.prompt_len < 1:
            raise ValueError("sequence has no prompt tokens")
    ids = pack_sequences(seqs)
    logits = logits_matrix(theta, ids, cfg)
    logp_all = ad.log_softmax(logits)
    # column j gathers the target ids[j+1]; the last column self-gathers and
    # is never selected by the mask.
    targets = np.concatenate([ids[:, 1:], ids[:, -1:]], axis=1)
    logp = ad.take_last_axis(logp_all, targets)
    mask = answer_target_mask(seqs, ids.shape[1])
    lengths = np.array([s.answer_len for s in seqs], dtype=np.float64)
    return logp, mask, lengths


def sequence_log_prob(theta: ParamStore, seq: TokenSeq, cfg: ModelConfig) -> float:
    """Sum over answer positions of log softmax(logits)[true token]; always <= 0."""
    check_theta(theta, cfg)
    logp, mask, _ = answer_logprob_rows(theta, [seq], cfg)
    return float(np.sum(ad.val(logp)[0] * mask[0]))


def sequence_log_probs(theta: ParamStore, seqs: Sequence[TokenSeq], cfg: ModelConfig) -> np.ndarray:
    """Batched raw-mode sequence log-probs (one float per sequence)."""
    if not seqs:
        return np.zeros(0)
    logp, mask, _ = answer_logprob_rows(theta, seqs, cfg)
    return np.sum(ad.val(logp) * mask, axis=1)


def greedy_decode(
    theta: ParamStore, prompt: TokenSeq, max_new: int, cfg: ModelConfig, eos_id: int = EOS
) -> TokenSeq:
    """Append argmax tokens until eos or max_new; ties break to the lowest id."""
    check_theta(theta, cfg)
    if len(prompt) + max_new > cfg.ctx_len:
        raise ValueError(
            f"prompt length {len(prompt)} + max_new {max_new} exceeds ctx_len {cfg.ctx_len}"
        )
    out = greedy_decode_batch(theta, [prompt], max_new, cfg, eos_id)[0]
    return TokenSeq(prompt.tokens + out, answer_len=len(out))


def greedy_decode_batch(
    theta: ParamStore,
    prompts: Sequence[TokenSeq],
    max_new: int,
    cfg: ModelConfig,
    eos_id: int = EOS,
) -> list[tuple[int, ...]]:
    """Greedy continuation for many prompts at once; returns generated tokens only."""
    if max_new == 0 or not prompts:
        return [() for _ in prompts]
    lens = np.array([len(p) for p in prompts], dtype=np.int64)
    lmax = int(lens.max()) + max_new
    if lmax > cfg.ctx_len:
        raise ValueError(f"decode would exceed ctx_len {cfg.ctx_len}")
    B = len(prompts)
    ids = np.full((B, lmax), PAD, dtype=np.int64)
    for b, pr in enumerate(prompts):
        ids[b, : len(pr)] = pr.tokens
    cur = lens.copy()
    done = np.zeros(B, dtype=bool)
    for _ in range(max_new):
        width = int(cur.max())
        logits = logits_matrix(theta, ids[:, :width], cfg)
        nxt = np.argmax(logits[np.arange(B), cur - 1], axis=-1)
        for b in range(B):
            if done[b]:
                continue
            ids[b, cur[b]] = nxt[b]
            cur[b] += 1
            if nxt[b] == eos_id:
                done[b] = True
        if done.all():
            break
    return [tuple(int(t) for t in ids[b, lens[b] : cur[b]]) for b in range(B)]
