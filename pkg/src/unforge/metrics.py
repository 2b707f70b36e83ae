"""Measurement: ROUGE-L, answer probability, truth ratio, KS-based forget
quality, model utility, and the collapse diagnostic.

Forget quality is the p-value of a two-sample Kolmogorov-Smirnov test
comparing per-example truth ratios between a candidate model and the
retrained-from-scratch oracle; 1.0 means indistinguishable from retraining.
Model utility is the harmonic mean of six generation/probability metrics
over the retain and heldout sets.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import QAPair
from .errors import DivergenceError
from .model import (
    EOS,
    ModelConfig,
    TokenSeq,
    greedy_decode_batch,
    logits_matrix,
    pack_sequences,
    sequence_log_probs,
)
from .store import ParamStore, axpy, l2_norm

DECODE_MAX_NEW = 8  # longest answer is 4 words + eos


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    """Classic O(len(a)*len(b)) longest-common-subsequence DP."""
    n, m = len(a), len(b)
    prev = [0] * (m + 1)
    for i in range(1, n + 1):
        cur = [0] * (m + 1)
        ai = a[i - 1]
        for j in range(1, m + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[m]


def rouge_l(candidate: Sequence[int], reference: Sequence[int]) -> tuple[float, float]:
    """LCS-based (F-measure, recall); answer tokens only, no padding."""
    if len(candidate) == 0 or len(reference) == 0:
        raise ValueError("rouge_l needs non-empty candidate and reference")
    lcs = lcs_length(candidate, reference)
    p = lcs / len(candidate)
    r = lcs / len(reference)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return f, r


def _normalized_probs(theta: ParamStore, seqs: Sequence[TokenSeq], cfg: ModelConfig) -> np.ndarray:
    """exp(answer log-likelihood / answer length) per sequence; in (0, 1]."""
    logps = sequence_log_probs(theta, seqs, cfg)
    lens = np.array([s.answer_len for s in seqs], dtype=np.float64)
    return np.exp(logps / lens)


def answer_probability(theta: ParamStore, qa: QAPair, cfg: ModelConfig) -> float:
    """Length-normalized probability of the gold answer given the question."""
    return float(_normalized_probs(theta, [qa.answer], cfg)[0])


def truth_ratio(theta: ParamStore, qa: QAPair, cfg: ModelConfig) -> float:
    """P_para / (P_para + mean_k P_perturbed); 0.5 = cannot tell truth apart."""
    return float(truth_ratios(theta, [qa], cfg)[0])


def truth_ratios(theta: ParamStore, pairs: Sequence[QAPair], cfg: ModelConfig) -> np.ndarray:
    for qa in pairs:
        if len(qa.perturbed_answers) < 2:
            raise ValueError("truth ratio needs a paraphrase and >= 2 perturbed answers")
    seqs: list[TokenSeq] = []
    for qa in pairs:
        seqs.append(qa.paraphrase_answer)
        seqs.extend(qa.perturbed_answers)
    probs = _normalized_probs(theta, seqs, cfg)
    out = np.zeros(len(pairs))
    i = 0
    for b, qa in enumerate(pairs):
        k = len(qa.perturbed_answers)
        p_para = probs[i]
        p_pert = probs[i + 1 : i + 1 + k].mean()
        out[b] = p_para / (p_para + p_pert)
        i += 1 + k
    return out


@dataclass(frozen=True)
class KSResult:
    statistic: float
    p_value: float
    n: int
    m: int


def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> KSResult:
    """Two-sample KS test with the asymptotic Kolmogorov series p-value.

    D is the maximum empirical-CDF gap over the pooled points; the p-value
    uses lambda = D * (sqrt(ne) + 0.12 + 0.11/sqrt(ne)) with the effective
    size ne = n*m/(n+m), summing 2*sum_k (-1)^(k-1) exp(-2 k^2 lambda^2)
    until a term drops below 1e-12.
    """
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    n, m = len(a), len(b)
    if n < 5 or m < 5:
        raise ValueError(f"ks_two_sample needs >= 5 samples per side, got {n}, {m}")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / n
    cdf_b = np.searchsorted(b, pooled, side="right") / m
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    ne = n * m / (n + m)
    lam = d * (math.sqrt(ne) + 0.12 + 0.11 / math.sqrt(ne))
    return KSResult(statistic=d, p_value=_kolmogorov_sf(lam), n=n, m=m)


def _kolmogorov_sf(lam: float) -> float:
    if lam <= 0.0:
        return 1.0
    total = 0.0
    for k in range(1, 101):
        term = math.exp(-2.0 * k * k * lam * lam)
        total += term if k % 2 == 1 else -term
        if term < 1e-12:
            break
    return min(1.0, max(0.0, 2.0 * total))


def forget_quality(
    theta_candidate: ParamStore,
    theta_oracle: ParamStore,
    forget_pairs: Sequence[QAPair],
    cfg: ModelConfig,
    statistic: str = "truth_ratio",
) -> float:
    """KS p-value between candidate and oracle per-example statistics."""
    if len(forget_pairs) < 5:
        raise ValueError(f"forget quality needs >= 5 forget pairs, got {len(forget_pairs)}")
    if statistic == "truth_ratio":
        s_cand = truth_ratios(theta_candidate, forget_pairs, cfg)
        s_oracle = truth_ratios(theta_oracle, forget_pairs, cfg)
    elif statistic == "nll":
        seqs = [p.answer for p in forget_pairs]
        s_cand = -sequence_log_probs(theta_candidate, seqs, cfg)
        s_oracle = -sequence_log_probs(theta_oracle, seqs, cfg)
    else:
        raise ValueError(f"unknown forget-quality statistic {statistic!r}")
    return ks_two_sample(s_cand, s_oracle).p_value


def _harmonic_mean(values: Sequence[float]) -> float:
    if any(v <= 0 for v in values):
        return 0.0
    return len(values) / sum(1.0 / v for v in values)


def decode_rouge(
    theta: ParamStore, pairs: Sequence[QAPair], cfg: ModelConfig
) -> tuple[float, float]:
    """Mean ROUGE-L (F, recall) of greedy decodes against gold answers."""
    prompts = [p.question for p in pairs]
    decoded = greedy_decode_batch(theta, prompts, DECODE_MAX_NEW, cfg)
    fs, rs = [], []
    for qa, gen in zip(pairs, decoded):
        cand = tuple(t for t in gen if t != EOS)
        gold = qa.answer_words()
        if not cand:
            fs.append(0.0)
            rs.append(0.0)
        else:
            f, r = rouge_l(cand, gold)
            fs.append(f)
            rs.append(r)
    return float(np.mean(fs)), float(np.mean(rs))


def model_utility(
    theta: ParamStore,
    retain_pairs: Sequence[QAPair],
    heldout_pairs: Sequence[QAPair],
    cfg: ModelConfig,
) -> float:
    """Harmonic mean of {ROUGE-L F, mean answer prob, mean truth ratio} on
    the retain and heldout sets (six values); 0 if any component is 0."""
    if not retain_pairs or not heldout_pairs:
        raise ValueError("model utility needs non-empty retain and heldout sets")
    comps = []
    for pairs in (retain_pairs, heldout_pairs):
        f, _ = decode_rouge(theta, pairs, cfg)
        comps.append(f)
        comps.append(float(_normalized_probs(theta, [p.answer for p in pairs], cfg).mean()))
        comps.append(float(truth_ratios(theta, pairs, cfg).mean()))
    return _harmonic_mean(comps)


# -- collapse diagnostic ---------------------------------------------------


def collapse_contexts(
    pairs: Sequence[QAPair], cap: int = 500, seed: int = 0
) -> list[tuple[tuple[int, ...], np.ndarray]]:
    """Distinct answer-prefix contexts with empirical next-token distributions.

    A context is the full token prefix before each answer position (length
    >= 2); q counts the next tokens observed for that exact prefix across
    the split.  Deterministically capped by seeded sampling.
    """
    counts: dict[tuple[int, ...], dict[int, int]] = {}
    vocab = 0
    for qa in pairs:
        toks = qa.answer.tokens
        vocab = max(vocab, max(toks) + 1)
        start = qa.answer.prompt_len
        for t in range(start, len(toks)):
            prefix = toks[:t]
            if len(prefix) < 2:
                continue
            counts.setdefault(prefix, {})
            counts[prefix][toks[t]] = counts[prefix].get(toks[t], 0) + 1
    keys = sorted(counts)
    if len(keys) > cap:
        rng = np.random.default_rng(seed)
        keys = [keys[i] for i in sorted(rng.permutation(len(keys))[:cap])]
    out = []
    for key in keys:
        q = np.zeros(vocab)
        for tok, c in counts[key].items():
            q[tok] = c
        out.append((key, q / q.sum()))
    return out


def collapse_metric(
    theta: ParamStore,
    contexts: Sequence[tuple[tuple[int, ...], np.ndarray]],
    cfg: ModelConfig,
) -> float:
    """Mean KL(q || p_theta) over contexts; large when the model commits to a
    near-constant output regardless of context."""
    if not contexts:
        raise ValueError("collapse metric needs at least one context")
    prefixes = [TokenSeq(tuple(c)) for c, _ in contexts]
    ids = pack_sequences(prefixes)
    logits = logits_matrix(theta, ids, cfg)
    total = 0.0
    for i, (ctx, q) in enumerate(contexts):
        if q.min() < 0 or not math.isclose(q.sum(), 1.0, rel_tol=1e-9):
            raise ValueError("q is not a distribution")
        logp = logits[i, len(ctx) - 1]
        logp = logp - logp.max()
        logp = logp - np.log(np.exp(logp).sum())
        sup = q > 0
        qv = q[sup]
        total += float(np.sum(qv * (np.log(qv) - logp[: len(q)][sup])))
    return total / len(contexts)


# -- full report -------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    fq: float
    mu: float
    f_rl: float
    r_rl: float
    heldout_rl: float
    f_rl_recall: float
    r_rl_recall: float
    heldout_rl_recall: float
    prob_forget: float
    prob_retain: float
    prob_heldout: float
    tr_forget: float
    tr_retain: float
    tr_heldout: float
    collapse_retain: float
    collapse_forget: float
    divergence_from_ref: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def csv_header() -> str:
        return ",".join(EvalReport.__dataclass_fields__)

    def csv_row(self) -> str:
        d = asdict(self)
        return ",".join(repr(float(d[k])) for k in EvalReport.__dataclass_fields__)


def evaluate(
    theta: ParamStore,
    theta_ref: ParamStore | None,
    theta_oracle: ParamStore | None,
    splits,
    cfg: ModelConfig,
    collapse_cap: int = 500,
) -> EvalReport:
    """Score one checkpoint on every metric; deterministic."""
    if not np.all(np.isfinite(theta.flat())):
        raise DivergenceError("cannot evaluate non-finite parameters", step=-1)
    sets = {}
    for name, pairs in (
        ("forget", splits.forget),
        ("retain", splits.retain),
        ("heldout", splits.heldout_world),
    ):
        f, rec = decode_rouge(theta, pairs, cfg)
        prob = float(_normalized_probs(theta, [p.answer for p in pairs], cfg).mean())
        tr = float(truth_ratios(theta, pairs, cfg).mean())
        sets[name] = (f, rec, prob, tr)
    fq = math.nan
    if theta_oracle is not None and len(splits.forget) >= 5:
        fq = forget_quality(theta, theta_oracle, splits.forget, cfg)
    mu = model_utility(theta, splits.retain, splits.heldout_world, cfg)
    div = math.nan
    if theta_ref is not None:
        div = l2_norm(axpy(1.0, theta, -1.0, theta_ref))
    return EvalReport(
        fq=fq,
        mu=mu,
        f_rl=sets["forget"][0],
        r_rl=sets["retain"][0],
        heldout_rl=sets["heldout"][0],
        f_rl_recall=sets["forget"][1],
        r_rl_recall=sets["retain"][1],
        heldout_rl_recall=sets["heldout"][1],
        prob_forget=sets["forget"][2],
        prob_retain=sets["retain"][2],
        prob_heldout=sets["heldout"][2],
        tr_forget=sets["forget"][3],
        tr_retain=sets["retain"][3],
        tr_heldout=sets["heldout"][3],
        collapse_retain=collapse_metric(
            theta, collapse_contexts(splits.retain, collapse_cap), cfg
        ),
        collapse_forget=collapse_metric(
            theta, collapse_contexts(splits.forget, collapse_cap), cfg
        ),
        divergence_from_ref=div,
    )
