"""Training objectives: CE fine-tuning, ascent baselines, and the
memorize-then-extrapolate family.

Sign conventions, fixed package-wide:

* CE is the negative log-likelihood (mean over pairs of the per-pair mean
  answer-token NLL), so minimizing CE memorizes.
* GA is the negation of forget-set CE: minimizing it maximizes forget NLL.
* Preference-ratio losses use length-normalized per-pair log-likelihoods
  (divided by answer length) against a frozen reference model.
* The memorization variants (``MOX_*``) are descent objectives on all
  training data; the targeted variants additionally *ascend* the NLL of a
  synthetic replacement answer on forget prompts, so the later parameter
  extrapolation step is what installs the replacement.  The replacement
  pairs are never part of the training corpus.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import QAPair
from .errors import ConfigError
from .model import ModelConfig, answer_logprob_rows, answer_target_mask, logits_matrix, pack_sequences
from .store import ParamStore

VARIANTS = (
    "CE",
    "GA",
    "GAD",
    "KL_BASELINE",
    "NPO",
    "MOX_MEM_CE",
    "MOX_MEM_PO",
    "MOX_TARGETED_CE",
    "MOX_TARGETED_PO",
    "WEIGHTED_GD",
    "WEIGHTED_GA",
)

# Variants containing a term whose minimization *increases* the NLL of
# training pairs.  The MOX family is descent-only on training data by
# construction (targeted MOX ascends only on synthetic replacement pairs).
ASCENT_VARIANTS = frozenset({"GA", "GAD", "KL_BASELINE", "NPO", "WEIGHTED_GA"})
MOX_VARIANTS = frozenset({"MOX_MEM_CE", "MOX_MEM_PO", "MOX_TARGETED_CE", "MOX_TARGETED_PO"})

_REFERENCE_VARIANTS = frozenset(
    {"KL_BASELINE", "NPO", "MOX_MEM_CE", "MOX_MEM_PO", "MOX_TARGETED_CE", "MOX_TARGETED_PO"}
)


@dataclass(frozen=True)
class ObjectiveSpec:
    """Declarative choice of loss plus its weights.

    ``forget_weight`` scales the unlearning term of GA/NPO-style variants
    and ``retain_ce_weight`` adds a plain retain-set CE anchor; both default
    to the canonical objective (1 and 0).
    """

    variant: str
    beta: float = 0.1
    kl_weight: float = 1.0
    target_weight: float = 1.0
    forget_weight: float = 1.0
    retain_ce_weight: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown objective variant {self.variant!r}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.kl_weight < 0:
            raise ConfigError(f"kl_weight must be >= 0, got {self.kl_weight}")

    @property
    def needs_reference(self) -> bool:
        return self.variant in _REFERENCE_VARIANTS

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "beta": self.beta,
            "kl_weight": self.kl_weight,
            "target_weight": self.target_weight,
            "forget_weight": self.forget_weight,
            "retain_ce_weight": self.retain_ce_weight,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ObjectiveSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class Batch:
    retain_pairs: tuple[QAPair, ...] = ()
    forget_pairs: tuple[QAPair, ...] = ()
    targeted_pairs: tuple[QAPair, ...] = ()

    def __post_init__(self):
        if not (self.retain_pairs or self.forget_pairs or self.targeted_pairs):
            raise ValueError("batch is empty")


def _mean_pair_nll(theta, pairs: Sequence[QAPair], cfg: ModelConfig):
    """Mean over pairs of the per-pair mean answer-token NLL."""
    logp, mask, lengths = answer_logprob_rows(theta, [p.answer for p in pairs], cfg)
    per_pair = ad.mul(ad.sum_(ad.mul(logp, mask.astype(float)), axis=1), 1.0 / lengths)
    return -ad.mean_(per_pair)


def _norm_seq_logprob(theta, pairs: Sequence[QAPair], cfg: ModelConfig):
    """Per-pair answer log-likelihood divided by answer length; shape [B]."""
    logp, mask, lengths = answer_logprob_rows(theta, [p.answer for p in pairs], cfg)
    return ad.mul(ad.sum_(ad.mul(logp, mask.astype(float)), axis=1), 1.0 / lengths)


def loss_ce(theta, batch: Batch, cfg: ModelConfig):
    """Plain CE on whatever pairs the batch supplies (retain and/or forget)."""
    pairs = batch.retain_pairs + batch.forget_pairs
    if not pairs:
        raise ValueError("CE loss needs at least one pair")
    return _mean_pair_nll(theta, pairs, cfg)


def loss_ga(theta, batch: Batch, cfg: ModelConfig):
    """Negated forget-set CE; minimizing it maximizes forget NLL (unbounded below)."""
    if not batch.forget_pairs:
        raise ValueError("GA loss needs forget pairs")
    return -_mean_pair_nll(theta, batch.forget_pairs, cfg)


def loss_gad(theta, batch: Batch, cfg: ModelConfig):
    """Retain CE minus forget CE (ascent with a retain anchor)."""
    if not batch.retain_pairs or not batch.forget_pairs:
        raise ValueError("GAD loss needs both retain and forget pairs")
    return ad.sub(
        _mean_pair_nll(theta, batch.retain_pairs, cfg),
        _mean_pair_nll(theta, batch.forget_pairs, cfg),
    )


def loss_kl_retain(theta, theta_ref: ParamStore, batch: Batch, cfg: ModelConfig):
    """Mean over retain answer positions of KL(ref || theta) over the vocabulary."""
    if not batch.retain_pairs:
        raise ValueError("KL regularizer needs retain pairs")
    seqs = [p.answer for p in batch.retain_pairs]
    ids = pack_sequences(seqs)
    mask = answer_target_mask(seqs, ids.shape[1]).astype(float)
    ref_logp = ad.log_softmax(logits_matrix(theta_ref, ids, cfg))  # raw array
    p_ref = np.exp(ref_logp) * mask[..., None]
    count = mask.sum()
    const = float((p_ref * ref_logp).sum() / count)
    logp = ad.log_softmax(logits_matrix(theta, ids, cfg))
    cross = ad.mul(ad.sum_(ad.mul(logp, p_ref)), 1.0 / count)
    return ad.sub(const, cross)


def _ratio(theta, theta_ref: ParamStore, pairs, cfg: ModelConfig):
    """Length-normalized log-likelihood ratio to the reference, per pair."""
    s_theta = _norm_seq_logprob(theta, pairs, cfg)
    s_ref = ad.val(_norm_seq_logprob(theta_ref, pairs, cfg))
    return ad.sub(s_theta, s_ref)


def loss_npo(theta, theta_ref: ParamStore, batch: Batch, cfg: ModelConfig, beta: float):
    """-(2/beta) * mean log sigmoid(-beta * log-ratio); positive, bounded ascent."""
    if not batch.forget_pairs:
        raise ValueError("NPO loss needs forget pairs")
    if beta <= 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    r = _ratio(theta, theta_ref, batch.forget_pairs, cfg)
    return ad.mul(ad.mean_(ad.log_sigmoid(ad.mul(r, -beta))), -2.0 / beta)


def _po_memorize_term(theta, theta_ref, batch, cfg, beta):
    """Negation of the NPO sum: drives the likelihood ratio up (memorization)."""
    r = _ratio(theta, theta_ref, batch.forget_pairs, cfg)
    return ad.mul(ad.mean_(ad.log_sigmoid(ad.mul(r, -beta))), 2.0 / beta)


def loss_mox_mem_ce(theta, theta_ref, batch: Batch, cfg: ModelConfig, kl_weight: float):
    """Forget-set CE plus KL consistency on the retain set (all descent)."""
    if not batch.forget_pairs:
        raise ValueError("memorization loss needs forget pairs")
    mem = _mean_pair_nll(theta, batch.forget_pairs, cfg)
    if kl_weight == 0.0:
        return mem
    return ad.add(mem, ad.mul(loss_kl_retain(theta, theta_ref, batch, cfg), kl_weight))


def loss_mox_mem_po(theta, theta_ref, batch: Batch, cfg: ModelConfig, beta: float, kl_weight: float):
    """Preference-ratio memorization plus KL consistency on the retain set."""
    if not batch.forget_pairs:
        raise ValueError("memorization loss needs forget pairs")
    mem = _po_memorize_term(theta, theta_ref, batch, cfg, beta)
    if kl_weight == 0.0:
        return mem
    return ad.add(mem, ad.mul(loss_kl_retain(theta, theta_ref, batch, cfg), kl_weight))


def loss_targeted(
    theta,
    theta_ref,
    batch: Batch,
    cfg: ModelConfig,
    po: bool,
    beta: float,
    kl_weight: float,
    target_weight: float,
):
    """Memorization loss minus the replacement-answer CE on forget prompts.

    Suppressing the replacement answer while memorizing the true answers
    puts both on the same learning direction, so extrapolating away from
    the memorization model removes the true answers *and* installs the
    replacement.  The replacement pairs are synthetic, not training data.
    """
    if not batch.targeted_pairs:
        raise ValueError("targeted loss needs targeted pairs")
    if po:
        mem = loss_mox_mem_po(theta, theta_ref, batch, cfg, beta, kl_weight)
    else:
        mem = loss_mox_mem_ce(theta, theta_ref, batch, cfg, kl_weight)
    target_ce = _mean_pair_nll(theta, batch.targeted_pairs, cfg)
    return ad.sub(mem, ad.mul(target_ce, target_weight))


def loss_weighted(theta, batch: Batch, cfg: ModelConfig, sign: int, beta: float):
    """retain CE + sign * beta * forget CE (the GD/GA reweighting pair)."""
    if not batch.retain_pairs or not batch.forget_pairs:
        raise ValueError("weighted loss needs both retain and forget pairs")
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    if beta == 0.0:
        return _mean_pair_nll(theta, batch.retain_pairs, cfg)
    return ad.add(
        _mean_pair_nll(theta, batch.retain_pairs, cfg),
        ad.mul(_mean_pair_nll(theta, batch.forget_pairs, cfg), float(sign) * beta),
    )


def objective_loss(
    spec: ObjectiveSpec,
    theta,
    theta_ref: ParamStore | None,
    batch: Batch,
    cfg: ModelConfig,
):
    """Evaluate the loss a spec describes; returns a Node in graph mode."""
    if spec.needs_reference and theta_ref is None:
        raise ConfigError(f"objective {spec.variant} requires a reference model")
    v = spec.variant
    if v == "CE":
        core = loss_ce(theta, batch, cfg)
    elif v == "GA":
        core = ad.mul(loss_ga(theta, batch, cfg), spec.forget_weight)
    elif v == "GAD":
        core = loss_gad(theta, batch, cfg)
    elif v == "KL_BASELINE":
        core = ad.add(
            ad.mul(loss_ga(theta, batch, cfg), spec.forget_weight),
            ad.mul(loss_kl_retain(theta, theta_ref, batch, cfg), spec.kl_weight),
        )
    elif v == "NPO":
        core = ad.mul(loss_npo(theta, theta_ref, batch, cfg, spec.beta), spec.forget_weight)
    elif v == "MOX_MEM_CE":
        core = loss_mox_mem_ce(theta, theta_ref, batch, cfg, spec.kl_weight)
    elif v == "MOX_MEM_PO":
        core = loss_mox_mem_po(theta, theta_ref, batch, cfg, spec.beta, spec.kl_weight)
    elif v == "MOX_TARGETED_CE":
        core = loss_targeted(
            theta, theta_ref, batch, cfg, False, spec.beta, spec.kl_weight, spec.target_weight
        )
    elif v == "MOX_TARGETED_PO":
        core = loss_targeted(
            theta, theta_ref, batch, cfg, True, spec.beta, spec.kl_weight, spec.target_weight
        )
    elif v == "WEIGHTED_GD":
        core = loss_weighted(theta, batch, cfg, +1, spec.beta)
    elif v == "WEIGHTED_GA":
        core = loss_weighted(theta, batch, cfg, -1, spec.beta)
    else:  # pragma: no cover - guarded by ObjectiveSpec validation
        raise ConfigError(f"unknown variant {v!r}")
    if spec.retain_ce_weight > 0.0:
        anchor = _mean_pair_nll(theta, batch.retain_pairs, cfg)
        core = ad.add(core, ad.mul(anchor, spec.retain_ce_weight))
    return core
