"""AdamW training loop with warmup+linear-decay schedule and diagnostics.

One call to :func:`train` runs a full seeded epoch loop for any objective
and returns the final parameters plus a per-step trace (loss, gradient
norm, distance and cosine to the reference, sampled collapse readings).
Non-finite losses or gradients raise :class:`DivergenceError` carrying the
trace collected so far: ascent baselines are expected to blow up and the
partial record is the point.

Epoch convention: CE iterates retain+forget; the reweighted GD/GA pair
iterates the retain set with forget batches cycled; every unlearning
objective iterates the forget set with retain batches cycled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import DatasetSplit, QAPair
from .errors import ConfigError, DivergenceError
from .model import ModelConfig, init_params
from .objectives import Batch, ObjectiveSpec, objective_loss
from .store import GradStore, ParamStore, axpy, dot, l2_norm, require_congruent, zeros_like

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveSpec
    epochs: int = 10
    batch_size: int = 16
    lr_peak: float = 3e-3
    weight_decay: float = 0.01
    warmup_epochs: float = 1.0
    seed: int = 0
    eval_every: int = 0  # sample collapse every N steps; 0 disables
    clip_grad: float = 0.0  # global-norm clip; 0 disables (default: show instability)
    retain_batch_size: int = 0  # retain samples accompanying each forget batch; 0 = batch_size

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_peak <= 0:
            raise ConfigError(f"lr_peak must be > 0, got {self.lr_peak}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear 0 -> lr_peak over the warmup steps, then linear decay to 0.

    The first step uses the post-increment warmup value lr_peak/warmup_steps;
    the final step returns lr_peak/decay_steps (the last value before zero).
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = round(cfg.warmup_epochs * total_steps / cfg.epochs)
    if step < warm:
        return cfg.lr_peak * (step + 1) / warm
    return cfg.lr_peak * (total_steps - step) / max(1, total_steps - warm)


@dataclass
class OptimState:
    m: GradStore
    v: GradStore
    t: int = 0

    @classmethod
    def zero(cls, theta: ParamStore) -> "OptimState":
        return cls(m=zeros_like(theta), v=zeros_like(theta), t=0)


def adamw_step(
    theta: ParamStore,
    grads: GradStore,
    state: OptimState,
    lr: float,
    weight_decay: float,
) -> tuple[ParamStore, OptimState]:
    """Decoupled-weight-decay Adam with bias correction; purely functional."""
    require_congruent(theta, grads, "theta/grads")
    for _, g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient", step=state.t)
    t = state.t + 1
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    new_m, new_v, new_theta = [], [], []
    for (name, p), (_, g), (_, m), (_, v) in zip(theta, grads, state.m, state.v):
        m2 = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v2 = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        update = (m2 / c1) / (np.sqrt(v2 / c2) + ADAM_EPS)
        new_m.append((name, m2))
        new_v.append((name, v2))
        new_theta.append((name, p - lr * update - lr * weight_decay * p))
    return ParamStore(new_theta), OptimState(GradStore(new_m), GradStore(new_v), t)


_TRACE_COLUMNS = (
    "step",
    "epoch",
    "lr",
    "loss",
    "grad_norm",
    "dist_ref",
    "cos_ref",
    "collapse_retain",
    "collapse_forget",
)


@dataclass
class TrainTrace:
    rows: list[dict] = field(default_factory=list)
    diverged_at: int | None = None

    def add(self, **kw) -> None:
        self.rows.append({c: kw.get(c, math.nan) for c in _TRACE_COLUMNS})

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(_TRACE_COLUMNS) + ",diverged\n")
            for r in self.rows:
                vals = [_fmt(r[c]) for c in _TRACE_COLUMNS]
                vals.append("1" if self.diverged_at == r["step"] else "0")
                fh.write(",".join(vals) + "\n")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _cycler(items: Sequence, rng: np.random.Generator):
    """Endless deterministic shuffled stream over items."""
    items = list(items)
    while True:
        for i in rng.permutation(len(items)):
            yield items[i]


def _primary_pairs(spec: ObjectiveSpec, data: DatasetSplit) -> tuple[str, tuple[QAPair, ...]]:
    if spec.variant == "CE":
        return "train", data.all_train()
    if spec.variant in ("WEIGHTED_GD", "WEIGHTED_GA"):
        return "retain", data.retain
    return "forget", data.forget


def train(
    theta0: ParamStore,
    theta_ref: ParamStore | None,
    data: DatasetSplit,
    config: TrainConfig,
    model_cfg: ModelConfig,
    targeted: Sequence[QAPair] | None = None,
    collapse_probe: Callable[[ParamStore], tuple[float, float]] | None = None,
    epoch_hook: Callable[[int, ParamStore], None] | None = None,
) -> tuple[ParamStore, TrainTrace]:
    """Seeded epoch loop; bit-reproducible given (theta0, data, config).

    ``targeted`` must be index-aligned with ``data.forget`` for the targeted
    objectives.  ``collapse_probe``, when given with ``eval_every > 0``, is
    called on the current parameters and must return
    (collapse_on_retain, collapse_on_forget).  ``epoch_hook`` receives the
    parameters after each completed epoch (momentum ensembling, per-epoch
    trajectories) and must not mutate them.
    """
    spec = config.objective
    if spec.needs_reference and theta_ref is None:
        raise ConfigError(f"objective {spec.variant} requires a reference model")
    if spec.variant in ("MOX_TARGETED_CE", "MOX_TARGETED_PO") and targeted is None:
        raise ConfigError("targeted objectives need aligned targeted pairs")
    role, primary = _primary_pairs(spec, data)
    if not primary:
        raise ConfigError(f"objective {spec.variant} has no {role} pairs to iterate")

    anchor = theta_ref if theta_ref is not None else theta0
    rng = np.random.default_rng(config.seed)
    retain_stream = _cycler(data.retain, rng) if data.retain else None
    forget_stream = _cycler(data.forget, rng) if data.forget else None
    bs = config.batch_size
    steps_per_epoch = math.ceil(len(primary) / bs)
    total_steps = steps_per_epoch * config.epochs

    theta = theta0
    state = OptimState.zero(theta0)
    trace = TrainTrace()
    anchor_norm = l2_norm(anchor)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(primary))
        for chunk_start in range(0, len(primary), bs):
            chunk = [primary[i] for i in order[chunk_start : chunk_start + bs]]
            retain_bs = config.retain_batch_size or bs
            batch = _assemble_batch(
                spec, role, chunk, order[chunk_start : chunk_start + bs],
                retain_stream, forget_stream, targeted, bs, retain_bs
            )
            lr = lr_at(step, total_steps, config)
            leaves = ad.param_nodes(theta)
            loss = objective_loss(spec, leaves, theta_ref, batch, model_cfg)
            loss_val = float(ad.val(loss))
            grads = ad.backward(loss, leaves)
            grad_norm = l2_norm(grads)
            diff = axpy(1.0, theta, -1.0, anchor)
            denom = l2_norm(theta) * anchor_norm
            row = dict(
                step=step,
                epoch=epoch,
                lr=lr,
                loss=loss_val,
                grad_norm=grad_norm,
                dist_ref=l2_norm(diff),
                cos_ref=dot(theta, anchor) / denom if denom > 0 else math.nan,
            )
            if collapse_probe is not None and config.eval_every > 0 and step % config.eval_every == 0:
                row["collapse_retain"], row["collapse_forget"] = collapse_probe(theta)
            trace.add(**row)
            if not math.isfinite(loss_val) or not math.isfinite(grad_norm):
                trace.diverged_at = step
                raise DivergenceError("non-finite loss or gradient", step, theta, trace)
            if config.clip_grad > 0.0 and grad_norm > config.clip_grad:
                grads = grads.map(lambda g: g * (config.clip_grad / grad_norm))
            theta, state = adamw_step(theta, grads, state, lr, config.weight_decay)
            step += 1
        if epoch_hook is not None:
            epoch_hook(epoch, theta)
    return theta, trace


def _assemble_batch(
    spec: ObjectiveSpec,
    role: str,
    chunk: list[QAPair],
    chunk_idx,
    retain_stream,
    forget_stream,
    targeted,
    bs: int,
    retain_bs: int,
) -> Batch:
    if role == "train":  # plain CE over whatever is supplied
        return Batch(retain_pairs=tuple(chunk))
    if role == "retain":  # reweighted GD/GA: retain chunk + cycled forget
        forget = tuple(next(forget_stream) for _ in range(min(bs, len(chunk))))
        return Batch(retain_pairs=tuple(chunk), forget_pairs=forget)
    # unlearning objectives iterate the forget set
    retain = ()
    if retain_stream is not None:
        retain = tuple(next(retain_stream) for _ in range(retain_bs))
    tgt = ()
    if targeted is not None:
        tgt = tuple(targeted[i] for i in chunk_idx)
    return Batch(retain_pairs=retain, forget_pairs=tuple(chunk), targeted_pairs=tgt)


def finetune_reference(
    model_cfg: ModelConfig, config: TrainConfig, data: DatasetSplit
) -> tuple[ParamStore, TrainTrace]:
    """CE training from seeded init on retain + forget: the reference model."""
    config = replace(config, objective=ObjectiveSpec("CE"))
    return train(init_params(model_cfg), None, data, config, model_cfg)


def retrain_oracle(
    model_cfg: ModelConfig, config: TrainConfig, data: DatasetSplit
) -> tuple[ParamStore, TrainTrace]:
    """CE training from the *same* init seed on the retain set only.

    The gold standard for forget-quality comparisons; forget pairs are
    excluded by construction of the training split.
    """
    config = replace(config, objective=ObjectiveSpec("CE"))
    retain_only = DatasetSplit(
        retain=data.retain, forget=(), heldout_world=data.heldout_world,
        forget_ratio=data.forget_ratio,
    )
    return train(init_params(model_cfg), None, retain_only, config, model_cfg)


# -- plain gradient descent (monotone-descent verification) ----------------


def gd_ce_losses(
    theta: ParamStore,
    pairs: Sequence[QAPair],
    lr: float,
    steps: int,
    model_cfg: ModelConfig,
) -> tuple[ParamStore, list[float]]:
    """Full-batch constant-lr GD on CE; returns final theta and per-step losses.

    The recorded series has steps+1 entries (loss before each update plus
    the final loss).
    """
    batch = Batch(retain_pairs=tuple(pairs))
    losses = []
    for _ in range(steps):
        leaves = ad.param_nodes(theta)
        loss = objective_loss(ObjectiveSpec("CE"), leaves, None, batch, model_cfg)
        losses.append(float(ad.val(loss)))
        grads = ad.backward(loss, leaves)
        theta = ParamStore((n, p - lr * g) for (n, p), (_, g) in zip(theta, grads))
    final = objective_loss(ObjectiveSpec("CE"), theta.as_dict(), None, batch, model_cfg)
    losses.append(float(final))
    return theta, losses


def find_monotone_lr(
    theta: ParamStore,
    pairs: Sequence[QAPair],
    lr0: float,
    steps: int,
    model_cfg: ModelConfig,
    tol: float = 1e-6,
    max_halvings: int = 20,
) -> tuple[float, ParamStore, list[float]]:
    """Halve the GD learning rate until the loss is per-step non-increasing."""
    lr = lr0
    for _ in range(max_halvings + 1):
        final_theta, losses = gd_ce_losses(theta, pairs, lr, steps, model_cfg)
        diffs = np.diff(losses)
        if np.all(diffs <= tol):
            return lr, final_theta, losses
        lr *= 0.5
    raise DivergenceError("no monotone learning rate found", step=steps)
