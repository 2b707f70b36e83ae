"""Parameter-space extrapolation and direction analysis.

The forget model is the reflection of the memorization model through the
reference, scaled by alpha:

    theta_for = (1 + alpha) * theta_ref - alpha * theta_mem
              = theta_ref + alpha * (theta_ref - theta_mem)

All functions are pure over immutable stores and run in float64; callers
quantize only at checkpoint write.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, DegenerateDirectionError
from .store import ParamStore, axpy, dot, l2_norm, require_congruent, scale


@dataclass(frozen=True)
class ExtrapolationConfig:
    alpha: float = 4.0
    eta: float = 0.675

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 < self.eta <= 1.0:
            raise ConfigError(f"eta must be in (0, 1], got {self.eta}")


def mox_extrapolate(theta_ref: ParamStore, theta_mem: ParamStore, alpha: float) -> ParamStore:
    """(1 + alpha) * theta_ref - alpha * theta_mem, elementwise."""
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    require_congruent(theta_ref, theta_mem)
    return axpy(1.0 + alpha, theta_ref, -alpha, theta_mem)


def task_vector_unlearn(theta_ref: ParamStore, theta_ft_on_forget: ParamStore, alpha: float) -> ParamStore:
    """Task-vector negation baseline.

    Same arithmetic as :func:`mox_extrapolate`; the distinction is the
    provenance of the second argument, which must come from plain CE
    fine-tuning on the forget set alone (no retain regularization).
    """
    return mox_extrapolate(theta_ref, theta_ft_on_forget, alpha)


def momentum_update(theta_cur: ParamStore, theta_prev_ensemble: ParamStore | None, eta: float) -> ParamStore:
    """eta * current + (1 - eta) * running ensemble; identity with no history."""
    if not 0.0 < eta <= 1.0:
        raise ConfigError(f"eta must be in (0, 1], got {eta}")
    if theta_prev_ensemble is None:
        return theta_cur
    require_congruent(theta_cur, theta_prev_ensemble)
    return axpy(eta, theta_cur, 1.0 - eta, theta_prev_ensemble)


def direction_delta(theta: ParamStore, theta_ref: ParamStore) -> ParamStore:
    """(theta - theta_ref) normalized to unit L2 norm over the flat vector."""
    require_congruent(theta, theta_ref)
    diff = axpy(1.0, theta, -1.0, theta_ref)
    norm = l2_norm(diff)
    if norm == 0.0:
        raise DegenerateDirectionError("theta equals theta_ref; no direction")
    return scale(1.0 / norm, diff)


def direction_cosine(d1: ParamStore, d2: ParamStore) -> float:
    """Dot product of unit-norm directions; in [-1, 1]."""
    require_congruent(d1, d2)
    return max(-1.0, min(1.0, dot(d1, d2)))
