"""Experiment configuration: one flat key=value document drives everything.

``parse_config_text`` reads lines of the form ``key = value`` (``#``
comments allowed); every key has a default and can also be overridden from
the command line.  Environment variables are never consulted.  The config
hash is the sha256 of the canonical rendering, so identical settings hash
identically across platforms.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import VOCAB_SIZE
from .errors import ConfigError
from .model import ModelConfig
from .objectives import ObjectiveSpec
from .trainer import TrainConfig

SCENARIOS = (
    "finetune",
    "unlearn_baselines",
    "mox_alpha_sweep",
    "eta_sweep",
    "ablation",
    "stability_weight_sweep",
    "forget_size_sweep",
    "direction_analysis",
    "trajectory",
    "continual",
    "relearn",
    "overlap",
    "motivation_fig1",
)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "finetune"
    seed: int = 0
    seeds: tuple[int, ...] = ()  # empty means (seed,)
    # data
    n_entities: int = 50
    attrs_per_entity: int = 4
    heldout_entities: int = 5
    forget_ratio: float = 0.10
    # model (vocabulary size is fixed by the corpus grammar)
    ctx_len: int = 48
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    # training
    finetune_epochs: int = 40
    epochs: int = 10
    batch_size: int = 16
    lr_peak: float = 3e-3
    unlearn_lr: float = 0.0  # 0 = same as lr_peak
    weight_decay: float = 0.01
    warmup_epochs: float = 1.0
    eval_every: int = 0
    # objective
    beta: float = 0.1
    kl_weight: float = 1.0
    target_weight: float = 1.0
    target_text: str = "i don't know the answer"
    # extrapolation / sweeps
    alpha: float = 4.0
    alpha_grid: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0)
    eta: float = 0.675
    eta_grid: tuple[float, ...] = (0.5, 0.6, 0.675, 0.8, 0.9)
    weight_grid: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0)
    ratio_grid: tuple[float, ...] = (0.01, 0.05, 0.10)
    fig1_beta_grid: tuple[float, ...] = (1.0, 2.0, 4.0)
    relearn_epochs: int = 3
    continual_epochs: int = 3
    out_dir: str = "runs"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(
                f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}"
            )
        if not 0.0 < self.forget_ratio < 1.0:
            raise ConfigError(f"forget_ratio must be in (0, 1), got {self.forget_ratio}")

    # -- derived views -----------------------------------------------------

    def seed_list(self) -> tuple[int, ...]:
        return self.seeds if self.seeds else (self.seed,)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=VOCAB_SIZE,
            ctx_len=self.ctx_len,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            seed=self.seed + 2,  # init stream distinct from data/shuffle streams
        )

    def finetune_config(self) -> TrainConfig:
        return TrainConfig(
            objective=ObjectiveSpec("CE"),
            epochs=self.finetune_epochs,
            batch_size=self.batch_size,
            lr_peak=self.lr_peak,
            weight_decay=self.weight_decay,
            warmup_epochs=self.warmup_epochs,
            seed=self.seed + 3,
            eval_every=self.eval_every,
        )

    def unlearn_config(self, objective: ObjectiveSpec, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            objective=objective,
            epochs=self.epochs if epochs is None else epochs,
            batch_size=self.batch_size,
            lr_peak=self.unlearn_lr if self.unlearn_lr > 0 else self.lr_peak,
            weight_decay=self.weight_decay,
            warmup_epochs=min(self.warmup_epochs, (self.epochs if epochs is None else epochs) - 0.5),
            seed=self.seed + 4,
            eval_every=self.eval_every,
        )

    def objective(self, variant: str, **kw) -> ObjectiveSpec:
        base = dict(
            beta=self.beta,
            kl_weight=self.kl_weight,
            target_weight=self.target_weight,
        )
        base.update(kw)
        return ObjectiveSpec(variant, **base)

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(_render(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        return replace(self, **_coerce_all(overrides))


def _render(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _coerce(name: str, text: str):
    ftypes = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in ftypes:
        raise ConfigError(f"unknown config key {name!r}")
    ftype = ftypes[name]
    text = text.strip()
    try:
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        if ftype.startswith("tuple[int"):
            return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()
        if ftype.startswith("tuple[float"):
            return tuple(float(t) for t in text.split(",") if t.strip()) if text else ()
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r} ({exc})") from None


def _coerce_all(overrides: dict[str, str]) -> dict:
    return {k: v if not isinstance(v, str) else _coerce(k, v) for k, v in overrides.items()}


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    overrides: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        overrides[key.strip()] = value.strip()
    return cfg.with_overrides(overrides)


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)
