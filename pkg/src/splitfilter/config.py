"""Experiment configuration: flat ``key = value`` text files and presets.

Lists are comma separated, booleans are ``true``/``false``, ``#`` starts a
comment. Unknown keys are rejected with the offending line number.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from .domain import Box
from .model import (
    BenesModelParams, ConfigurationError, FilterModel, LinearModelParams,
    make_benes_model, make_linear_model,
)
from .nn import NetworkArchitecture
from .optim import LrSchedule
from .training import TrainingConfig


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "custom"
    model: str = "linear"
    # linear family
    M: float = -1.0
    eta: float = 0.0
    Sigma: float = 0.1
    H: float = 90.0
    gamma: float = 0.0
    # Benes family
    alpha: float = 3.0
    beta: float = 0.0
    sigma: float = 0.5
    h1: float = 3.0
    h2: float = 0.0
    # signal / observation start
    x0: float = 0.0
    y0: float = 0.0
    domain_low: float = -0.5
    domain_high: float = 0.5
    steps: int = 60
    dt: float = 0.01
    substeps: int = 10
    obs_substeps: int = 10
    init_mean: float = 0.0
    init_std: float = 0.01
    # network and training
    hidden_widths: tuple[int, ...] = (51, 51)
    final_batchnorm: bool = True
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5
    epochs: int = 6002
    batch_size: int = 600
    penalty_lambda: float = 1.0
    penalty_sign: str = "intent"
    lr_rates: tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    lr_cutoffs: tuple[int, ...] = (0, 2000, 4000)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # correction step
    normalizer_samples: int = 100_000
    normalizer_mode: str = "prefactor"
    # Monte-Carlo reference used for L2 monitoring (0 disables it)
    reference_paths: int = 1000
    reference_points: int = 201
    reference_sampling: str = "uniform"
    checkpoint_every: int = 200
    # oracles and output
    oracle_dx: float = 1e-3
    kalman_substeps: int = 100
    export_points: int = 2001
    seed: int = 7
    on_error: str = "abort"
    min_acceptance: float = 0.5
    flag_acceptance: float = 0.9
    out_dir: str = "runs/custom"

    def __post_init__(self):
        if self.model not in ("linear", "benes"):
            raise ConfigurationError(f"model must be 'linear' or 'benes', got {self.model!r}")
        if not self.domain_low < self.domain_high:
            raise ConfigurationError("domain_low must be < domain_high")
        if self.steps < 1 or self.substeps < 1 or self.obs_substeps < 1:
            raise ConfigurationError("steps and substeps must be >= 1")
        if self.dt <= 0 or self.init_std <= 0:
            raise ConfigurationError("dt and init_std must be positive")
        if self.normalizer_mode not in ("prefactor", "paper_literal"):
            raise ConfigurationError(f"unknown normalizer_mode {self.normalizer_mode!r}")
        if self.penalty_sign not in ("intent", "paper_literal"):
            raise ConfigurationError(f"unknown penalty_sign {self.penalty_sign!r}")
        if self.on_error not in ("abort", "continue"):
            raise ConfigurationError(f"on_error must be 'abort' or 'continue'")
        if self.reference_sampling not in ("uniform", "sobol"):
            raise ConfigurationError(f"unknown reference_sampling {self.reference_sampling!r}")
        try:
            LrSchedule(self.lr_cutoffs, self.lr_rates)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc

    # -- derived objects -------------------------------------------------
    @property
    def domain(self) -> Box:
        return Box.interval(self.domain_low, self.domain_high)

    def linear_params(self) -> LinearModelParams:
        return LinearModelParams.scalar(self.M, self.eta, self.Sigma, self.H, self.gamma)

    def benes_params(self) -> BenesModelParams:
        return BenesModelParams(self.alpha, self.beta, self.sigma, self.h1, self.h2)

    def build_model(self) -> FilterModel:
        if self.model == "linear":
            return make_linear_model(self.linear_params())
        return make_benes_model(self.benes_params())

    def training(self) -> TrainingConfig:
        arch = NetworkArchitecture(
            input_dim=1, hidden_widths=self.hidden_widths, output_dim=1,
            final_bn=self.final_batchnorm, bn_momentum=self.bn_momentum,
            bn_epsilon=self.bn_epsilon,
        )
        return TrainingConfig(
            arch=arch, epochs=self.epochs, batch_size=self.batch_size,
            substeps=self.substeps, penalty=self.penalty_lambda,
            penalty_sign=self.penalty_sign,
            schedule=LrSchedule(self.lr_cutoffs, self.lr_rates),
            adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps, checkpoint_every=self.checkpoint_every,
        )

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def with_budget(self, epochs: int) -> "ExperimentConfig":
        """Change the epoch count and stretch the learning-rate cutoffs with it.

        Keeping the cutoffs fixed would leave a short run at the first rate
        for its whole length, so the cutoffs scale by ``epochs / self.epochs``.
        """
        if epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        ratio = epochs / self.epochs
        cutoffs = tuple(int(round(c * ratio)) for c in self.lr_cutoffs)
        return replace(self, epochs=epochs, lr_cutoffs=cutoffs)


PRESETS: dict[str, ExperimentConfig] = {
    "linear-case1": ExperimentConfig(
        preset="linear-case1", model="linear", M=-1.0, eta=0.0, Sigma=0.1, H=90.0,
        gamma=0.0, domain_low=-0.5, domain_high=0.5, steps=60, dt=0.01,
        out_dir="runs/linear-case1",
    ),
    "linear-case2": ExperimentConfig(
        preset="linear-case2", model="linear", M=1.0, eta=-1.0, Sigma=0.1, H=90.0,
        gamma=0.0, domain_low=-0.8, domain_high=0.4, steps=60, dt=0.01,
        # the run documents the degradation once the signal leaves the domain
        on_error="continue", out_dir="runs/linear-case2",
    ),
    "benes": ExperimentConfig(
        preset="benes", model="benes", alpha=3.0, beta=0.0, sigma=0.5, h1=3.0, h2=0.0,
        domain_low=-4.0, domain_high=4.0, steps=12, dt=0.1, substeps=20,
        obs_substeps=100, oracle_dx=0.004, out_dir="runs/benes",
    ),
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None


# -- text format ------------------------------------------------------------

_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _kind(name: str) -> str:
    t = str(_FIELDS[name].type)
    if t.startswith("tuple[int"):
        return "ints"
    if t.startswith("tuple[float"):
        return "floats"
    return t


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(kind: str, raw: str):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return low == "true"
    if kind == "ints":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if kind == "floats":
        return tuple(float(v) for v in raw.split(",") if v.strip())
    return raw


def dumps(cfg: ExperimentConfig) -> str:
    lines = ["# splitfilter experiment config"]
    for name in _FIELDS:
        lines.append(f"{name} = {_format(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse a config; a ``preset`` key (if present) supplies the defaults."""
    values: dict[str, Any] = {}
    seen_line: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen_line:
            raise ConfigurationError(
                f"{source}:{lineno}: duplicate key {key!r} (first on line {seen_line[key]})")
        try:
            values[key] = _parse_value(_kind(key), raw)
        except ValueError as exc:
            raise ConfigurationError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        seen_line[key] = lineno
    base = PRESETS.get(values.get("preset", ""), ExperimentConfig())
    try:
        return replace(base, **values)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{source}: {exc}") from None


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text(), str(path))


def dump(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
