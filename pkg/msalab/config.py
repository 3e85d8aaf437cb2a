from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Optional, get_args

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from msalab.errors import ConfigError, ParameterError
from msalab.experiments import TrialPlan
from msalab.model import DisorderSpec, InteractionSpec
from msalab.msa import MsaParams
from msalab.settings import resolve_workers

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

ProbeName = Literal[
    "ct-check",
    "wegner",
    "initial",
    "stability",
    "pair",
    "correlator",
    "eigdecay",
    "dynloc",
    "recursion",
    "cover",
    "tensor",
    "pi-green",
    "separability",
]
PROBES: tuple[str, ...] = get_args(ProbeName)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DisorderSection(_Section):
    family: Literal["uniform", "truncated-gaussian", "piecewise-density", "constant"] = "uniform"
    support_bound: float = Field(default=5.0, ge=0.0)
    density_weight_exponent: float = Field(default=0.5, gt=0.0, lt=1.0)
    gaussian_sigma: Optional[float] = Field(default=None, gt=0.0)
    density_weights: list[float] = Field(default_factory=list)
    constant_value: float = 0.0


class InteractionSection(_Section):
    r0: int = Field(default=1, ge=0)
    # Phi(0..r0); empty means Phi == 1 up to r0
    phi: list[float] = Field(default_factory=list)
    h: float = 0.0

    @model_validator(mode="after")
    def _phi_length(self) -> "InteractionSection":
        if self.phi and len(self.phi) != self.r0 + 1:
            raise ValueError(f"phi must list r0 + 1 = {self.r0 + 1} values, got {len(self.phi)}")
        return self


class ModelSection(_Section):
    N: int = Field(ge=1)
    d: int = Field(ge=1)
    n: Optional[int] = Field(default=None, ge=1)
    disorder: DisorderSection = Field(default_factory=DisorderSection)
    interaction: InteractionSection = Field(default_factory=InteractionSection)

    @model_validator(mode="after")
    def _n_within_N(self) -> "ModelSection":
        if self.n is not None and self.n > self.N:
            raise ValueError(f"n={self.n} must not exceed N={self.N}")
        return self


class MsaSection(_Section):
    # None: 1 / (2^{N+1} 12 N d), the largest mass the strict constraints allow
    m: Optional[float] = Field(default=None, gt=0.0)
    p: float = Field(default=2.0, gt=0.0)
    theta: float = Field(default=0.1, gt=0.0, lt=1.0 / 3.0)
    alpha: float = Field(default=1.5, gt=1.0)
    L0: int = Field(default=8, ge=1)
    resonance_exponent: float = Field(default=0.5, gt=0.0)
    beta_prime: float = Field(default=0.5, gt=0.0)
    strict: bool = False


class ProbeSection(_Section):
    name: ProbeName
    trials: int = Field(default=100, ge=1)
    scales: list[int] = Field(default_factory=list)
    L: Optional[int] = Field(default=None, ge=0)
    k: int = Field(default=0, ge=0)
    energies: list[float] = Field(default_factory=list)
    grid_step: Optional[float] = Field(default=None, gt=0.0)
    h_list: list[float] = Field(default_factory=lambda: [0.01, 0.1, 1.0])
    etas: list[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0])
    s: float = Field(default=2.0, ge=0.0)
    distances: list[int] = Field(default_factory=list)
    mu_tilde: Optional[float] = Field(default=None, gt=0.0)
    radius: int = Field(default=60, ge=1)
    pair: bool = False
    check_cnr: bool = True
    cnr_stride: int = Field(default=1, ge=1)
    scan_stride: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _ranges(self) -> "ProbeSection":
        if any(L < 0 for L in self.scales):
            raise ValueError("scales must be nonnegative")
        if any(not 0.0 < e <= 1.0 for e in self.etas):
            raise ValueError("etas must lie in (0, 1]")
        return self


class RunConfig(_Section):
    """Everything a run needs; a snapshot of it is written to every run directory."""

    schema_version: Literal[1] = SCHEMA_VERSION
    model: ModelSection
    msa: MsaSection = Field(default_factory=MsaSection)
    probe: ProbeSection
    out: str = "runs/latest"
    master_seed: int = Field(default=0, ge=0, lt=2 ** 64)
    # 0 means "resolve from MSALAB_WORKERS or the CPU count"
    workers: int = Field(default=0, ge=0)

    @property
    def n(self) -> int:
        return self.model.n if self.model.n is not None else self.model.N

    @property
    def m(self) -> float:
        if self.msa.m is not None:
            return self.msa.m
        return 1.0 / (2 ** (self.model.N + 1) * 12 * self.model.N * self.model.d)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """
        Apply CLI overrides (probe, trials, seed, scales, out, workers, strict)
        and re-validate the whole document.

        Raises:
            ConfigError: the overridden document is invalid
        """
        data = self.model_dump(mode="json")
        mapping = {
            "probe": ("probe", "name"),
            "trials": ("probe", "trials"),
            "scales": ("probe", "scales"),
            "strict": ("msa", "strict"),
            "seed": ("master_seed",),
            "out": ("out",),
            "workers": ("workers",),
        }
        for key, value in overrides.items():
            if value is None:
                continue
            path = mapping[key]
            target = data
            for part in path[:-1]:
                target = target[part]
            target[path[-1]] = list(value) if isinstance(value, tuple) else value
        return parse_config(data)


# =========================
# Loading
# =========================

def _field_path(loc: tuple) -> str:
    return ".".join(str(part) for part in loc)


def parse_config(data: Any) -> RunConfig:
    """
    Raises:
        ConfigError: schema violation, reported with the dotted field path
    """
    if not isinstance(data, dict):
        raise ConfigError("Run configuration must be a mapping at the top level")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        path = _field_path(first["loc"]) or "<root>"
        raise ConfigError(first["msg"], field_path=path) from exc


def load_config(path: str | Path) -> RunConfig:
    """
    Read and validate a YAML run configuration.

    Raises:
        ConfigError: unreadable file, YAML syntax error (line/column) or schema violation
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        line = mark.line + 1 if mark is not None else None
        column = mark.column + 1 if mark is not None else None
        raise ConfigError(exc.problem or "YAML syntax error", line=line, column=column) from exc
    config = parse_config(data)
    logger.info("Loaded config: path=%s probe=%s", path, config.probe.name)
    return config


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False, default_flow_style=None)


# =========================
# Domain objects
# =========================

def disorder_spec(config: RunConfig) -> DisorderSpec:
    section = config.model.disorder
    return DisorderSpec(
        family=section.family,
        support_bound=section.support_bound,
        density_weight_exponent=section.density_weight_exponent,
        master_seed=config.master_seed,
        gaussian_sigma=section.gaussian_sigma,
        density_weights=tuple(section.density_weights),
        constant_value=section.constant_value,
    )


def interaction_spec(config: RunConfig) -> InteractionSpec:
    section = config.model.interaction
    if not section.phi:
        return InteractionSpec.step(r0=section.r0, h=section.h)
    return InteractionSpec(phi=tuple(section.phi), r0=section.r0, h=section.h)


def msa_params(config: RunConfig, enforce_strict: Optional[bool] = None) -> MsaParams:
    section = config.msa
    return MsaParams(
        N=config.model.N,
        d=config.model.d,
        n=config.n,
        m=config.m,
        p=section.p,
        theta=section.theta,
        alpha=section.alpha,
        L0=section.L0,
        resonance_exponent=section.resonance_exponent,
        beta_prime=section.beta_prime,
        enforce_strict=section.strict if enforce_strict is None else enforce_strict,
    )


def build_plan(config: RunConfig, cap: Optional[int] = None) -> TrialPlan:
    """
    Raises:
        ConfigError: the sections are individually valid but inconsistent
            (strict mode violations, disorder family without its parameters)
    """
    try:
        return TrialPlan(
            trials=config.probe.trials,
            disorder=disorder_spec(config),
            interaction=interaction_spec(config),
            params=msa_params(config),
            energies=tuple(config.probe.energies),
            energy_step=config.probe.grid_step,
            workers=resolve_workers(config.workers),
            cnr_stride=config.probe.cnr_stride,
            scan_stride=config.probe.scan_stride,
            cap=cap,
        )
    except ParameterError as exc:
        field_path = "msa" if config.msa.strict else "model"
        raise ConfigError(str(exc), field_path=field_path) from exc


# =========================
# Validation report
# =========================

@dataclass(frozen=True)
class ValidationReport:
    mode: Literal["strict", "desk"]
    violations: tuple[str, ...]
    strict_p_min: float
    strict_m_max: float

    def lines(self) -> list[str]:
        out = [f"mode: {self.mode}", f"strict p > {self.strict_p_min:.6g}", f"strict m <= {self.strict_m_max:.6g}"]
        out += [f"violation: {v}" for v in self.violations]
        return out


def validate_config(config: RunConfig) -> ValidationReport:
    """Which mode the configuration satisfies: strict when every strict constraint holds."""
    params = msa_params(config, enforce_strict=False)
    violations = tuple(params.strict_violations())
    return ValidationReport(
        mode="desk" if violations else "strict",
        violations=violations,
        strict_p_min=params.strict_p_min,
        strict_m_max=params.strict_m_max,
    )
