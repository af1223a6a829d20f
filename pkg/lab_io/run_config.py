"""
Run Configuration.
==================

YAML run files validated into a pydantic schema. Unknown keys are rejected
and every failure is reported with its dotted key path.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from viscosity_lab.continuation import TruncationPolicy, geometric_schedule
from viscosity_lab.correlation_lab import LangevinConfig, Observable, fourier_mode, trig_observable
from viscosity_lab.eigensolver import DEFAULT_DENSE_LIMIT, Window
from viscosity_lab.exceptions import ArgumentError, ConfigError
from viscosity_lab.generator_assembly import FourierTruncation
from viscosity_lab.phase_models import (
    BUILTIN_FIELDS,
    BUILTIN_MAPS,
    FlowField,
    MapSystem,
    builtin_field,
    cat_map,
    trig_field,
)

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "VISCOSITY_LAB_OUT"

# (k, cos coefficient, sin coefficient)
TermTriple = Tuple[List[int], float, float]
ComplexPair = Tuple[float, float]


class LabModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class InlineField(LabModel):
    """Torus field given as per-component (k, a, b) triples."""

    name: str = "inline_field"
    components: List[List[TermTriple]] = Field(min_length=1)

    @model_validator(mode="after")
    def _modes_match_dimension(self) -> "InlineField":
        dimension = len(self.components)
        for component in self.components:
            for k, _, _ in component:
                if len(k) != dimension:
                    raise ValueError(f"mode {k} does not match dimension {dimension}")
        return self


class InlineMap(LabModel):
    matrix: List[List[int]] = [[2, 1], [1, 1]]
    delta: float = 0.0


class SystemConfig(LabModel):
    """Exactly one of a built-in name, an inline field or an inline map."""

    builtin: Optional[str] = None
    params: Dict[str, float] = Field(default_factory=dict)
    field: Optional[InlineField] = None
    map: Optional[InlineMap] = None

    @model_validator(mode="after")
    def _one_source(self) -> "SystemConfig":
        given = [k for k in ("builtin", "field", "map") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError(f"exactly one of builtin, field, map is required, got {given or 'none'}")
        if self.builtin is not None and self.builtin not in {**BUILTIN_FIELDS, **BUILTIN_MAPS}:
            known = sorted({**BUILTIN_FIELDS, **BUILTIN_MAPS})
            raise ValueError(f"unknown builtin {self.builtin!r}; known: {', '.join(known)}")
        if self.params and self.builtin is None:
            raise ValueError("params only apply to builtin systems")
        return self

    def build(self) -> Union[FlowField, MapSystem]:
        try:
            if self.map is not None:
                return cat_map(self.map.matrix, self.map.delta)
            if self.field is not None:
                return trig_field(self.field.name, self.field.components)
            if self.builtin in BUILTIN_MAPS:
                return BUILTIN_MAPS[self.builtin](**self.params)
            return builtin_field(self.builtin, **self.params)  # type: ignore[arg-type]
        except TypeError as exc:
            raise ConfigError(f"system.params: {exc}") from exc
        except ArgumentError as exc:
            raise ConfigError(f"system: {exc}") from exc


class ScheduleConfig(LabModel):
    """Explicit epsilon values or a geometric schedule."""

    values: Optional[List[float]] = None
    start: float = Field(default=0.2, gt=0)
    ratio: float = Field(default=0.5, gt=0, lt=1)
    points: int = Field(default=6, ge=1)

    @field_validator("values")
    @classmethod
    def _decreasing(cls, values: Optional[List[float]]) -> Optional[List[float]]:
        if values is None:
            return values
        if not values or any(v <= 0 for v in values):
            raise ValueError("values must be a non-empty list of positive epsilons")
        if any(b >= a for a, b in zip(values, values[1:])):
            raise ValueError("values must be strictly decreasing")
        return values

    def epsilons(self) -> List[float]:
        if self.values is not None:
            return list(self.values)
        return geometric_schedule(self.start, self.ratio, self.points)


class TruncationConfig(LabModel):
    cutoff: Optional[int] = Field(default=None, ge=1)
    min_cutoff: int = Field(default=8, ge=1)
    scale: float = Field(default=4.0, gt=0)
    max_size: int = Field(default=DEFAULT_DENSE_LIMIT, ge=1)


class WindowConfig(LabModel):
    re_min: float = -4.5
    re_max: float = 4.5
    im_min: float = -1.0
    im_max: float = 0.1

    @model_validator(mode="after")
    def _ordered(self) -> "WindowConfig":
        if self.re_min > self.re_max or self.im_min > self.im_max:
            raise ValueError("window bounds must satisfy min <= max")
        return self

    def to_window(self) -> Window:
        return Window(self.re_min, self.re_max, self.im_min, self.im_max)


class SolverConfig(LabModel):
    method: Literal["auto", "dense", "arnoldi"] = "auto"
    dense_limit: int = Field(default=DEFAULT_DENSE_LIMIT, ge=1)
    shift: Optional[ComplexPair] = None
    count: int = Field(default=20, ge=1)
    krylov_dim: Optional[int] = Field(default=None, ge=2)
    tol: float = Field(default=1e-10, gt=0)
    residual_tol: float = Field(default=1e-8, gt=0)
    c0_scale: float = Field(default=10.0, gt=0)

    @property
    def shift_value(self) -> Optional[complex]:
        return None if self.shift is None else complex(*self.shift)


class ProjectorConfig(LabModel):
    """Contour around `center`; radius None picks it from the spectrum."""

    center: ComplexPair = (2.0, 0.0)
    radius: Optional[float] = Field(default=None, gt=0)
    nodes: int = Field(default=32, ge=8)
    continuity_epsilon: Optional[float] = Field(default=None, gt=0)
    eigenfunctions: bool = True

    @property
    def center_value(self) -> complex:
        return complex(*self.center)


class ObservableConfig(LabModel):
    """A single Fourier mode or a real trigonometric polynomial."""

    name: Optional[str] = None
    mode: Optional[List[int]] = None
    terms: Optional[List[TermTriple]] = None

    @model_validator(mode="after")
    def _one_form(self) -> "ObservableConfig":
        if (self.mode is None) == (self.terms is None):
            raise ValueError("exactly one of mode, terms is required")
        return self

    def build(self, trunc: FourierTruncation, default_name: str) -> Observable:
        name = self.name or default_name
        try:
            if self.mode is not None:
                return fourier_mode(trunc, self.mode, name)
            return trig_observable(trunc, self.terms or [], name)
        except (ArgumentError, KeyError, IndexError) as exc:
            raise ConfigError(f"observable {name}: {exc}") from exc


class CorrelationConfig(LabModel):
    f: Optional[ObservableConfig] = None
    g: Optional[ObservableConfig] = None
    t_max: float = Field(default=20.0, gt=0)
    t_points: int = Field(default=201, ge=2)
    mean_subtract: bool = False
    expansion_depth: Optional[float] = Field(default=None, gt=0)
    nodes: int = Field(default=64, ge=8)
    koopman_steps: int = Field(default=20, ge=0)

    def times(self) -> List[float]:
        step = self.t_max / (self.t_points - 1)
        return [i * step for i in range(self.t_points)]


class LangevinSection(LabModel):
    paths: int = Field(default=10_000, ge=2)
    dt: float = Field(default=1e-3, gt=0)
    seed: int = Field(default=0, ge=0)
    block_size: int = Field(default=1000, ge=1)
    x0: Optional[List[float]] = None
    times: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0], min_length=1)
    observable: Optional[ObservableConfig] = None
    estimate_bias: bool = False

    def settings(self) -> LangevinConfig:
        return LangevinConfig(self.paths, self.dt, self.seed, self.block_size)


class DiagnosticsConfig(LabModel):
    seeds: int = Field(default=20, ge=1)
    seed: int = Field(default=0, ge=0)
    horizon: float = Field(default=1000.0, gt=0)
    renorm_every: float = Field(default=1.0, gt=0)
    transient: float = Field(default=0.0, ge=0)
    dt: float = Field(default=1e-3, gt=0)
    gamma0: Optional[float] = Field(default=None, gt=0)
    delta: float = Field(default=0.0, ge=0)
    strip_radius: float = Field(default=0.5, ge=0)
    consistency_step: int = Field(default=4, ge=1)
    semiclassical_h: Optional[float] = Field(default=None, gt=0)
    semiclassical_gamma: float = Field(default=0.5, gt=0)


class NoseHooverConfig(LabModel):
    kind: Literal["W", "V"] = "W"
    seeds: int = Field(default=20, ge=1)
    seed_span: Tuple[float, float] = (0.5, 5.0)
    crossings: int = Field(default=600, ge=1)
    dt: float = Field(default=1e-2, gt=0)
    max_time: Optional[float] = Field(default=None, gt=0)
    threshold: float = Field(default=1.5, gt=0)
    epsilon: float = Field(default=0.01, ge=0)
    paired_x0: List[float] = Field(default_factory=lambda: [0.0, 5.0, 0.0])
    paired_horizon: float = Field(default=50.0, gt=0)
    record_every: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)
    svg: bool = True


class MonitoringConfig(LabModel):
    prometheus_textfile: bool = False


class RunConfig(LabModel):
    """Complete description of one run."""

    system: Optional[SystemConfig] = None
    epsilon: float = Field(default=0.1, ge=0)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    truncation: TruncationConfig = Field(default_factory=TruncationConfig)
    window: WindowConfig = Field(default_factory=WindowConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    projector: ProjectorConfig = Field(default_factory=ProjectorConfig)
    correlation: CorrelationConfig = Field(default_factory=CorrelationConfig)
    langevin: LangevinSection = Field(default_factory=LangevinSection)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)
    nosehoover: NoseHooverConfig = Field(default_factory=NoseHooverConfig)
    export_operator: bool = False
    output_dir: str = "results"
    threads: int = Field(default=1, ge=1)
    monitoring: MonitoringConfig = Field(default_factory=MonitoringConfig)

    def build_system(self, command: str) -> Union[FlowField, MapSystem]:
        if self.system is None:
            raise ConfigError(f"system: required for the {command} command")
        return self.system.build()

    def policy(self) -> TruncationPolicy:
        return TruncationPolicy(
            min_cutoff=self.truncation.min_cutoff,
            scale=self.truncation.scale,
            max_size=self.truncation.max_size,
            fixed_cutoff=self.truncation.cutoff,
            method=self.solver.method,
            arnoldi_count=self.solver.count,
            arnoldi_shift=self.solver.shift_value,
        )

    def truncation_for(self, epsilon: float, dimension: int) -> FourierTruncation:
        policy = self.policy()
        if epsilon <= 0 and policy.fixed_cutoff is None:
            raise ConfigError("truncation.cutoff is required when epsilon = 0")
        return FourierTruncation(dimension, policy.cutoff_for(epsilon, dimension))

    def with_overrides(
        self,
        output_dir: Optional[str] = None,
        seed: Optional[int] = None,
        threads: Optional[int] = None,
    ) -> "RunConfig":
        update: Dict[str, Any] = {}
        if output_dir is not None:
            update["output_dir"] = output_dir
        if threads is not None:
            if threads < 1:
                raise ConfigError(f"threads: must be >= 1, got {threads}")
            update["threads"] = threads
        if seed is not None:
            if seed < 0:
                raise ConfigError(f"seed: must be >= 0, got {seed}")
            update["langevin"] = self.langevin.model_copy(update={"seed": seed})
            update["diagnostics"] = self.diagnostics.model_copy(update={"seed": seed})
            update["nosehoover"] = self.nosehoover.model_copy(update={"seed": seed})
        return self.model_copy(update=update)


def format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{location}: {item['msg']}")
    return "; ".join(lines)


def parse_run_config(data: Any, source: str = "<config>") -> RunConfig:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{source}: top level must be a mapping, got {type(data).__name__}")
    try:
        return RunConfig.model_validate(dict(data))
    except ValidationError as exc:
        raise ConfigError(f"{source}: {format_validation_error(exc)}") from exc


def load_run_config(
    path: Union[str, Path], environ: Optional[Mapping[str, str]] = None
) -> RunConfig:
    """Read and validate a YAML run file; VISCOSITY_LAB_OUT overrides output_dir."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Configuration file not found: {path}")
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"{path}{where}: invalid YAML: {exc}") from exc

    config = parse_run_config(data if data is not None else {}, str(path))
    environ = os.environ if environ is None else environ
    if environ.get(OUTPUT_DIR_ENV):
        config = config.with_overrides(output_dir=environ[OUTPUT_DIR_ENV])
    logger.debug(f"Loaded run configuration from {path}")
    return config


HASH_EXCLUDED = {"output_dir", "threads"}


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON form, ignoring output location and thread count."""
    canonical = json.dumps(config.model_dump(mode="json", exclude=HASH_EXCLUDED), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
