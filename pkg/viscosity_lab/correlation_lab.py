"""
Correlation Lab.

Evolves observables under e^{-itP_eps}, builds correlation traces, rebuilds
them from resonance expansions and cross-checks against Langevin
Monte-Carlo sampling of the stochastic flow.

Pairings are bilinear: <f, g> = sum_k f_k g_{-k}, no complex conjugation.
"""

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.linalg import expm
from scipy.sparse.linalg import expm_multiply

from .eigensolver import ResonanceSet, one_norm
from .exceptions import ArgumentError, PreconditionError
from .generator_assembly import (
    FourierTruncation,
    OperatorKind,
    OperatorMatrix,
    assemble_flow_generator,
)
from .phase_models import TWO_PI, FlowField
from .projectors import EigenfunctionSet, auto_radius, contour_projector, eigenfunctions

logger = logging.getLogger(__name__)

Evaluator = Callable[[np.ndarray], np.ndarray]


class TraceSource(Enum):
    SEMIGROUP = "semigroup"
    EXPANSION = "expansion"
    MONTE_CARLO = "monte_carlo"
    KOOPMAN = "koopman"


@dataclass(frozen=True, eq=False)
class Observable:
    """
    A function on the torus, as Fourier coefficients over a truncation
    and/or a closed-form evaluator for Monte-Carlo sampling.
    """

    name: str
    coefficients: Optional[np.ndarray] = None
    truncation: Optional[FourierTruncation] = None
    evaluator: Optional[Evaluator] = None

    def __post_init__(self) -> None:
        if self.coefficients is None and self.evaluator is None:
            raise ArgumentError(f"Observable {self.name} has neither coefficients nor evaluator")
        if self.coefficients is not None:
            if self.truncation is None or self.coefficients.shape != (self.truncation.size,):
                raise ArgumentError(f"Observable {self.name}: coefficients do not match truncation")

    def require_coefficients(self) -> np.ndarray:
        if self.coefficients is None:
            raise ArgumentError(f"Observable {self.name} has no Fourier coefficients")
        return self.coefficients

    def is_real(self, tol: float = 1e-14) -> bool:
        """Hermitian symmetry c_{-k} = conj(c_k)."""
        c = self.require_coefficients()
        reflected = c[self.truncation.reflection()]  # type: ignore[union-attr]
        return bool(np.max(np.abs(reflected - np.conj(c)), initial=0.0) <= tol)

    @property
    def mean(self) -> complex:
        c = self.require_coefficients()
        return complex(c[self.truncation.index([0] * self.truncation.dimension)])  # type: ignore[union-attr]

    def reflected(self) -> np.ndarray:
        """Coefficients indexed by -k."""
        return self.require_coefficients()[self.truncation.reflection()]  # type: ignore[union-attr]

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        x = np.asarray(points, dtype=float)
        if self.evaluator is not None:
            return np.asarray(self.evaluator(x))
        c = self.require_coefficients()
        phases = np.exp(1j * (x @ self.truncation.modes.T.astype(float)))  # type: ignore[union-attr]
        return phases @ c

    def with_coefficients(self, coefficients: np.ndarray, name: Optional[str] = None) -> "Observable":
        return Observable(name or self.name, np.asarray(coefficients, dtype=complex), self.truncation)


def pairing(f: np.ndarray, g: Observable) -> complex:
    """sum_k f_k g_{-k}."""
    return complex(np.asarray(f) @ g.reflected())


def fourier_mode(trunc: FourierTruncation, k: Sequence[int], name: Optional[str] = None) -> Observable:
    """e^{ik.x}."""
    coeffs = np.zeros(trunc.size, dtype=complex)
    coeffs[trunc.index(k)] = 1.0
    wave = np.asarray(k, dtype=float)
    return Observable(
        name or f"mode{tuple(k)}",
        coeffs,
        trunc,
        lambda x: np.exp(1j * (np.asarray(x) @ wave)),
    )


def trig_observable(
    trunc: FourierTruncation,
    terms: Sequence[Sequence[Any]],
    name: str = "observable",
) -> Observable:
    """Real observable sum a cos(k.x) + b sin(k.x) from (k, a, b) triples."""
    coeffs = np.zeros(trunc.size, dtype=complex)
    waves = []
    for k, a, b in terms:
        k = tuple(int(v) for v in k)
        if len(k) != trunc.dimension:
            raise ArgumentError(f"Mode {k} does not match dimension {trunc.dimension}")
        waves.append((np.asarray(k, dtype=float), float(a), float(b)))
        if not any(k):
            coeffs[trunc.index(k)] += a
            continue
        coeffs[trunc.index(k)] += 0.5 * (a - 1j * b)
        coeffs[trunc.index(tuple(-v for v in k))] += 0.5 * (a + 1j * b)

    def evaluator(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        total = np.zeros(x.shape[:-1])
        for wave, a, b in waves:
            phase = x @ wave
            total = total + a * np.cos(phase) + b * np.sin(phase)
        return total

    return Observable(name, coeffs, trunc, evaluator)


@dataclass
class CorrelationTrace:
    """Correlation values on a strictly increasing time grid."""

    times: np.ndarray
    values: np.ndarray
    source: TraceSource
    stderr_re: Optional[np.ndarray] = None
    stderr_im: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=complex)
        if self.times.shape != self.values.shape:
            raise ArgumentError("Trace times and values differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ArgumentError("Trace times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ArgumentError("Trace values must be finite")


def _check_times(times: Sequence[float]) -> np.ndarray:
    grid = np.asarray(times, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ArgumentError("Time grid must be a non-empty 1-d sequence")
    if np.any(grid < 0):
        raise ArgumentError("Negative times run the anti-damped direction and are rejected")
    if np.any(np.diff(grid) <= 0):
        raise ArgumentError("Time grid must be strictly increasing")
    return grid


def _check_flow(op: OperatorMatrix, f: Observable) -> np.ndarray:
    if op.kind != OperatorKind.FLOW_GENERATOR:
        raise ArgumentError("evolve needs a flow generator")
    c = f.require_coefficients()
    if c.shape != (op.size,):
        raise ArgumentError(f"Observable of size {c.size} does not match operator size {op.size}")
    return c


def evolve(op: OperatorMatrix, f: Observable, t: float) -> Observable:
    """exp(-itM) applied to the coefficient vector of f."""
    if t < 0:
        raise ArgumentError(f"t = {t} < 0: backward evolution of the damped semigroup is rejected")
    c = _check_flow(op, f)
    if t == 0:
        return f.with_coefficients(c.copy(), f"{f.name}(t=0)")
    if op.is_sparse:
        evolved = expm_multiply(-1j * t * op.csr(), c)
    else:
        evolved = expm(-1j * t * op.dense()) @ c
    return f.with_coefficients(evolved, f"{f.name}(t={t:g})")


def evolve_series(op: OperatorMatrix, f: Observable, times: Sequence[float]) -> np.ndarray:
    """Coefficient vectors at every time, shape (len(times), size)."""
    grid = _check_times(times)
    c = _check_flow(op, f)
    steps = np.diff(grid)
    uniform = steps.size > 0 and np.allclose(steps, steps[0], rtol=1e-12, atol=0.0)

    out = np.empty((grid.size, c.size), dtype=complex)
    if uniform and op.is_sparse:
        start = expm_multiply(-1j * grid[0] * op.csr(), c) if grid[0] > 0 else c
        out[:] = expm_multiply(
            -1j * op.csr(), start, start=0.0, stop=grid[-1] - grid[0], num=grid.size, endpoint=True
        )
    elif uniform:
        propagator = expm(-1j * steps[0] * op.dense())
        out[0] = evolve(op, f, grid[0]).coefficients
        for i in range(1, grid.size):
            out[i] = propagator @ out[i - 1]
    else:
        for i, t in enumerate(grid):
            out[i] = evolve(op, f, t).coefficients
    return out


def correlation(
    op: OperatorMatrix,
    f: Observable,
    g: Observable,
    times: Sequence[float],
    mean_subtract: bool = False,
) -> CorrelationTrace:
    """C(t) = sum_k (e^{-itM} f)_k g_{-k}, minus F_0(t) g_0 if mean_subtract."""
    if g.coefficients is None or g.coefficients.shape != (op.size,):
        raise ArgumentError("Observables must share the operator's truncation")
    grid = _check_times(times)
    series = evolve_series(op, f, grid)
    values = series @ g.reflected()
    if mean_subtract:
        zero = op.truncation.index([0] * op.truncation.dimension)
        values = values - series[:, zero] * g.coefficients[zero]
    return CorrelationTrace(
        grid,
        values,
        TraceSource.SEMIGROUP,
        metadata={"epsilon": op.epsilon, "K": op.truncation.cutoff, "f": f.name, "g": g.name},
    )


def koopman_correlation(
    op: OperatorMatrix,
    f: Observable,
    g: Observable,
    steps: int,
    mean_subtract: bool = False,
) -> CorrelationTrace:
    """Discrete-time analog C(n) = sum_k (K^n f)_k g_{-k}, n = 0..steps."""
    if op.kind != OperatorKind.NOISY_KOOPMAN:
        raise ArgumentError("koopman_correlation needs a noisy Koopman operator")
    if steps < 0:
        raise ArgumentError(f"steps must be >= 0, got {steps}")
    current = f.require_coefficients().astype(complex)
    if current.shape != (op.size,) or g.coefficients is None:
        raise ArgumentError("Observables must share the operator's truncation")
    zero = op.truncation.index([0, 0])
    values = []
    for _ in range(steps + 1):
        value = current @ g.reflected()
        if mean_subtract:
            value -= current[zero] * g.coefficients[zero]
        values.append(value)
        current = np.asarray(op.entries @ current).ravel()
    return CorrelationTrace(
        np.arange(steps + 1, dtype=float),
        np.asarray(values),
        TraceSource.KOOPMAN,
        metadata={"epsilon": op.epsilon, "K": op.truncation.cutoff},
    )


def collect_eigendata(
    op: OperatorMatrix,
    spectrum: ResonanceSet,
    depth: float,
    nodes: int = 64,
    executor: Optional[Executor] = None,
) -> List[EigenfunctionSet]:
    """Projector and eigenfunctions for every eigenvalue group with Im > -depth."""
    scale = one_norm(op.entries)
    tol = 1e-8 * scale
    selected = [z for z in spectrum.eigenvalues if z.imag > -depth]
    centers: List[complex] = []
    for z in selected:
        if all(abs(z - c) > tol for c in centers):
            centers.append(complex(z))

    def group(center: complex) -> EigenfunctionSet:
        radius = auto_radius(spectrum.eigenvalues, center, group_tol=tol)
        projector = contour_projector(op, center, radius, nodes, resonances=spectrum)
        return eigenfunctions(op, projector)

    mapper = executor.map if executor is not None else map
    sets = list(mapper(group, centers))
    logger.info(f"Collected eigendata for {len(sets)} groups with Im > -{depth}")
    return sets


@dataclass
class ExpansionReport:
    """Tail comparison |C - C_exp| ~ prefactor e^{-rate t}."""

    prefactor: float
    decay_rate: float
    max_difference: float
    terms: int
    excluded_defective: int


def expansion_reconstruct(
    spectrum: ResonanceSet,
    eigendata: Sequence[EigenfunctionSet],
    f: Observable,
    g: Observable,
    times: Sequence[float],
    depth: float,
    reference: Optional[CorrelationTrace] = None,
    match_tol: float = 1e-8,
):
    """
    C_exp(t) = sum_j e^{-it lambda_j} (v_j^T f)(sum_k u_{j,k} g_{-k}) over
    semisimple groups with Im lambda > -depth.

    Returns the trace and, when a reference trace is given, the tail report.
    """
    grid = _check_times(times)
    fc = f.require_coefficients()
    gr = g.reflected()

    wanted = [z for z in spectrum.eigenvalues if z.imag > -depth]
    have = np.concatenate([s.eigenvalues for s in eigendata]) if eigendata else np.zeros(0)
    scale = max(1.0, float(np.max(np.abs(spectrum.eigenvalues), initial=0.0)))
    missing = [z for z in wanted if not np.any(np.abs(have - z) <= match_tol * scale)]
    if missing:
        listed = ", ".join(f"{z:.6g}" for z in missing[:10])
        raise PreconditionError(f"Missing eigendata for {len(missing)} eigenvalues: {listed}")

    values = np.zeros(grid.size, dtype=complex)
    terms = excluded = 0
    for group in eigendata:
        if group.defective:
            excluded += 1
            logger.warning(
                f"Defective group near {group.eigenvalues.mean():.6g} excluded from expansion"
            )
            continue
        for j, lam in enumerate(group.eigenvalues):
            if lam.imag <= -depth:
                continue
            weight = (group.left[:, j] @ fc) * (group.right[:, j] @ gr)
            values += np.exp(-1j * grid * lam) * weight
            terms += 1

    trace = CorrelationTrace(
        grid,
        values,
        TraceSource.EXPANSION,
        metadata={"depth": depth, "terms": terms, "excluded_defective": excluded},
    )
    if reference is None:
        return trace, None
    return trace, tail_report(reference, trace, terms, excluded)


def tail_report(
    reference: CorrelationTrace, expansion: CorrelationTrace, terms: int = 0, excluded: int = 0
) -> ExpansionReport:
    """Fit log|C - C_exp| against t on the second half of the grid."""
    if not np.array_equal(reference.times, expansion.times):
        raise ArgumentError("Traces must share a time grid")
    diff = np.abs(reference.values - expansion.values)
    half = diff.size // 2
    t_tail, d_tail = reference.times[half:], diff[half:]
    floor = 1e-14 * max(1.0, float(np.max(np.abs(reference.values))))
    usable = d_tail > floor
    if np.count_nonzero(usable) < 2:
        return ExpansionReport(float(np.max(d_tail, initial=0.0)), float("inf"), float(diff.max()), terms, excluded)
    slope, intercept = np.polyfit(t_tail[usable], np.log(d_tail[usable]), 1)
    return ExpansionReport(float(np.exp(intercept)), float(-slope), float(diff.max()), terms, excluded)


@dataclass
class LangevinConfig:
    """Euler-Maruyama ensemble settings."""

    paths: int = 10_000
    dt: float = 1e-3
    seed: int = 0
    block_size: int = 1000

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ArgumentError(f"dt must be positive, got {self.dt}")
        if self.paths < 2 or self.block_size < 1:
            raise ArgumentError("Need at least two paths and a positive block size")


@dataclass
class LangevinEstimate:
    """Pathwise expectations E[f(x(t))] with per-time standard errors."""

    times: np.ndarray
    means: np.ndarray
    stderr_re: np.ndarray
    stderr_im: np.ndarray
    paths: int
    excluded: int

    def to_trace(self, **metadata: Any) -> CorrelationTrace:
        return CorrelationTrace(
            self.times,
            self.means,
            TraceSource.MONTE_CARLO,
            self.stderr_re,
            self.stderr_im,
            dict(metadata, paths=self.paths, excluded=self.excluded),
        )


def block_generator(seed: int, block: int) -> Generator:
    """Counter-based stream for path block `block`."""
    return Generator(Philox(SeedSequence(seed, spawn_key=(block,))))


def _step_indices(times: np.ndarray, dt: float) -> np.ndarray:
    steps = np.rint(times / dt).astype(np.int64)
    if np.any(np.abs(steps * dt - times) > 1e-9 * np.maximum(1.0, times)):
        raise ArgumentError(f"Sample times {times} are not multiples of dt = {dt}")
    return steps


def euler_maruyama_block(
    field: FlowField,
    epsilon: float,
    x0: np.ndarray,
    dt: float,
    record_steps: np.ndarray,
    count: int,
    rng: Generator,
    observable: Optional[Evaluator] = None,
) -> tuple:
    """
    Advance `count` paths of x <- x - V(x) dt + sqrt(2 eps dt) xi.

    Returns the recorded values (observable or raw states) and the mask of
    paths that stayed finite. A path that leaves the finite range is frozen
    at NaN, so every record after its escape is NaN.
    """
    x = np.tile(np.asarray(x0, dtype=float), (count, 1))
    noise = np.sqrt(2.0 * epsilon * dt)
    alive = np.ones(count, dtype=bool)
    shape = (count, record_steps.size) if observable else (count, record_steps.size, x.shape[1])
    dtype = complex if observable else float
    recorded = np.zeros(shape, dtype=dtype)

    slot = 0
    for step in range(int(record_steps[-1]) + 1):
        while slot < record_steps.size and record_steps[slot] == step:
            recorded[:, slot] = observable(x) if observable else x
            slot += 1
        if step == record_steps[-1]:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            drift = field.velocity(x)
            x = x - drift * dt
            if epsilon > 0:
                x = x + noise * rng.standard_normal(x.shape)
        finite = np.all(np.isfinite(x), axis=1)
        if not np.all(finite):
            alive &= finite
            x[~finite] = np.nan
        if field.on_torus:
            x = np.mod(x, TWO_PI)
    return recorded, alive


def langevin_sample(
    field: FlowField,
    epsilon: float,
    x0: Sequence[float],
    times: Sequence[float],
    observable: Evaluator,
    config: Optional[LangevinConfig] = None,
    executor: Optional[Executor] = None,
) -> LangevinEstimate:
    """
    Euler-Maruyama ensemble estimate of E[f(x(t))].

    Paths are split into blocks with independent counter-based streams;
    results are stacked in block order so the estimate does not depend on
    the executor.
    """
    config = config or LangevinConfig()
    if epsilon < 0:
        raise ArgumentError(f"epsilon must be >= 0, got {epsilon}")
    grid = _check_times(times)
    record = _step_indices(grid, config.dt)
    start = np.asarray(x0, dtype=float)
    if start.shape != (field.dimension,):
        raise ArgumentError(f"x0 of shape {start.shape} for a {field.dimension}-d field")

    sizes = [config.block_size] * (config.paths // config.block_size)
    if config.paths % config.block_size:
        sizes.append(config.paths % config.block_size)

    def run(block: int):
        return euler_maruyama_block(
            field, epsilon, start, config.dt, record, sizes[block],
            block_generator(config.seed, block), observable,
        )

    mapper = executor.map if executor is not None else map
    results = list(mapper(run, range(len(sizes))))
    values = np.concatenate([r[0] for r in results], axis=0)
    alive = np.concatenate([r[1] for r in results])

    excluded = int(np.count_nonzero(~alive))
    if excluded:
        logger.warning(f"Excluded {excluded} of {config.paths} non-finite Langevin paths")
    kept = np.ascontiguousarray(values[alive].T)
    n = kept.shape[1]
    if n < 2:
        raise PreconditionError("Fewer than two finite Langevin paths remain")

    means = kept.mean(axis=1)
    stderr_re = kept.real.std(axis=1, ddof=1) / np.sqrt(n)
    stderr_im = kept.imag.std(axis=1, ddof=1) / np.sqrt(n)
    return LangevinEstimate(grid, means, stderr_re, stderr_im, n, excluded)


def langevin_trajectories(
    field: FlowField,
    epsilon: float,
    x0: Sequence[float],
    times: Sequence[float],
    config: Optional[LangevinConfig] = None,
    unwrap: bool = True,
) -> np.ndarray:
    """
    States of every path at the sample times, shape (paths, len(times), d).

    With unwrap, torus coordinates are accumulated without the mod-2pi wrap
    so that displacement statistics can be read off directly. Paths that
    escape to non-finite values read NaN from their escape onward.
    """
    config = config or LangevinConfig()
    grid = _check_times(times)
    record = _step_indices(grid, config.dt)
    start = np.asarray(x0, dtype=float)
    if start.shape != (field.dimension,):
        raise ArgumentError(f"x0 of shape {start.shape} for a {field.dimension}-d field")
    lifted = _Unwrapped(field) if unwrap and field.on_torus else field

    blocks, alive = [], []
    remaining, block = config.paths, 0
    while remaining > 0:
        count = min(config.block_size, remaining)
        states, finite = euler_maruyama_block(
            lifted, epsilon, start, config.dt, record, count,  # type: ignore[arg-type]
            block_generator(config.seed, block),
        )
        blocks.append(states)
        alive.append(finite)
        remaining -= count
        block += 1

    escaped = int(np.count_nonzero(~np.concatenate(alive)))
    if escaped:
        logger.warning(f"{escaped} of {config.paths} Langevin trajectories escaped; recorded as NaN")
    return np.concatenate(blocks, axis=0)


class _Unwrapped:
    """View of a torus field that skips the mod-2pi wrap."""

    def __init__(self, field: FlowField):
        self._field = field
        self.dimension = field.dimension
        self.on_torus = False

    def velocity(self, x: np.ndarray) -> np.ndarray:
        return self._field.velocity(x)


@dataclass
class DiscrepancyReport:
    """Operator evolution at x0 against Monte-Carlo estimates."""

    times: np.ndarray
    operator_values: np.ndarray
    mc_values: np.ndarray
    z_re: np.ndarray
    z_im: np.ndarray
    bias_coefficient: Optional[float] = None
    estimate: Optional[LangevinEstimate] = None

    @property
    def max_abs_z(self) -> float:
        return float(max(np.max(np.abs(self.z_re)), np.max(np.abs(self.z_im))))


def _z(diff: np.ndarray, err: np.ndarray) -> np.ndarray:
    z = np.zeros_like(diff)
    positive = err > 0
    z[positive] = diff[positive] / err[positive]
    z[~positive & (np.abs(diff) > 1e-12)] = np.inf
    return z


def mc_vs_operator(
    field: FlowField,
    f: Observable,
    epsilon: float,
    times: Sequence[float],
    x0: Sequence[float],
    config: Optional[LangevinConfig] = None,
    estimate_bias: bool = False,
    executor: Optional[Executor] = None,
) -> DiscrepancyReport:
    """z-scores of MC estimates against e^{-itM} f evaluated at x0."""
    if f.coefficients is None or f.evaluator is None:
        raise ArgumentError("mc_vs_operator needs an observable with coefficients and an evaluator")
    config = config or LangevinConfig()
    grid = _check_times(times)
    op = assemble_flow_generator(field, epsilon, f.truncation)  # type: ignore[arg-type]
    point = np.asarray(x0, dtype=float)
    phases = np.exp(1j * (f.truncation.modes @ point))  # type: ignore[union-attr]
    exact = evolve_series(op, f, grid) @ phases

    estimate = langevin_sample(field, epsilon, point, grid, f.evaluator, config, executor)
    diff = estimate.means - exact
    report = DiscrepancyReport(
        grid,
        exact,
        estimate.means,
        _z(diff.real, estimate.stderr_re),
        _z(diff.imag, estimate.stderr_im),
        estimate=estimate,
    )

    if estimate_bias:
        halved = LangevinConfig(config.paths, config.dt / 2, config.seed, config.block_size)
        fine = langevin_sample(field, epsilon, point, grid, f.evaluator, halved, executor)
        # weak order one: mc(dt) - mc(dt/2) ~ C dt / 2
        report.bias_coefficient = float(np.max(np.abs(estimate.means - fine.means)) * 2.0 / config.dt)
    logger.info(f"MC vs operator for {f.name}: max |z| = {report.max_abs_z:.2f}")
    return report
