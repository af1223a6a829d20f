"""
Dynamics Diagnostics.

Trajectory-level tools: tangent cocycles and Lyapunov exponents, the
unstable growth rate gamma0, Poincare sections and paired deterministic /
stochastic trajectories.
"""

import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import bisect
from sklearn.neighbors import NearestNeighbors

from .correlation_lab import block_generator
from .exceptions import ArgumentError, PreconditionError
from .phase_models import TWO_PI, FlowField, MapSystem

logger = logging.getLogger(__name__)

DEFAULT_DT = 1e-3
BOUNDING_RADIUS = 50.0
SECTION_TOLERANCE = 1e-10
POSITIVE_EXPONENT_TOL = 1e-4
# Time budget per requested crossing when no max_time is given.
SECTION_TIME_PER_CROSSING = 100.0
SECTION_PROGRESS_STEPS = 100_000

System = Union[FlowField, MapSystem]


def rk4_step(velocity: Callable[[np.ndarray], np.ndarray], x: np.ndarray, dt: float) -> np.ndarray:
    k1 = velocity(x)
    k2 = velocity(x + 0.5 * dt * k1)
    k3 = velocity(x + 0.5 * dt * k2)
    k4 = velocity(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _tangent_rk4(field: FlowField, x: np.ndarray, q: np.ndarray, dt: float):
    """RK4 on (x, Q) with x' = V(x), Q' = DV(x) Q, batched over leading axis."""

    def rhs(xs, qs):
        return field.velocity(xs), np.einsum("...ij,...jk->...ik", field.jacobian(xs), qs)

    a1, b1 = rhs(x, q)
    a2, b2 = rhs(x + 0.5 * dt * a1, q + 0.5 * dt * b1)
    a3, b3 = rhs(x + 0.5 * dt * a2, q + 0.5 * dt * b2)
    a4, b4 = rhs(x + dt * a3, q + dt * b3)
    return (
        x + (dt / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4),
        q + (dt / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4),
    )


@dataclass
class TangentCocycle:
    """QR-renormalized tangent frames along a batch of trajectories."""

    base: np.ndarray
    frames: np.ndarray
    log_stretch: np.ndarray
    elapsed: float = 0.0
    orthonormality_defect: float = 0.0
    escaped: Optional[np.ndarray] = None

    def renormalize(self) -> None:
        q, r = np.linalg.qr(self.frames)
        signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
        signs[signs == 0] = 1.0
        q = q * signs[..., None, :]
        r = r * signs[..., :, None]
        self.frames = q
        self.log_stretch += np.log(np.abs(np.diagonal(r, axis1=-2, axis2=-1)))
        eye = np.eye(q.shape[-1])
        gram = np.einsum("...ji,...jk->...ik", q, q)
        self.orthonormality_defect = max(
            self.orthonormality_defect, float(np.max(np.abs(gram - eye)))
        )

    def exponents(self) -> np.ndarray:
        if self.elapsed <= 0:
            raise PreconditionError("Cocycle has not been advanced")
        return self.log_stretch / self.elapsed


@dataclass
class LyapunovResult:
    """Exponents per seed, sorted descending, with last-quarter drift."""

    exponents: np.ndarray
    drift: np.ndarray
    truncated: np.ndarray
    orthonormality_defect: float

    def for_seed(self, i: int = 0) -> np.ndarray:
        return self.exponents[i]


def _seed_batch(x0: np.ndarray, dimension: int) -> np.ndarray:
    seeds = np.atleast_2d(np.asarray(x0, dtype=float))
    if seeds.shape[-1] != dimension:
        raise ArgumentError(f"Seeds of width {seeds.shape[-1]} for a {dimension}-d system")
    return seeds


def _benettin(
    system: System,
    seeds: np.ndarray,
    steps: int,
    renorm_steps: int,
    dt: float,
    transient_steps: int,
    bound: float,
) -> LyapunovResult:
    d = system.dimension
    x = seeds.copy()
    is_map = isinstance(system, MapSystem)

    def advance_base(xs):
        return system.apply(xs) if is_map else rk4_step(system.velocity, xs, dt)

    for _ in range(transient_steps):
        x = advance_base(x)
        if not is_map and system.on_torus:
            x = np.mod(x, TWO_PI)

    cocycle = TangentCocycle(
        base=x.copy(),
        frames=np.tile(np.eye(d), (x.shape[0], 1, 1)),
        log_stretch=np.zeros((x.shape[0], d)),
        escaped=np.zeros(x.shape[0], dtype=bool),
    )
    unit_time = 1.0 if is_map else dt
    estimates = []
    for step in range(1, steps + 1):
        if is_map:
            cocycle.frames = np.einsum("...ij,...jk->...ik", system.jacobian(x), cocycle.frames)
            x = system.apply(x)
        else:
            alive = ~cocycle.escaped
            nx, nq = _tangent_rk4(system, x[alive], cocycle.frames[alive], dt)
            x[alive], cocycle.frames[alive] = nx, nq
            if system.on_torus:
                x = np.mod(x, TWO_PI)
            else:
                cocycle.escaped |= ~np.all(np.isfinite(x), axis=1) | (
                    np.linalg.norm(np.nan_to_num(x, nan=np.inf), axis=1) > bound
                )
        if step % renorm_steps == 0 or step == steps:
            live = ~cocycle.escaped
            frames = cocycle.frames.copy()
            stretch = cocycle.log_stretch.copy()
            cocycle.frames[~live] = np.eye(d)
            cocycle.renormalize()
            cocycle.frames[~live] = frames[~live]
            cocycle.log_stretch[~live] = stretch[~live]
            cocycle.elapsed = step * unit_time
            estimates.append(cocycle.log_stretch / cocycle.elapsed)
    cocycle.base = x

    running = np.asarray(estimates)
    tail = running[-max(1, len(estimates) // 4):]
    drift = tail.max(axis=0) - tail.min(axis=0)
    exponents = cocycle.exponents()
    order = np.argsort(-exponents, axis=1, kind="stable")
    exponents = np.take_along_axis(exponents, order, axis=1)
    drift = np.take_along_axis(drift, order, axis=1)
    if np.any(cocycle.escaped):
        logger.warning(f"{int(cocycle.escaped.sum())} trajectories left |x| <= {bound}")
    return LyapunovResult(exponents, drift, cocycle.escaped.copy(), cocycle.orthonormality_defect)


def lyapunov_spectrum(
    system: System,
    x0: Sequence[float],
    horizon: float,
    renorm_every: float = 1.0,
    dt: float = DEFAULT_DT,
    transient: float = 0.0,
    bound: float = BOUNDING_RADIUS,
) -> LyapunovResult:
    """
    Benettin QR algorithm. Maps count horizon and renorm_every in
    iterations; flows in time units with fixed-step RK4 on the variational
    equation.
    """
    if horizon <= 0 or renorm_every <= 0:
        raise ArgumentError("horizon and renorm_every must be positive")
    if isinstance(system, MapSystem):
        steps, renorm, transient_steps = int(horizon), max(1, int(renorm_every)), int(transient)
    else:
        steps = int(round(horizon / dt))
        renorm = max(1, int(round(renorm_every / dt)))
        transient_steps = int(round(transient / dt))
    if steps < 4 * renorm:
        raise ArgumentError("horizon must cover several renormalization intervals")
    seeds = _seed_batch(np.asarray(x0, dtype=float), system.dimension)
    return _benettin(system, seeds, steps, renorm, dt, transient_steps, bound)


@dataclass
class Gamma0Report:
    """Minimum over seeds of the summed positive exponents."""

    gamma0: float
    spread: float
    per_seed: np.ndarray
    unstable_dimension: np.ndarray
    flagged_seeds: List[int]
    exponents: np.ndarray


def gamma0_estimate(
    system: System,
    seeds: Sequence[Sequence[float]],
    horizon: float,
    renorm_every: float = 1.0,
    dt: float = DEFAULT_DT,
    transient: float = 0.0,
    executor: Optional[Executor] = None,
    chunk: int = 8,
    positive_tol: float = POSITIVE_EXPONENT_TOL,
) -> Gamma0Report:
    """gamma0 ~ min over seeds of (1/t) log |det D phi_t on E_u|."""
    batch = _seed_batch(np.asarray(seeds, dtype=float), system.dimension)
    chunks = [batch[i:i + chunk] for i in range(0, batch.shape[0], chunk)]

    def run(part: np.ndarray) -> LyapunovResult:
        return lyapunov_spectrum(system, part, horizon, renorm_every, dt, transient)

    mapper = executor.map if executor is not None else map
    results = list(mapper(run, chunks))
    exponents = np.concatenate([r.exponents for r in results], axis=0)
    truncated = np.concatenate([r.truncated for r in results])

    positive = exponents > positive_tol
    sums = np.where(positive, exponents, 0.0).sum(axis=1)
    unstable = positive.sum(axis=1)
    flagged = [int(i) for i in np.nonzero((unstable == 0) | truncated)[0]]
    usable = (unstable > 0) & ~truncated
    if not np.any(usable):
        raise PreconditionError(
            f"No positive Lyapunov exponents detected for {system.name}; "
            f"top exponents {exponents[:, 0].round(6).tolist()}"
        )
    if flagged:
        logger.warning(f"gamma0 seeds {flagged} are non-hyperbolic or escaped; excluded")
    values = sums[usable]
    report = Gamma0Report(
        gamma0=float(values.min()),
        spread=float(values.max() - values.min()),
        per_seed=sums,
        unstable_dimension=unstable,
        flagged_seeds=flagged,
        exponents=exponents,
    )
    logger.info(f"gamma0 for {system.name}: {report.gamma0:.6f} (spread {report.spread:.2e})")
    return report


@dataclass(frozen=True)
class SectionPlane:
    """Hyperplane {x_coordinate = level}, crossed in `direction` (+1 / -1)."""

    coordinate: int = 2
    level: float = 0.0
    direction: int = 1

    def __post_init__(self) -> None:
        if self.direction not in (1, -1):
            raise ArgumentError(f"Crossing direction must be +1 or -1, got {self.direction}")


@dataclass
class SectionCrossings:
    """Crossing points in the remaining coordinates, tagged by seed."""

    plane: SectionPlane
    points: np.ndarray
    tags: np.ndarray
    residuals: np.ndarray
    escaped: List[int] = field(default_factory=list)
    incomplete: List[int] = field(default_factory=list)

    def for_seed(self, tag: int) -> np.ndarray:
        return self.points[self.tags == tag]


def _section_value(x: np.ndarray, plane: SectionPlane, periodic: bool) -> np.ndarray:
    value = x[..., plane.coordinate] - plane.level
    if periodic:
        return value / TWO_PI
    return value


def poincare_section(
    field: FlowField,
    plane: SectionPlane,
    seeds: Sequence[Sequence[float]],
    n_crossings: int,
    dt: float = DEFAULT_DT,
    max_time: Optional[float] = None,
    bound: float = BOUNDING_RADIUS,
    tolerance: float = SECTION_TOLERANCE,
) -> SectionCrossings:
    """
    Fixed-step RK4 with sign-change detection and bisection refinement of
    the crossing within the step. On tori the plane coordinate is followed
    unwrapped and crossings are counted modulo 2pi.

    Without max_time the integration stops at
    n_crossings * SECTION_TIME_PER_CROSSING; seeds short of n_crossings by
    then are listed in ``incomplete``.
    """
    if not 0 <= plane.coordinate < field.dimension:
        raise ArgumentError(f"Plane coordinate {plane.coordinate} outside dimension {field.dimension}")
    if n_crossings < 1:
        raise ArgumentError("n_crossings must be positive")
    batch = _seed_batch(np.asarray(seeds, dtype=float), field.dimension)
    periodic = field.on_torus
    others = [i for i in range(field.dimension) if i != plane.coordinate]
    if max_time is None:
        max_time = n_crossings * SECTION_TIME_PER_CROSSING
    max_steps = max(1, int(round(max_time / dt)))
    logger.debug(f"Section of {field.name}: {batch.shape[0]} seeds, {n_crossings} crossings, t <= {max_time}")

    x = batch.copy()
    counts = np.zeros(batch.shape[0], dtype=np.int64)
    active = np.ones(batch.shape[0], dtype=bool)
    escaped: List[int] = []
    found: Dict[int, List[Tuple[np.ndarray, float]]] = {i: [] for i in range(batch.shape[0])}

    for step in range(max_steps):
        if not np.any(active):
            break
        if step and step % SECTION_PROGRESS_STEPS == 0:
            logger.debug(
                f"Section t = {step * dt:.1f}: {int(counts.sum())} crossings, "
                f"{int(active.sum())} seeds still running"
            )
        idx = np.nonzero(active)[0]
        prev = x[idx]
        nxt = rk4_step(field.velocity, prev, dt)
        g0 = _section_value(prev, plane, periodic)
        g1 = _section_value(nxt, plane, periodic)
        if periodic:
            up = np.floor(g1) > np.floor(g0)
            down = np.floor(g1) < np.floor(g0)
        else:
            up = (g0 < 0) & (g1 >= 0)
            down = (g0 > 0) & (g1 <= 0)
        wanted = up if plane.direction > 0 else down

        for local in np.nonzero(wanted)[0]:
            seed = int(idx[local])
            start = prev[local]
            shift = math.floor(max(g0[local], g1[local])) if periodic else 0

            def offset(s: float) -> float:
                point = rk4_step(field.velocity, start, s)
                return float(_section_value(point, plane, periodic) - shift)

            s_star = bisect(offset, 0.0, dt, xtol=1e-15, maxiter=200)
            point = rk4_step(field.velocity, start, s_star)
            residual = abs(offset(s_star)) * (TWO_PI if periodic else 1.0)
            coords = point[others]
            if periodic:
                coords = np.mod(coords, TWO_PI)
            found[seed].append((coords, residual))
            counts[seed] += 1

        x[idx] = nxt
        if not periodic:
            out = ~np.all(np.isfinite(nxt), axis=1) | (np.linalg.norm(nxt, axis=1) > bound)
            for seed in idx[out]:
                escaped.append(int(seed))
                active[seed] = False
        active &= counts < n_crossings

    incomplete = [int(i) for i in range(batch.shape[0]) if counts[i] < n_crossings]
    if escaped:
        logger.warning(f"Seeds {escaped} left the bounding box |x| <= {bound}")
    stalled = [i for i in incomplete if i not in escaped]
    if stalled:
        logger.warning(f"Seeds {stalled} reached fewer than {n_crossings} crossings by t = {max_time}")
    points, tags, residuals = [], [], []
    for seed in range(batch.shape[0]):
        for coords, residual in found[seed]:
            points.append(coords)
            tags.append(seed)
            residuals.append(residual)
    loose = sum(1 for r in residuals if r > tolerance)
    if loose:
        logger.warning(f"{loose} section crossings refined only beyond tolerance {tolerance:.0e}")
    return SectionCrossings(
        plane=plane,
        points=np.asarray(points, dtype=float).reshape(-1, len(others)),
        tags=np.asarray(tags, dtype=np.int64),
        residuals=np.asarray(residuals, dtype=float),
        escaped=escaped,
        incomplete=incomplete,
    )


def spacing_dimension(points: np.ndarray) -> float:
    """
    Dimension from nearest-neighbour spacing scaling: halving the sample
    scales the median spacing by 2^{1/D}.
    """
    if points.shape[0] < 8:
        return float("nan")

    def median_spacing(sample: np.ndarray) -> float:
        nn = NearestNeighbors(n_neighbors=2).fit(sample)
        distances, _ = nn.kneighbors(sample)
        return float(np.median(distances[:, 1]))

    full = median_spacing(points)
    half = median_spacing(points[: points.shape[0] // 2])
    if full <= 0 or half <= full:
        return 0.0 if full <= 0 else float("inf")
    return math.log(2.0) / math.log(half / full)


def classify_section(crossings: SectionCrossings, threshold: float = 1.5) -> Dict[int, str]:
    """Per-seed class: "curve" (island), "scatter" (chaotic sea) or "undetermined"."""
    labels: Dict[int, str] = {}
    for tag in np.unique(crossings.tags):
        dim = spacing_dimension(crossings.for_seed(int(tag)))
        if math.isnan(dim):
            labels[int(tag)] = "undetermined"
        else:
            labels[int(tag)] = "curve" if dim < threshold else "scatter"
    return labels


@dataclass
class PairedTrajectories:
    """Deterministic (RK4) and Langevin (Euler-Maruyama) runs from one x0."""

    times: np.ndarray
    deterministic: np.ndarray
    stochastic: np.ndarray
    divergence_time: Optional[float]
    escaped: bool

    @property
    def separation(self) -> np.ndarray:
        return np.linalg.norm(self.deterministic - self.stochastic, axis=1)


def stochastic_vs_deterministic(
    field: FlowField,
    epsilon: float,
    x0: Sequence[float],
    horizon: float,
    dt: float = DEFAULT_DT,
    seed: int = 0,
    record_every: int = 1,
    bound: float = BOUNDING_RADIUS,
) -> PairedTrajectories:
    """
    Both trajectories follow x' = -V(x); the stochastic one adds
    sqrt(2 eps) dB. Torus coordinates are kept unwrapped.
    """
    if epsilon < 0 or dt <= 0 or horizon <= 0:
        raise ArgumentError("Need epsilon >= 0, dt > 0 and horizon > 0")
    start = _seed_batch(np.asarray(x0, dtype=float), field.dimension)[0]
    steps = int(round(horizon / dt))
    rng = block_generator(seed, 0)
    noise = math.sqrt(2.0 * epsilon * dt)

    def backward(x: np.ndarray) -> np.ndarray:
        return -field.velocity(x)

    det, sto = start.copy(), start.copy()
    times, det_rows, sto_rows = [0.0], [det.copy()], [sto.copy()]
    divergence: Optional[float] = None
    escaped = False
    for step in range(1, steps + 1):
        det = rk4_step(backward, det, dt)
        sto = sto + backward(sto) * dt
        if epsilon > 0:
            sto = sto + noise * rng.standard_normal(sto.shape)
        if not field.on_torus and (
            not np.all(np.isfinite(det)) or not np.all(np.isfinite(sto))
            or max(np.linalg.norm(det), np.linalg.norm(sto)) > bound
        ):
            escaped = True
            logger.warning(f"Paired trajectory left |x| <= {bound} at t={step * dt:.3f}")
            break
        if divergence is None and np.linalg.norm(det - sto) > 1.0:
            divergence = step * dt
        if step % record_every == 0:
            times.append(step * dt)
            det_rows.append(det.copy())
            sto_rows.append(sto.copy())

    return PairedTrajectories(
        np.asarray(times), np.asarray(det_rows), np.asarray(sto_rows), divergence, escaped
    )


def axis_seeds(count: int, radius_span: Tuple[float, float], axis: int = 1, dimension: int = 3) -> np.ndarray:
    """Seeds spread along one coordinate axis, others zero."""
    if count < 1:
        raise ArgumentError("count must be positive")
    seeds = np.zeros((count, dimension))
    seeds[:, axis] = np.linspace(radius_span[0], radius_span[1], count)
    return seeds
