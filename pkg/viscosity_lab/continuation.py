"""
Viscosity Continuation.

Sweeps epsilon downward, chains eigenvalues into branches lambda_j(eps) and
extrapolates each branch to eps = 0.
"""

import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .eigensolver import (
    DEFAULT_DENSE_LIMIT,
    ResonanceSet,
    Window,
    dense_spectrum,
    shift_invert_arnoldi,
)
from .exceptions import ArgumentError, PreconditionError
from .generator_assembly import (
    FourierTruncation,
    assemble_flow_generator,
    assemble_noisy_koopman,
)
from .phase_models import FlowField, MapSystem

logger = logging.getLogger(__name__)

BOOTSTRAP_CAP = 0.5
CAP_FACTOR = 5.0
CAP_FLOOR = 1e-6
TIE_TOLERANCE = 1e-10
BOUNDARY_THRESHOLD = 0.01

System = Union[FlowField, MapSystem]


class BranchStatus(Enum):
    """Outcome of chaining and extrapolating one branch."""

    CONVERGED = "converged"
    BOUNDARY_CONTAMINATED = "boundary_contaminated"
    LOST = "lost"
    INSUFFICIENT = "insufficient"
    NON_SMOOTH = "non_smooth"


@dataclass
class Branch:
    """One eigenvalue followed across a decreasing epsilon schedule."""

    identifier: int
    dimension: int
    epsilons: List[float] = field(default_factory=list)
    values: List[complex] = field(default_factory=list)
    cutoffs: List[int] = field(default_factory=list)
    boundary_masses: List[float] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)
    extrapolated: complex = complex(np.nan, np.nan)
    extrapolation_order: int = 0
    residual_of_fit: float = float("nan")
    status: BranchStatus = BranchStatus.CONVERGED

    def append(
        self, epsilon: float, value: complex, cutoff: int, mass: float, residual: float = 0.0
    ) -> None:
        self.epsilons.append(float(epsilon))
        self.values.append(complex(value))
        self.cutoffs.append(int(cutoff))
        self.boundary_masses.append(float(mass))
        self.residuals.append(float(residual))

    @property
    def last(self) -> complex:
        return self.values[-1]

    @property
    def diameter(self) -> float:
        values = np.asarray(self.values)
        if values.size < 2:
            return 0.0
        return float(np.max(np.abs(values[:, None] - values[None, :])))

    def value_at(self, epsilon: float) -> Optional[complex]:
        for eps, value in zip(self.epsilons, self.values):
            if eps == epsilon:
                return value
        return None

    def prediction(self, epsilon: float) -> Tuple[complex, float]:
        """Linear prediction in epsilon and the matching cap around it."""
        if len(self.values) < 2:
            return self.values[-1], BOOTSTRAP_CAP
        (e1, e2), (v1, v2) = self.epsilons[-2:], self.values[-2:]
        step = v2 - v1
        predicted = v2 + step * (epsilon - e2) / (e2 - e1)
        return predicted, CAP_FACTOR * abs(step) + CAP_FLOOR


@dataclass
class TruncationPolicy:
    """
    Cutoff selection per epsilon.

    Adaptive default K = max(min_cutoff, ceil(scale / sqrt(eps))), capped so
    the dense size stays within max_size unless Arnoldi is selected.
    """

    min_cutoff: int = 8
    scale: float = 4.0
    max_size: int = DEFAULT_DENSE_LIMIT
    fixed_cutoff: Optional[int] = None
    method: str = "auto"
    arnoldi_count: int = 40
    arnoldi_shift: Optional[complex] = None

    def cutoff_for(self, epsilon: float, dimension: int) -> int:
        if self.fixed_cutoff is not None:
            return self.fixed_cutoff
        cutoff = max(self.min_cutoff, math.ceil(self.scale / math.sqrt(epsilon)))
        if self.method != "arnoldi":
            cap = int((self.max_size ** (1.0 / dimension) - 1) // 2)
            cutoff = min(cutoff, max(cap, 1))
        return cutoff

    def uses_arnoldi(self, size: int) -> bool:
        return self.method == "arnoldi" or (self.method == "auto" and size > self.max_size)


def spectrum_at(
    system: System, epsilon: float, window: Window, policy: TruncationPolicy
) -> ResonanceSet:
    """Windowed spectrum of the regularized operator at one epsilon."""
    trunc = FourierTruncation(system.dimension, policy.cutoff_for(epsilon, system.dimension))
    if isinstance(system, MapSystem):
        op = assemble_noisy_koopman(system, epsilon, trunc)
    else:
        op = assemble_flow_generator(system, epsilon, trunc)

    if policy.uses_arnoldi(trunc.size):
        shift = policy.arnoldi_shift if policy.arnoldi_shift is not None else window.center
        count = min(policy.arnoldi_count, trunc.size - 2)
        spectrum = shift_invert_arnoldi(op, shift, count)
    else:
        spectrum = dense_spectrum(op, dense_limit=max(policy.max_size, trunc.size))

    logger.debug(f"eps={epsilon}: K={trunc.cutoff}, {len(spectrum)} eigenvalues")
    return spectrum.restrict(window)


def _match(
    active: List[Branch], candidates: np.ndarray, epsilon: float
) -> Dict[int, int]:
    """Greedy nearest assignment of candidates to active branches."""
    pairs = []
    for b, branch in enumerate(active):
        predicted, cap = branch.prediction(epsilon)
        distances = np.abs(candidates - predicted)
        for c in np.nonzero(distances <= cap)[0]:
            z = candidates[c]
            pairs.append((float(distances[c]), z.real, z.imag, branch.identifier, b, int(c)))

    pairs.sort()
    for first, second in zip(pairs, pairs[1:]):
        if first[4] == second[4] and abs(first[0] - second[0]) <= TIE_TOLERANCE:
            logger.debug(
                f"Ambiguous match for branch {first[3]} at eps={epsilon}: "
                f"resolved by (distance, re, im)"
            )

    assignment: Dict[int, int] = {}
    used = set()
    for _, _, _, _, b, c in pairs:
        if b in assignment or c in used:
            continue
        assignment[b] = c
        used.add(c)
    return assignment


def chain_spectra(
    schedule: Sequence[float], spectra: Sequence[ResonanceSet], dimension: int
) -> List[Branch]:
    """Sequential matching reduction over a decreasing schedule."""
    branches: List[Branch] = []
    active: List[Branch] = []

    for epsilon, spectrum in zip(schedule, spectra):
        candidates = spectrum.eigenvalues
        masses = (
            spectrum.boundary_mass(width=1)
            if spectrum.right_vectors is not None and spectrum.truncation is not None
            else np.zeros(candidates.size)
        )
        cutoff = spectrum.truncation.cutoff if spectrum.truncation is not None else 0

        assignment = _match(active, candidates, epsilon)
        survivors = []
        for b, branch in enumerate(active):
            if b in assignment:
                c = assignment[b]
                branch.append(epsilon, candidates[c], cutoff, masses[c], spectrum.residuals[c])
                survivors.append(branch)

        matched = set(assignment.values())
        for c in range(candidates.size):
            if c in matched:
                continue
            branch = Branch(identifier=len(branches), dimension=dimension)
            branch.append(epsilon, candidates[c], cutoff, masses[c], spectrum.residuals[c])
            branches.append(branch)
            survivors.append(branch)
        active = survivors

    return branches


def sweep(
    system: System,
    schedule: Sequence[float],
    window: Window,
    policy: Optional[TruncationPolicy] = None,
    executor: Optional[Executor] = None,
    extrapolate_branches: bool = True,
) -> List[Branch]:
    """
    Follow eigenvalues in `window` as epsilon decreases along `schedule`.

    Spectra at distinct epsilons are independent and go through the executor;
    chaining is sequential and deterministic.
    """
    policy = policy or TruncationPolicy()
    schedule = [float(e) for e in schedule]
    if not schedule:
        raise ArgumentError("Empty epsilon schedule")
    if any(e <= 0 for e in schedule):
        raise ArgumentError(f"Sweep epsilons must be positive, got {schedule}")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ArgumentError(f"Schedule must be strictly decreasing, got {schedule}")

    def solve(epsilon: float) -> ResonanceSet:
        return spectrum_at(system, epsilon, window, policy)  # type: ignore[arg-type]

    mapper = executor.map if executor is not None else map
    spectra = list(mapper(solve, schedule))

    if not len(spectra[0]):
        logger.info(f"No eigenvalues of {system.name} in window at eps={schedule[0]}")

    branches = chain_spectra(schedule, spectra, system.dimension)
    finest = schedule[-1]
    for branch in branches:
        if branch.epsilons[-1] != finest:
            branch.status = BranchStatus.LOST
        elif len(branch.values) < 3:
            branch.status = BranchStatus.INSUFFICIENT
        elif boundary_contamination(branch):
            branch.status = BranchStatus.BOUNDARY_CONTAMINATED
        if extrapolate_branches and branch.status in (
            BranchStatus.CONVERGED,
            BranchStatus.BOUNDARY_CONTAMINATED,
        ):
            extrapolate(branch)

    logger.info(
        f"Sweep of {system.name}: {len(branches)} branches over {len(schedule)} epsilons"
    )
    return branches


def geometric_schedule(start: float = 0.2, ratio: float = 0.5, points: int = 6) -> List[float]:
    if start <= 0 or not 0 < ratio < 1 or points < 1:
        raise ArgumentError(f"Invalid geometric schedule ({start}, {ratio}, {points})")
    return [start * ratio**i for i in range(points)]


def _fit(eps: np.ndarray, values: np.ndarray, order: int) -> Tuple[complex, np.ndarray]:
    vander = np.vander(eps, order + 1, increasing=True).astype(complex)
    coeffs, *_ = np.linalg.lstsq(vander, values, rcond=None)
    return complex(coeffs[0]), values - vander @ coeffs


def extrapolate(branch: Branch, max_order: int = 3) -> complex:
    """
    Polynomial extrapolation lambda(eps) = l0 + c1 eps + c2 eps^2 + ...

    Orders 1..max_order with at least one residual degree of freedom are
    scored by RSS / dof; a higher order replaces the current choice only if
    it lowers the score by a factor of four above the rounding floor.
    """
    if branch.status == BranchStatus.LOST:
        raise PreconditionError(f"Branch {branch.identifier} is lost")
    n = len(branch.values)
    if n < 3:
        raise PreconditionError(f"Branch {branch.identifier} has {n} points, need 3")

    eps = np.asarray(branch.epsilons, dtype=float)
    values = np.asarray(branch.values, dtype=complex)
    magnitude = max(1.0, float(np.max(np.abs(values))))
    floor = n * (1e-13 * magnitude) ** 2

    best = None
    for order in range(1, min(max_order, n - 2) + 1):
        limit, residual = _fit(eps, values, order)
        score = float(np.sum(np.abs(residual) ** 2)) / (n - order - 1)
        if best is None or (best[0] > floor and score < 0.25 * best[0]):
            best = (score, order, limit, residual)

    _, order, limit, residual = best  # type: ignore[misc]
    branch.extrapolated = limit
    branch.extrapolation_order = order
    branch.residual_of_fit = float(np.sqrt(np.mean(np.abs(residual) ** 2)))

    threshold = max(1e-3 * branch.diameter, 1e-12 * magnitude)
    if branch.residual_of_fit > threshold:
        branch.status = BranchStatus.NON_SMOOTH
        logger.warning(
            f"Branch {branch.identifier} is not smooth in eps: fit residual "
            f"{branch.residual_of_fit:.3e} > {threshold:.3e}; limit {limit:.6g} kept"
        )
    return limit


def boundary_contamination(
    branch: Branch,
    vectors: Optional[Sequence[np.ndarray]] = None,
    threshold: float = BOUNDARY_THRESHOLD,
) -> bool:
    """
    True if any member vector has >= threshold of its |c|^2 mass on modes
    with |k|_inf >= K - 1.

    Without explicit vectors, the masses recorded during the sweep are used.
    """
    if vectors is None:
        return any(mass >= threshold for mass in branch.boundary_masses)

    if len(vectors) != len(branch.cutoffs):
        raise ArgumentError(
            f"{len(vectors)} vectors for a branch of {len(branch.cutoffs)} points"
        )
    for vector, cutoff in zip(vectors, branch.cutoffs):
        trunc = FourierTruncation(branch.dimension, cutoff)
        power = np.abs(np.asarray(vector)) ** 2
        total = power.sum()
        if total > 0 and power[trunc.boundary_mask(1)].sum() / total >= threshold:
            return True
    return False


@dataclass
class GapReport:
    """Eigenvalue-free strip and compact-box diagnostics."""

    strip_half_width: float
    radius: float
    strip_count: int
    raw_strip_counts: Dict[float, int]
    strip_stable: bool
    box_counts: Dict[float, int]
    box_stable: bool


def _in_strip(z: complex, radius: float, half_width: float, band: float) -> bool:
    return abs(z.real) > radius and -half_width < z.imag < -band


def gap_diagnostic(
    branches: Sequence[Branch],
    gamma0: float,
    delta: float,
    radius: float,
    band: float = 1e-6,
) -> GapReport:
    """
    Count resonances in the strip |Re| > R, Im in (-(gamma0 - delta)/2, 0).

    The strip count uses extrapolated limits (excluding the band
    Im >= -band); raw counts at the two finest epsilons and box counts in
    [-R, R] x [-(gamma0 - delta)/2, 0] per epsilon are reported alongside.
    """
    if gamma0 <= 0:
        raise PreconditionError(f"gamma0 must be positive, got {gamma0}")
    half_width = 0.5 * (gamma0 - delta)
    if half_width <= 0:
        raise ArgumentError(f"delta {delta} leaves an empty strip for gamma0 {gamma0}")

    usable = [
        b
        for b in branches
        if b.status in (BranchStatus.CONVERGED, BranchStatus.NON_SMOOTH)
        and np.isfinite(b.extrapolated)
    ]
    strip_count = sum(_in_strip(b.extrapolated, radius, half_width, band) for b in usable)

    epsilons = sorted({e for b in branches for e in b.epsilons}, reverse=True)
    raw: Dict[float, int] = {}
    for eps in epsilons[-2:]:
        raw[eps] = sum(
            _in_strip(v, radius, half_width, band)
            for b in branches
            for v in [b.value_at(eps)]
            if v is not None
        )

    boxes: Dict[float, int] = {}
    for eps in epsilons:
        boxes[eps] = sum(
            abs(v.real) <= radius and -half_width <= v.imag <= 0
            for b in branches
            if b.status != BranchStatus.BOUNDARY_CONTAMINATED
            for v in [b.value_at(eps)]
            if v is not None
        )

    raw_values = list(raw.values())
    box_values = [boxes[e] for e in epsilons[-2:]]
    return GapReport(
        strip_half_width=half_width,
        radius=radius,
        strip_count=int(strip_count),
        raw_strip_counts=raw,
        strip_stable=len(set(raw_values)) <= 1,
        box_counts=boxes,
        box_stable=len(set(box_values)) <= 1,
    )


def modulus_gap_count(
    eigenvalues: Union[ResonanceSet, np.ndarray], gamma0: float, unit_tol: float = 1e-8
) -> int:
    """Map analog of the strip: |lambda| in (e^{-gamma0/2}, 1), excluding lambda = 1."""
    if isinstance(eigenvalues, ResonanceSet):
        eigenvalues = eigenvalues.eigenvalues
    lam = np.asarray(eigenvalues, dtype=complex)
    modulus = np.abs(lam)
    inside = (modulus > math.exp(-0.5 * gamma0)) & (modulus < 1.0 + unit_tol)
    return int(np.sum(inside & (np.abs(lam - 1.0) > unit_tol)))


def mirror_negative_viscosity(branches: Sequence[Branch]) -> List[complex]:
    """Limits as eps -> 0-: complex conjugates of the eps -> 0+ limits."""
    return [
        complex(np.conj(b.extrapolated))
        for b in branches
        if b.status in (BranchStatus.CONVERGED, BranchStatus.NON_SMOOTH)
        and np.isfinite(b.extrapolated)
    ]
