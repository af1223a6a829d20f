"""
Eigensolver for truncated non-Hermitian operators.

Dense spectra go through LAPACK (Hessenberg reduction + shifted QR, via
scipy.linalg.eig); large sparse operators through ARPACK shift-invert
Arnoldi on a sparse LU factorization. Every reported eigenpair carries a
residual ||(M - lambda)v|| / ||M||_1 against the original matrix.
"""

import logging
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.linalg as sla
from scipy import sparse
from scipy.sparse import linalg as spla

from .exceptions import ArgumentError, PreconditionError, SolverError
from .generator_assembly import (
    FourierTruncation,
    OperatorKind,
    OperatorMatrix,
    assemble_flow_generator,
)
from .phase_models import FlowField

logger = logging.getLogger(__name__)

DEFAULT_DENSE_LIMIT = 4096
DEFAULT_RESIDUAL_TOL = 1e-8
SHIFT_PERTURBATION = 1e-8 * (1 + 1j)
NEAR_SINGULAR_CONDITION = 1e14

OperatorLike = Union[OperatorMatrix, np.ndarray, sparse.spmatrix]


class SolverKind(Enum):
    """Solver that produced a resonance set."""

    DENSE = "dense"
    ARNOLDI = "arnoldi"


@dataclass(frozen=True)
class Window:
    """Closed rectangle [re_min, re_max] x [im_min, im_max] of the plane."""

    re_min: float
    re_max: float
    im_min: float
    im_max: float

    def __post_init__(self) -> None:
        bounds = (self.re_min, self.re_max, self.im_min, self.im_max)
        if not np.all(np.isfinite(bounds)):
            raise ArgumentError(f"Window must be bounded, got {bounds}")
        if self.re_min > self.re_max or self.im_min > self.im_max:
            raise ArgumentError(f"Empty window {bounds}")

    def contains(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        return (
            (z.real >= self.re_min)
            & (z.real <= self.re_max)
            & (z.imag >= self.im_min)
            & (z.imag <= self.im_max)
        )

    @property
    def center(self) -> complex:
        return complex(0.5 * (self.re_min + self.re_max), 0.5 * (self.im_min + self.im_max))

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.re_max - self.re_min, self.im_max - self.im_min))


@dataclass
class ResonanceSet:
    """Certified eigenvalues of one truncated operator at one epsilon."""

    eigenvalues: np.ndarray
    residuals: np.ndarray
    epsilon: float
    solver: SolverKind
    truncation: Optional[FourierTruncation] = None
    right_vectors: Optional[np.ndarray] = None
    defect_flags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    shift: Optional[complex] = None
    krylov_dim: Optional[int] = None
    window: Optional[Window] = None

    def __post_init__(self) -> None:
        if self.defect_flags.size != self.eigenvalues.size:
            self.defect_flags = np.zeros(self.eigenvalues.size, dtype=bool)

    def __len__(self) -> int:
        return int(self.eigenvalues.size)

    def select(self, mask: np.ndarray) -> "ResonanceSet":
        vectors = None if self.right_vectors is None else self.right_vectors[:, mask]
        return replace(
            self,
            eigenvalues=self.eigenvalues[mask],
            residuals=self.residuals[mask],
            right_vectors=vectors,
            defect_flags=self.defect_flags[mask],
        )

    def restrict(self, window: Window) -> "ResonanceSet":
        restricted = self.select(window.contains(self.eigenvalues))
        restricted.window = window
        return restricted

    def nearest(self, z: complex) -> int:
        if not len(self):
            raise PreconditionError("Resonance set is empty")
        return int(np.argmin(np.abs(self.eigenvalues - z)))

    def boundary_mass(self, width: int = 0) -> np.ndarray:
        """Fraction of |v|^2 carried by modes with |k|_inf >= K - width."""
        if self.right_vectors is None or self.truncation is None:
            raise PreconditionError("Boundary mass needs right vectors and a truncation")
        mask = self.truncation.boundary_mask(width)
        power = np.abs(self.right_vectors) ** 2
        total = power.sum(axis=0)
        total[total == 0] = 1.0
        return power[mask].sum(axis=0) / total


def unpack_operator(op: OperatorLike) -> Tuple[Union[np.ndarray, sparse.spmatrix], float, Optional[FourierTruncation]]:
    if isinstance(op, OperatorMatrix):
        return op.entries, op.epsilon, op.truncation
    if sparse.issparse(op):
        return op, 0.0, None
    matrix = np.asarray(op, dtype=complex)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ArgumentError(f"Expected a square matrix, got shape {matrix.shape}")
    return matrix, 0.0, None


def one_norm(matrix: Union[np.ndarray, sparse.spmatrix]) -> float:
    if sparse.issparse(matrix):
        value = float(abs(matrix).sum(axis=0).max())
    else:
        value = float(np.linalg.norm(matrix, 1))
    return value if value > 0 else 1.0


def spectral_order(eigenvalues: np.ndarray) -> np.ndarray:
    """Descending imaginary part, ties by ascending real part."""
    return np.lexsort((eigenvalues.real, -eigenvalues.imag))


def certify(
    matrix: Union[np.ndarray, sparse.spmatrix], eigenvalues: np.ndarray, vectors: np.ndarray
) -> np.ndarray:
    """Relative residuals ||(M - lambda)v|| / (||M||_1 ||v||)."""
    product = matrix @ vectors
    diff = product - vectors * eigenvalues[None, :]
    scale = np.linalg.norm(vectors, axis=0)
    scale[scale == 0] = 1.0
    return np.linalg.norm(diff, axis=0) / (scale * one_norm(matrix))


def defectivity_flags(
    eigenvalues: np.ndarray,
    vectors: np.ndarray,
    scale: float,
    cluster_tol: float = 1e-6,
    rank_tol: float = 1e-7,
) -> np.ndarray:
    """
    Flag eigenvalue clusters whose eigenvectors do not span the cluster size.

    A cluster is a set of eigenvalues within cluster_tol * scale of each
    other; its geometric multiplicity is the numerical rank of the unit
    eigenvector block.
    """
    flags = np.zeros(eigenvalues.size, dtype=bool)
    unassigned = np.ones(eigenvalues.size, dtype=bool)
    for i in range(eigenvalues.size):
        if not unassigned[i]:
            continue
        members = unassigned & (np.abs(eigenvalues - eigenvalues[i]) <= cluster_tol * scale)
        unassigned &= ~members
        algebraic = int(members.sum())
        if algebraic < 2:
            continue
        block = vectors[:, members]
        block = block / np.linalg.norm(block, axis=0)
        singular = sla.svdvals(block)
        geometric = int(np.sum(singular > rank_tol))
        if geometric < algebraic:
            flags[members] = True
            logger.debug(
                f"Defective cluster at {eigenvalues[i]:.6g}: "
                f"algebraic {algebraic}, geometric {geometric}"
            )
    return flags


def dense_spectrum(
    op: OperatorLike,
    dense_limit: int = DEFAULT_DENSE_LIMIT,
    residual_tol: float = DEFAULT_RESIDUAL_TOL,
    compute_vectors: bool = True,
) -> ResonanceSet:
    """Full spectrum with certified residuals and defectivity flags."""
    matrix, epsilon, truncation = unpack_operator(op)
    n = matrix.shape[0]
    if n > dense_limit:
        raise PreconditionError(
            f"Dimension {n} exceeds dense limit {dense_limit}; use shift_invert_arnoldi"
        )
    dense = matrix.toarray() if sparse.issparse(matrix) else matrix

    try:
        eigenvalues, vectors = sla.eig(dense)
    except sla.LinAlgError as exc:
        raise SolverError(f"QR iteration did not converge: {exc}", stage="eigensolver") from exc

    order = spectral_order(eigenvalues)
    eigenvalues, vectors = eigenvalues[order], vectors[:, order]
    residuals = certify(dense, eigenvalues, vectors)
    flags = defectivity_flags(eigenvalues, vectors, one_norm(dense))

    result = ResonanceSet(
        eigenvalues=eigenvalues,
        residuals=residuals,
        epsilon=epsilon,
        solver=SolverKind.DENSE,
        truncation=truncation,
        right_vectors=vectors if compute_vectors else None,
        defect_flags=flags,
    )
    worst = float(residuals.max()) if residuals.size else 0.0
    if worst > residual_tol:
        raise SolverError(
            f"Residual certification failed: max residual {worst:.3e} > {residual_tol:.1e}",
            partial=result,
            stage="eigensolver",
        )
    logger.debug(f"Dense spectrum: n={n}, max residual {worst:.2e}, defective {int(flags.sum())}")
    return result


def _factorize(matrix: sparse.spmatrix, shift: complex, max_retries: int) -> Tuple[complex, object]:
    identity = sparse.identity(matrix.shape[0], dtype=complex, format="csc")
    sigma = complex(shift)
    for attempt in range(max_retries + 1):
        try:
            return sigma, spla.splu((matrix - sigma * identity).tocsc())
        except RuntimeError as exc:
            logger.warning(
                f"Singular factorization at shift {sigma} (attempt {attempt + 1}): {exc}"
            )
            sigma += SHIFT_PERTURBATION
    raise SolverError(
        f"Shift {shift} remained singular after {max_retries} perturbations",
        stage="eigensolver",
    )


def shift_invert_arnoldi(
    op: OperatorLike,
    shift: complex,
    count: int,
    tol: float = 1e-10,
    krylov_dim: Optional[int] = None,
    residual_tol: float = DEFAULT_RESIDUAL_TOL,
    max_retries: int = 3,
    max_restarts: Optional[int] = None,
) -> ResonanceSet:
    """
    The `count` eigenvalues nearest `shift`.

    Arnoldi runs on (M - shift)^{-1}; Ritz values theta map back as
    lambda = shift + 1/theta.
    """
    matrix, epsilon, truncation = unpack_operator(op)
    n = matrix.shape[0]
    if count < 1:
        raise ArgumentError(f"count must be positive, got {count}")
    if count > n:
        raise ArgumentError(f"count {count} exceeds dimension {n}")

    if count >= n - 1:
        logger.info(f"Arnoldi on n={n} with count={count}: falling back to dense")
        full = dense_spectrum(op, dense_limit=n, residual_tol=residual_tol)
        nearest = np.argsort(np.abs(full.eigenvalues - shift), kind="stable")[:count]
        nearest = nearest[spectral_order(full.eigenvalues[nearest])]
        result = full.select(nearest)
        result.shift = complex(shift)
        return result

    csc = sparse.csc_matrix(matrix, dtype=complex)
    sigma, lu = _factorize(csc, shift, max_retries)
    inverse = spla.LinearOperator((n, n), matvec=lu.solve, dtype=complex)

    ncv = krylov_dim or min(n, max(4 * count, 2 * count + 2, 20))
    if not count < ncv <= n:
        raise ArgumentError(f"Krylov dimension {ncv} must satisfy {count} < ncv <= {n}")

    rng = np.random.default_rng(0)
    v0 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    try:
        theta, vectors = spla.eigs(
            inverse, k=count, which="LM", v0=v0, ncv=ncv, tol=tol, maxiter=max_restarts
        )
    except spla.ArpackNoConvergence as exc:
        partial = sigma + 1.0 / np.asarray(exc.eigenvalues) if len(exc.eigenvalues) else None
        raise SolverError(
            f"Krylov iteration stagnated: {len(exc.eigenvalues)} of {count} converged",
            partial=partial,
            stage="eigensolver",
        ) from exc

    eigenvalues = sigma + 1.0 / theta
    order = spectral_order(eigenvalues)
    eigenvalues, vectors = eigenvalues[order], vectors[:, order]
    residuals = certify(csc, eigenvalues, vectors)

    result = ResonanceSet(
        eigenvalues=eigenvalues,
        residuals=residuals,
        epsilon=epsilon,
        solver=SolverKind.ARNOLDI,
        truncation=truncation,
        right_vectors=vectors,
        shift=sigma,
        krylov_dim=ncv,
    )
    worst = float(residuals.max())
    if worst > residual_tol:
        raise SolverError(
            f"Arnoldi residual {worst:.3e} exceeds {residual_tol:.1e}",
            partial=result,
            stage="eigensolver",
        )
    return result


@dataclass
class ResolventSolution:
    """Solution of (z - M)u = rhs with its conditioning."""

    solution: np.ndarray
    condition: float
    near_singular: bool
    relative_residual: float


class ResolventFactor:
    """LU factorization of z - M, reusable across right-hand sides."""

    def __init__(self, op: OperatorLike, z: complex, refine_steps: int = 2):
        matrix, _, _ = unpack_operator(op)
        self.z = complex(z)
        self.refine_steps = refine_steps
        self.size = matrix.shape[0]
        self.is_sparse = sparse.issparse(matrix)
        self._lu = None
        self._sparse_lu = None

        if self.is_sparse:
            identity = sparse.identity(self.size, dtype=complex, format="csc")
            self.shifted = (self.z * identity - matrix).tocsc()
            try:
                self._sparse_lu = spla.splu(self.shifted)
            except RuntimeError:
                self.condition = float("inf")
            else:
                inverse = spla.LinearOperator(
                    (self.size, self.size),
                    matvec=self._sparse_lu.solve,
                    rmatvec=lambda x: self._sparse_lu.solve(x, trans="H"),
                    dtype=complex,
                )
                self.condition = float(
                    spla.onenormest(self.shifted) * spla.onenormest(inverse)
                )
        else:
            self.shifted = self.z * np.eye(self.size, dtype=complex) - matrix
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                self._lu = sla.lu_factor(self.shifted, check_finite=False)
            gecon = sla.get_lapack_funcs("gecon", (self._lu[0],))
            rcond, _ = gecon(self._lu[0], np.linalg.norm(self.shifted, 1), norm="1")
            self.condition = float("inf") if rcond == 0 else float(1.0 / rcond)

        self.near_singular = not self.condition <= NEAR_SINGULAR_CONDITION

    def _raw_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.is_sparse:
            if self._sparse_lu is None:
                return np.full(rhs.shape, np.nan, dtype=complex)
            return self._sparse_lu.solve(rhs)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return sla.lu_solve(self._lu, rhs, check_finite=False)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve with iterative refinement; rhs may be a vector or a column block."""
        rhs = np.asarray(rhs, dtype=complex)
        if rhs.shape[0] != self.size:
            raise ArgumentError(f"Right-hand side of length {rhs.shape[0]} != {self.size}")
        u = self._raw_solve(rhs)
        if not np.all(np.isfinite(u)):
            return u
        for _ in range(self.refine_steps):
            u = u + self._raw_solve(rhs - self.shifted @ u)
        return u

    def residual(self, u: np.ndarray, rhs: np.ndarray) -> float:
        norm = np.linalg.norm(rhs)
        if norm == 0:
            return float(np.linalg.norm(u))
        return float(np.linalg.norm(rhs - self.shifted @ u) / norm)


def resolvent_solve(
    op: OperatorLike, z: complex, rhs: np.ndarray, refine_steps: int = 2
) -> ResolventSolution:
    """Solve (z - M)u = rhs; near-singular z is flagged, not raised."""
    factor = ResolventFactor(op, z, refine_steps)
    u = factor.solve(rhs)
    residual = factor.residual(u, np.asarray(rhs, dtype=complex)) if np.all(np.isfinite(u)) else float("inf")
    if factor.near_singular:
        logger.warning(f"Resolvent at z={z} is near-singular (cond ~ {factor.condition:.2e})")
    return ResolventSolution(u, factor.condition, factor.near_singular, residual)


def parabola_count(resonances: ResonanceSet, epsilon: float, c0: float) -> int:
    """Eigenvalues above the parabola Im = -eps |Re|^2 / C0."""
    if c0 <= 0:
        raise ArgumentError(f"C0 must be positive, got {c0}")
    lam = resonances.eigenvalues
    return int(np.sum(lam.imag > -epsilon * lam.real**2 / c0))


def calibrated_c0(field: FlowField, scale: float = 10.0, grid: int = 64) -> float:
    """C0 = scale * max |V| over a verification grid."""
    return scale * max(field.max_speed(grid), 1e-12)


def semiclassical_disc_count(resonances: ResonanceSet, h: float, gamma: float) -> int:
    """
    Eigenvalues with z = h lambda in |z - 1| < 1/2 and Im z > -gamma h.

    For eps well above h^2 this region is eigenvalue free.
    """
    if h <= 0 or gamma <= 0:
        raise ArgumentError(f"h and gamma must be positive, got h={h}, gamma={gamma}")
    z = h * resonances.eigenvalues
    return int(np.sum((np.abs(z - 1.0) < 0.5) & (z.imag > -gamma * h)))


def symmetry_defect(
    resonances: ResonanceSet,
    kind: OperatorKind = OperatorKind.FLOW_GENERATOR,
    boundary_fraction: float = 0.01,
) -> float:
    """
    Worst distance from a reflected eigenvalue to the spectrum.

    Flows reflect lambda -> -conj(lambda), maps lambda -> conj(lambda).
    Eigenvalues with >= boundary_fraction vector mass on |k|_inf = K are
    skipped when vectors are available.
    """
    lam = resonances.eigenvalues
    if not lam.size:
        return 0.0
    keep = np.ones(lam.size, dtype=bool)
    if resonances.right_vectors is not None and resonances.truncation is not None:
        keep = resonances.boundary_mass() < boundary_fraction
    mirrored = -np.conj(lam) if kind == OperatorKind.FLOW_GENERATOR else np.conj(lam)
    worst = 0.0
    for value in mirrored[keep]:
        worst = max(worst, float(np.min(np.abs(lam - value))))
    return worst


def match_distance(reference: np.ndarray, candidate: np.ndarray) -> float:
    """Max over candidates of the distance to the nearest reference value."""
    if not candidate.size:
        return 0.0
    if not reference.size:
        return float("inf")
    return float(np.max(np.min(np.abs(candidate[:, None] - reference[None, :]), axis=1)))


@dataclass
class TruncationConsistency:
    """Change of windowed eigenvalues between cutoffs K and K + step."""

    cutoff: int
    step: int
    max_shift: float
    counts: Tuple[int, int]
    parabola_counts: Optional[Tuple[int, int]] = None

    @property
    def converged(self) -> bool:
        return self.max_shift <= 1e-6 and self.counts[0] == self.counts[1]


def truncation_consistency(
    field_: FlowField,
    epsilon: float,
    cutoff: int,
    window: Window,
    step: int = 4,
    c0: Optional[float] = None,
    dense_limit: int = DEFAULT_DENSE_LIMIT,
) -> TruncationConsistency:
    """Compare windowed dense spectra at K and K + step."""
    spectra: List[ResonanceSet] = []
    for k in (cutoff, cutoff + step):
        trunc = FourierTruncation(field_.dimension, k)
        op = assemble_flow_generator(field_, epsilon, trunc)
        spectra.append(dense_spectrum(op, dense_limit=dense_limit, compute_vectors=False))

    coarse, fine = (s.restrict(window) for s in spectra)
    shift = max(
        match_distance(fine.eigenvalues, coarse.eigenvalues),
        match_distance(coarse.eigenvalues, fine.eigenvalues),
    )
    parabola = None
    if c0 is not None:
        parabola = (
            parabola_count(spectra[0], epsilon, c0),
            parabola_count(spectra[1], epsilon, c0),
        )
    report = TruncationConsistency(cutoff, step, shift, (len(coarse), len(fine)), parabola)
    logger.info(
        f"Truncation consistency K={cutoff}->{cutoff + step}: shift {shift:.2e}, "
        f"counts {report.counts}"
    )
    return report
