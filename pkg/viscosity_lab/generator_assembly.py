"""
Generator Assembly.

Galerkin matrices of the regularized generator P_eps = (1/i)V + i eps Lap on
the Fourier basis of T^d, and of the noisy Koopman operator G_eps o f* for
torus maps.

Conventions: modes e^{ik.x} with integer k, normalized measure dx/(2pi)^d,
so M[k', k] is the e^{ik'.x} coefficient of P_eps e^{ik.x}.
"""

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from .exceptions import ArgumentError
from .phase_models import FlowField, MapSystem, TWO_PI

logger = logging.getLogger(__name__)

DEFAULT_SPARSE_THRESHOLD = 4096

Matrix = Union[np.ndarray, sparse.csr_matrix]


class OperatorKind(Enum):
    """Operator families the lab assembles."""

    FLOW_GENERATOR = "flow_generator"
    NOISY_KOOPMAN = "noisy_koopman"


@dataclass(frozen=True)
class FourierTruncation:
    """Modes with |k|_inf <= cutoff, indexed lexicographically."""

    dimension: int
    cutoff: int

    def __post_init__(self) -> None:
        if self.dimension < 1 or self.cutoff < 0:
            raise ArgumentError(
                f"Invalid truncation d={self.dimension}, K={self.cutoff}"
            )

    @property
    def side(self) -> int:
        return 2 * self.cutoff + 1

    @property
    def size(self) -> int:
        return self.side**self.dimension

    @cached_property
    def modes(self) -> np.ndarray:
        span = range(-self.cutoff, self.cutoff + 1)
        return np.array(list(itertools.product(span, repeat=self.dimension)), dtype=np.int64)

    @cached_property
    def squared_norms(self) -> np.ndarray:
        return np.sum(self.modes**2, axis=1)

    @cached_property
    def max_norms(self) -> np.ndarray:
        return np.max(np.abs(self.modes), axis=1)

    def indices(self, ks: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Indices of modes ``ks`` (shape (n, d)) and a mask of those inside."""
        ks = np.atleast_2d(np.asarray(ks, dtype=np.int64))
        inside = np.all(np.abs(ks) <= self.cutoff, axis=1)
        shifted = ks + self.cutoff
        idx = np.zeros(ks.shape[0], dtype=np.int64)
        for j in range(self.dimension):
            idx = idx * self.side + shifted[:, j]
        return np.where(inside, idx, -1), inside

    def index(self, k: Sequence[int]) -> int:
        idx, inside = self.indices(np.asarray([k]))
        if not inside[0]:
            raise ArgumentError(f"Mode {tuple(k)} outside truncation K={self.cutoff}")
        return int(idx[0])

    def reflection(self) -> np.ndarray:
        """Permutation p with modes[p[i]] == -modes[i]."""
        return np.arange(self.size)[::-1].copy()

    def boundary_mask(self, width: int = 0) -> np.ndarray:
        """Modes with |k|_inf >= cutoff - width."""
        return self.max_norms >= self.cutoff - width


@dataclass(frozen=True)
class OperatorMatrix:
    """A truncated operator with its basis metadata."""

    kind: OperatorKind
    entries: Matrix
    epsilon: float
    truncation: FourierTruncation
    source: Union[FlowField, MapSystem]
    dropped_mass_bound: float = 0.0

    @property
    def size(self) -> int:
        return self.truncation.size

    @property
    def is_sparse(self) -> bool:
        return sparse.issparse(self.entries)

    def dense(self) -> np.ndarray:
        if self.is_sparse:
            return self.entries.toarray()
        return np.asarray(self.entries)

    def csr(self) -> sparse.csr_matrix:
        if self.is_sparse:
            return self.entries.tocsr()
        return sparse.csr_matrix(self.entries)

    def norm(self) -> float:
        """Matrix 1-norm, the scale used for residual certification."""
        if self.is_sparse:
            return float(abs(self.entries).sum(axis=0).max())
        return float(np.linalg.norm(self.entries, 1))

    def triplets(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row-major sorted (row, col, value) nonzeros."""
        coo = self.csr().tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]


def _advection_bands(
    field: FlowField, trunc: FourierTruncation
) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """
    Bands of the advection part (1/i)V.grad.

    Each band is (weights, src, dst): M[dst, src] += weights, from the field
    coefficient at shift m = k' - k, weight sum_j k_j c_{j,m}.
    """
    modes = trunc.modes
    shifts: dict = {}
    for j, table in enumerate(field.fourier_coefficients()):
        for m, c in table.items():
            if c == 0:
                continue
            weights = shifts.setdefault(m, np.zeros(trunc.size, dtype=complex))
            weights += c * modes[:, j]

    bands = []
    for m in sorted(shifts):
        dst, inside = trunc.indices(modes + np.asarray(m, dtype=np.int64))
        src = np.nonzero(inside)[0]
        weights = shifts[m][src]
        keep = weights != 0
        bands.append((weights[keep], src[keep], dst[inside][keep]))
    return bands


def _store(
    rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, size: int, storage: str, threshold: int
) -> Matrix:
    matrix = sparse.coo_matrix((vals, (rows, cols)), shape=(size, size)).tocsr()
    if storage == "dense" or (storage == "auto" and size <= threshold):
        return matrix.toarray()
    return matrix


def assemble_flow_generator(
    field: FlowField,
    epsilon: float,
    trunc: FourierTruncation,
    storage: str = "auto",
    sparse_threshold: int = DEFAULT_SPARSE_THRESHOLD,
) -> OperatorMatrix:
    """Galerkin matrix of P_eps = (1/i)V + i eps Lap on the truncation."""
    if epsilon < 0:
        raise ArgumentError(
            f"epsilon must be >= 0, got {epsilon}; use the conjugate spectrum "
            "for the negative-viscosity limit"
        )
    if not field.on_torus:
        raise ArgumentError(f"Field {field.name} cannot be assembled (not on a torus)")
    if field.dimension != trunc.dimension:
        raise ArgumentError(
            f"Field dimension {field.dimension} != truncation dimension {trunc.dimension}"
        )
    if field.max_harmonic > trunc.cutoff:
        raise ArgumentError(
            f"Field harmonic {field.max_harmonic} exceeds cutoff {trunc.cutoff}"
        )

    rows, cols, vals = [], [], []
    for weights, src, dst in _advection_bands(field, trunc):
        rows.append(dst)
        cols.append(src)
        vals.append(weights)

    diagonal = np.arange(trunc.size)
    rows.append(diagonal)
    cols.append(diagonal)
    vals.append(-1j * epsilon * trunc.squared_norms.astype(float))

    entries = _store(
        np.concatenate(rows),
        np.concatenate(cols),
        np.concatenate(vals).astype(complex),
        trunc.size,
        storage,
        sparse_threshold,
    )

    logger.debug(
        f"Assembled P_eps for {field.name}: eps={epsilon}, K={trunc.cutoff}, "
        f"size={trunc.size}, sparse={sparse.issparse(entries)}"
    )
    return OperatorMatrix(OperatorKind.FLOW_GENERATOR, entries, float(epsilon), trunc, field)


def _perturbation_factors(
    system: MapSystem, k: np.ndarray, grid: np.ndarray, n: int
) -> np.ndarray:
    """FFT coefficients of e^{i k.p(x)} on an n x n grid."""
    displacement = system.perturbation.velocity(grid)  # type: ignore[union-attr]
    phase = displacement @ k.astype(float)
    samples = np.exp(1j * phase).reshape(n, n)
    return np.fft.fft2(samples) / float(n * n)


def assemble_noisy_koopman(
    system: MapSystem,
    epsilon: float,
    trunc: FourierTruncation,
    storage: str = "auto",
    sparse_threshold: int = DEFAULT_SPARSE_THRESHOLD,
    quadrature_points: Optional[int] = None,
) -> OperatorMatrix:
    """
    Matrix of G_eps o f* with the heat-kernel mollifier e^{-eps |k|^2}.

    f* sends e^{ik.x} to e^{i(A^T k).x} e^{ik.p(x)}; target modes outside
    the truncation are dropped.
    """
    if epsilon <= 0:
        raise ArgumentError(f"Noisy Koopman needs epsilon > 0, got {epsilon}")
    if trunc.dimension != 2:
        raise ArgumentError("Torus maps act on T^2 truncations")

    modes = trunc.modes
    transposed = system.integer_matrix.T
    targets = modes @ transposed.T  # row i holds A^T k_i
    damping = np.exp(-epsilon * trunc.squared_norms.astype(float))

    if system.perturbation is None:
        dst, inside = trunc.indices(targets)
        src = np.nonzero(inside)[0]
        entries = _store(
            dst[inside],
            src,
            damping[dst[inside]].astype(complex),
            trunc.size,
            storage,
            sparse_threshold,
        )
    else:
        n = quadrature_points or max(16 * trunc.cutoff, 32)
        if n < 8 * trunc.cutoff:
            raise ArgumentError(f"Quadrature grid {n} below 8K = {8 * trunc.cutoff}")
        axis = np.linspace(0.0, TWO_PI, n, endpoint=False)
        mesh = np.meshgrid(axis, axis, indexing="ij")
        grid = np.stack([m.ravel() for m in mesh], axis=-1)

        rows, cols, vals = [], [], []
        for col in range(trunc.size):
            factors = _perturbation_factors(system, modes[col], grid, n)
            offsets = np.mod(modes - targets[col], n)
            column = damping * factors[offsets[:, 0], offsets[:, 1]]
            nonzero = np.nonzero(column)[0]
            rows.append(nonzero)
            cols.append(np.full(nonzero.size, col))
            vals.append(column[nonzero])
        entries = _store(
            np.concatenate(rows),
            np.concatenate(cols),
            np.concatenate(vals),
            trunc.size,
            storage,
            sparse_threshold,
        )

    bound = float(np.exp(-epsilon * trunc.cutoff**2))
    logger.debug(
        f"Assembled noisy Koopman for {system.name}: eps={epsilon}, "
        f"K={trunc.cutoff}, dropped-mass bound {bound:.3e}"
    )
    return OperatorMatrix(
        OperatorKind.NOISY_KOOPMAN, entries, float(epsilon), trunc, system, bound
    )


def apply(
    op: OperatorMatrix, coeffs: np.ndarray, matrix_free: bool = False
) -> np.ndarray:
    """Matrix-vector product, bandwise for flow generators when requested."""
    u = np.asarray(coeffs, dtype=complex)
    if u.shape != (op.size,):
        raise ArgumentError(f"Vector of shape {u.shape} does not match size {op.size}")

    if not matrix_free or op.kind != OperatorKind.FLOW_GENERATOR:
        return np.asarray(op.entries @ u).ravel()

    out = -1j * op.epsilon * op.truncation.squared_norms * u
    for weights, src, dst in _advection_bands(op.source, op.truncation):  # type: ignore[arg-type]
        np.add.at(out, dst, weights * u[src])
    return out


@dataclass
class ConjugationReport:
    """Max violation of the reality identity under k -> -k."""

    violation: float
    identity: str


def conjugate_spectrum_check(op: OperatorMatrix) -> ConjugationReport:
    """
    Matrix form of conj(P u) = -P conj(u) (flows) or conj(K u) = K conj(u) (maps).

    With R the reflection k -> -k, checks conj(M) = -R M R, resp. R K R.
    """
    p = op.truncation.reflection()
    matrix = op.csr()
    reflected = matrix[p][:, p]
    if op.kind == OperatorKind.FLOW_GENERATOR:
        diff = matrix.conj() + reflected
        identity = "conj(M) = -RMR"
    else:
        diff = matrix.conj() - reflected
        identity = "conj(K) = RKR"
    data = diff.tocsr().data
    violation = float(np.max(np.abs(data))) if data.size else 0.0
    return ConjugationReport(violation, identity)


def imaginary_bound(field: FlowField, grid: int = 64) -> float:
    """max F = 1/2 div V; every eigenvalue of P_eps has Im <= this."""
    return field.max_half_divergence(grid)
