"""
Spectral projectors by contour quadrature of the resolvent, with
right/left eigenfunction extraction under the bilinear pairing v^T u.
"""

import logging
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla

from .eigensolver import (
    OperatorLike,
    ResolventFactor,
    ResonanceSet,
    one_norm,
    unpack_operator,
    defectivity_flags,
    dense_spectrum,
)
from .exceptions import ArgumentError, ContourError, PreconditionError
from .generator_assembly import FourierTruncation, assemble_flow_generator
from .phase_models import FlowField

logger = logging.getLogger(__name__)

DEFAULT_NODES = 32
ANNULUS_FRACTION = 0.1
RADIUS_FLOOR = 1e-3


@dataclass
class Projector:
    """Quadrature approximation of (1/2 pi i) contour integral of (z - M)^{-1}."""

    matrix: np.ndarray
    center: complex
    radius: float
    nodes: int
    trace: complex
    rank_estimate: int
    idempotency_defect: float
    commutation_defect: float
    accepted: bool

    def summary(self) -> dict:
        return {
            "center": self.center,
            "radius": self.radius,
            "nodes": self.nodes,
            "trace": self.trace,
            "rank": self.rank_estimate,
            "idempotency_defect": self.idempotency_defect,
            "commutation_defect": self.commutation_defect,
            "accepted": self.accepted,
        }


def _dense(op: OperatorLike) -> np.ndarray:
    matrix, _, _ = unpack_operator(op)
    return matrix.toarray() if hasattr(matrix, "toarray") else np.asarray(matrix, dtype=complex)


def check_annulus(
    eigenvalues: np.ndarray, center: complex, radius: float, fraction: float = ANNULUS_FRACTION
) -> None:
    """Raise ContourError if an eigenvalue lies within fraction*radius of the circle."""
    distance = np.abs(np.asarray(eigenvalues) - center)
    close = np.abs(distance - radius) < fraction * radius
    if np.any(close):
        offender = np.asarray(eigenvalues)[close][0]
        raise ContourError(
            f"Eigenvalue {offender:.6g} lies within {fraction:.0%} of the contour "
            f"|z - {center}| = {radius}; change the radius"
        )


def auto_radius(
    eigenvalues: np.ndarray, center: complex, group_tol: float = 1e-8
) -> float:
    """
    Radius halfway between the enclosed group and the nearest excluded eigenvalue.

    The group is every eigenvalue within group_tol of the one nearest center.
    """
    distance = np.sort(np.abs(np.asarray(eigenvalues) - center))
    if distance.size == 0:
        raise PreconditionError("No eigenvalues to place a contour around")
    inner = distance[distance <= distance[0] + group_tol]
    outer = distance[distance > distance[0] + group_tol]
    if outer.size == 0:
        return max(2.0 * inner[-1], RADIUS_FLOOR)
    edge = inner[-1]
    return max(edge + 0.5 * (outer[0] - edge), RADIUS_FLOOR)


def contour_projector(
    op: OperatorLike,
    center: complex,
    radius: float,
    nodes: int = DEFAULT_NODES,
    resonances: Optional[ResonanceSet] = None,
    executor: Optional[Executor] = None,
    tolerance: float = 1e-6,
) -> Projector:
    """
    Trapezoid rule on z_j = center + radius e^{i theta_j}:
    Pi = (1/M) sum_j radius e^{i theta_j} (z_j - M)^{-1}.
    """
    if nodes < 8:
        raise ArgumentError(f"Need at least 8 quadrature nodes, got {nodes}")
    if radius <= 0:
        raise ArgumentError(f"Contour radius must be positive, got {radius}")
    if resonances is not None:
        check_annulus(resonances.eigenvalues, center, radius)

    matrix = _dense(op)
    n = matrix.shape[0]
    identity = np.eye(n, dtype=complex)
    angles = 2.0 * np.pi * np.arange(nodes) / nodes

    def node_term(theta: float) -> np.ndarray:
        weight = radius * np.exp(1j * theta)
        factor = ResolventFactor(matrix, center + weight)
        if factor.near_singular:
            raise ContourError(
                f"Near-singular resolvent at node {center + weight:.6g} "
                f"(cond ~ {factor.condition:.2e}); change the radius"
            )
        return weight * factor.solve(identity)

    mapper = executor.map if executor is not None else map
    terms = list(mapper(node_term, angles))
    projector = np.zeros((n, n), dtype=complex)
    for term in terms:
        projector += term
    projector /= nodes

    trace = complex(np.trace(projector))
    rank = int(round(trace.real))
    idempotency = float(np.linalg.norm(projector @ projector - projector, 2))
    commutation = float(
        np.linalg.norm(projector @ matrix - matrix @ projector, 2) / one_norm(matrix)
    )
    accepted = (
        abs(trace - rank) <= tolerance
        and idempotency <= tolerance
        and commutation <= tolerance
    )
    if not accepted:
        logger.warning(
            f"Projector at {center} (r={radius}) not accepted: trace {trace:.6g}, "
            f"idempotency {idempotency:.2e}, commutation {commutation:.2e}"
        )
    return Projector(
        projector, complex(center), float(radius), nodes, trace, rank, idempotency, commutation, accepted
    )


def schur_projector(
    op: OperatorLike,
    select: Optional[Callable[[complex], bool]] = None,
    center: Optional[complex] = None,
    radius: Optional[float] = None,
) -> np.ndarray:
    """
    Invariant-subspace projector from a reordered Schur form.

    With T = [[T11, T12], [0, T22]] and T11 X - X T22 = T12, the projector is
    Z [[I, X], [0, 0]] Z^H.
    """
    if select is None:
        if center is None or radius is None:
            raise ArgumentError("schur_projector needs `select` or `center` and `radius`")
        select = lambda z: abs(z - center) < radius  # noqa: E731

    matrix = _dense(op)
    n = matrix.shape[0]
    t, z, k = sla.schur(matrix, output="complex", sort=select)
    block = np.zeros((n, n), dtype=complex)
    if k == 0:
        return block
    block[:k, :k] = np.eye(k)
    if k < n:
        block[:k, k:] = sla.solve_sylvester(t[:k, :k], -t[k:, k:], t[:k, k:])
    return z @ block @ z.conj().T


@dataclass
class EigenfunctionSet:
    """Right/left eigenvectors of one projector group."""

    eigenvalues: np.ndarray
    right: np.ndarray
    left: np.ndarray
    biorthogonality_defect: float
    defective: bool = False
    chain: Optional[np.ndarray] = None

    @property
    def chain_length(self) -> int:
        return 0 if self.chain is None else int(self.chain.shape[1])


def _range_basis(projector: np.ndarray, rank: int) -> np.ndarray:
    u, _, _ = sla.svd(projector)
    return u[:, :rank]


def _ritz_pairs(matrix: np.ndarray, basis: np.ndarray):
    small = basis.conj().T @ matrix @ basis
    values, vectors = sla.eig(small)
    return small, values, vectors


def _inverse_iteration(
    matrix: np.ndarray, values: np.ndarray, vectors: np.ndarray, scale: float
) -> np.ndarray:
    offset = 1e-8 * scale * (1 + 1j) / np.sqrt(2.0)
    refined = np.empty_like(vectors)
    for j, mu in enumerate(values):
        factor = ResolventFactor(matrix, mu + offset, refine_steps=0)
        u = factor.solve(vectors[:, j])
        if not np.all(np.isfinite(u)):
            u = vectors[:, j]
        refined[:, j] = u / np.linalg.norm(u)
    return refined


def _jordan_chain(small: np.ndarray, mu: complex, basis: np.ndarray, tol: float) -> np.ndarray:
    shifted = small - mu * np.eye(small.shape[0])
    _, _, vh = sla.svd(shifted)
    chain = [vh[-1].conj()]
    while len(chain) < small.shape[0]:
        nxt, *_ = np.linalg.lstsq(shifted, chain[-1], rcond=None)
        if np.linalg.norm(shifted @ nxt - chain[-1]) > tol * max(1.0, np.linalg.norm(nxt)):
            break
        chain.append(nxt)
    return basis @ np.column_stack(chain)


def eigenfunctions(op: OperatorLike, projector: Projector) -> EigenfunctionSet:
    """
    Right vectors from Rayleigh-Ritz on range(Pi) plus one inverse-iteration
    step; left vectors from the transpose problem on range(Pi^T). Normalized
    so that v_j^T u_j = 1.
    """
    m = projector.rank_estimate
    if m < 1 or abs(projector.trace - m) > 1e-6:
        raise PreconditionError(
            f"Projector trace {projector.trace:.6g} is not a positive integer"
        )
    matrix = _dense(op)
    scale = one_norm(matrix)

    basis = _range_basis(projector.matrix, m)
    small, values, ritz = _ritz_pairs(matrix, basis)
    flags = defectivity_flags(values, ritz, scale)
    if np.any(flags):
        mu = complex(values[flags].mean())
        chain = _jordan_chain(small, mu, basis, tol=1e-6)
        logger.warning(f"Defective group at {mu:.6g}: Jordan chain of length {chain.shape[1]}")
        return EigenfunctionSet(
            eigenvalues=values,
            right=basis @ ritz,
            left=np.zeros_like(basis),
            biorthogonality_defect=float("nan"),
            defective=True,
            chain=chain,
        )

    right = _inverse_iteration(matrix, values, basis @ ritz, scale)

    left_basis = _range_basis(projector.matrix.T, m)
    _, left_values, left_ritz = _ritz_pairs(matrix.T, left_basis)
    available = list(range(m))
    order = []
    for mu in values:
        pick = min(available, key=lambda i: (abs(left_values[i] - mu), i))
        available.remove(pick)
        order.append(pick)
    left = _inverse_iteration(
        matrix.T, left_values[order], left_basis @ left_ritz[:, order], scale
    )

    gram = left.T @ right
    separation = np.abs(values[:, None] - values[None, :]) + np.eye(m) * np.inf
    if m == 1 or np.min(separation) > 1e-8 * scale:
        left = left / np.diag(gram)[None, :]
    else:
        left = left @ np.linalg.inv(gram).T

    defect = float(np.max(np.abs(left.T @ right - np.eye(m))))
    return EigenfunctionSet(values, right, left, defect)


@dataclass
class ContinuityReport:
    """Projector change between two viscosities on the same contour."""

    difference: float
    ratio: float
    epsilons: tuple
    traces: tuple


def projector_continuity(
    field: FlowField,
    center: complex,
    radius: float,
    epsilon_1: float,
    epsilon_2: float,
    cutoff: int,
    nodes: int = DEFAULT_NODES,
    executor: Optional[Executor] = None,
) -> ContinuityReport:
    """||Pi_{eps1} - Pi_{eps2}||_2 and its ratio to |eps1 - eps2|."""
    if epsilon_1 == epsilon_2:
        raise ArgumentError("projector_continuity needs two distinct epsilons")
    trunc = FourierTruncation(field.dimension, cutoff)
    projectors: List[Projector] = []
    for eps in (epsilon_1, epsilon_2):
        op = assemble_flow_generator(field, eps, trunc)
        spectrum = dense_spectrum(op, compute_vectors=False)
        projectors.append(
            contour_projector(op, center, radius, nodes, resonances=spectrum, executor=executor)
        )
    difference = float(np.linalg.norm(projectors[0].matrix - projectors[1].matrix, 2))
    ratio = difference / abs(epsilon_1 - epsilon_2)
    logger.info(
        f"Projector continuity at {center}: ||dPi|| = {difference:.3e}, ratio {ratio:.3e}"
    )
    return ContinuityReport(
        difference, ratio, (epsilon_1, epsilon_2), (projectors[0].trace, projectors[1].trace)
    )


def group_projectors(
    op: OperatorLike,
    centers: Sequence[complex],
    radii: Union[float, Sequence[float]],
    nodes: int = DEFAULT_NODES,
    executor: Optional[Executor] = None,
) -> List[Projector]:
    """Contour projectors over several disjoint eigenvalue groups."""
    if np.isscalar(radii):
        radii = [float(radii)] * len(centers)  # type: ignore[arg-type]
    return [
        contour_projector(op, c, r, nodes, executor=executor)
        for c, r in zip(centers, radii)  # type: ignore[arg-type]
    ]
