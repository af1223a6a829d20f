"""
Phase Space Models.

Catalog of model dynamical systems used by the lab: trigonometric vector
fields on flat tori, closed-form fields on R^3 (the Nose-Hoover pair),
linear and perturbed torus maps, and contact one-forms.

All model objects are frozen dataclasses; evaluation is pure and may be
called from any number of threads.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ArgumentError, EvaluationError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi

Mode = Tuple[int, ...]


class FieldRepresentation(Enum):
    """How a vector field is stored."""

    TORUS_TRIG = "torus_trig"  # real trig polynomial on [0, 2pi)^d
    CLOSED_FORM_R3 = "closed_form_r3"  # named evaluator on R^3


@dataclass(frozen=True)
class TrigTerm:
    """One real harmonic ``cos_coeff*cos(k.x) + sin_coeff*sin(k.x)``."""

    k: Mode
    cos_coeff: float = 0.0
    sin_coeff: float = 0.0


def _nose_hoover_w(x: np.ndarray) -> np.ndarray:
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([x2, -x1 + x2 * x3, 1.0 - x2**2], axis=-1)


def _nose_hoover_w_jacobian(x: np.ndarray) -> np.ndarray:
    x2, x3 = x[..., 1], x[..., 2]
    zero = np.zeros_like(x2)
    one = np.ones_like(x2)
    rows = [
        np.stack([zero, one, zero], axis=-1),
        np.stack([-one, x3, x2], axis=-1),
        np.stack([zero, -2.0 * x2, zero], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def _nose_hoover_v(x: np.ndarray) -> np.ndarray:
    scale = np.exp(0.5 * np.sum(x**2, axis=-1))
    return scale[..., None] * _nose_hoover_w(x)


def _nose_hoover_v_jacobian(x: np.ndarray) -> np.ndarray:
    # d_j V_i = e^{|x|^2/2} (x_j W_i + d_j W_i)
    scale = np.exp(0.5 * np.sum(x**2, axis=-1))
    w = _nose_hoover_w(x)
    outer = w[..., :, None] * x[..., None, :]
    return scale[..., None, None] * (outer + _nose_hoover_w_jacobian(x))


def _constant_vertical(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x, dtype=float)
    out[..., 2] = 1.0
    return out


def _constant_vertical_jacobian(x: np.ndarray) -> np.ndarray:
    return np.zeros(x.shape + (3,), dtype=float)


_CLOSED_FORMS: Dict[
    str,
    Tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]],
] = {
    "nose_hoover_W": (_nose_hoover_w, _nose_hoover_w_jacobian),
    "nose_hoover_V": (_nose_hoover_v, _nose_hoover_v_jacobian),
    "vertical_r3": (_constant_vertical, _constant_vertical_jacobian),
}


@dataclass(frozen=True)
class FlowField:
    """
    A vector field V on a model phase space.

    ``torus_trig`` fields store per-component lists of real harmonics, which
    keeps the Fourier coefficients Hermitian-symmetric by construction.
    ``closed_form_r3`` fields reference a named evaluator.
    """

    name: str
    dimension: int
    representation: FieldRepresentation
    components: Tuple[Tuple[TrigTerm, ...], ...] = ()
    evaluator: Optional[str] = None

    def __post_init__(self) -> None:
        if not 1 <= self.dimension <= 3:
            raise ArgumentError(f"Field dimension must be 1-3, got {self.dimension}")

        if self.representation == FieldRepresentation.TORUS_TRIG:
            if len(self.components) != self.dimension:
                raise ArgumentError(
                    f"Field {self.name} needs {self.dimension} components, "
                    f"got {len(self.components)}"
                )
            for component in self.components:
                for term in component:
                    if len(term.k) != self.dimension:
                        raise ArgumentError(
                            f"Mode {term.k} does not match dimension {self.dimension}"
                        )
        else:
            if self.dimension != 3:
                raise ArgumentError("Closed-form fields live on R^3")
            if self.evaluator not in _CLOSED_FORMS:
                raise ArgumentError(f"Unknown closed-form evaluator: {self.evaluator}")

    @property
    def on_torus(self) -> bool:
        return self.representation == FieldRepresentation.TORUS_TRIG

    @property
    def max_harmonic(self) -> int:
        """Largest max-norm |k| over all harmonics (0 for closed forms)."""
        orders = [
            max((abs(k) for k in term.k), default=0)
            for component in self.components
            for term in component
        ]
        return max(orders, default=0)

    def fourier_coefficients(self) -> List[Dict[Mode, complex]]:
        """Per-component Fourier coefficients c_k with V_j = sum c_k e^{ik.x}."""
        if not self.on_torus:
            raise ArgumentError(f"Field {self.name} has no Fourier representation")

        coefficients: List[Dict[Mode, complex]] = []
        for component in self.components:
            table: Dict[Mode, complex] = {}
            for term in component:
                k = tuple(int(v) for v in term.k)
                if all(v == 0 for v in k):
                    table[k] = table.get(k, 0j) + term.cos_coeff
                    continue
                minus_k = tuple(-v for v in k)
                table[k] = table.get(k, 0j) + 0.5 * (term.cos_coeff - 1j * term.sin_coeff)
                table[minus_k] = table.get(minus_k, 0j) + 0.5 * (
                    term.cos_coeff + 1j * term.sin_coeff
                )
            coefficients.append(table)
        return coefficients

    def velocity(self, points: np.ndarray) -> np.ndarray:
        """Vectorized field values, ``points`` of shape (..., d)."""
        x = np.asarray(points, dtype=float)
        if not self.on_torus:
            return _CLOSED_FORMS[self.evaluator][0](x)

        out = np.zeros(x.shape, dtype=float)
        for j, component in enumerate(self.components):
            for term in component:
                phase = x @ np.asarray(term.k, dtype=float)
                if term.cos_coeff:
                    out[..., j] += term.cos_coeff * np.cos(phase)
                if term.sin_coeff:
                    out[..., j] += term.sin_coeff * np.sin(phase)
        return out

    def jacobian(self, points: np.ndarray) -> np.ndarray:
        """Vectorized derivative matrix J[i, j] = d_j V_i, shape (..., d, d)."""
        x = np.asarray(points, dtype=float)
        if not self.on_torus:
            return _CLOSED_FORMS[self.evaluator][1](x)

        out = np.zeros(x.shape + (self.dimension,), dtype=float)
        for i, component in enumerate(self.components):
            for term in component:
                k = np.asarray(term.k, dtype=float)
                phase = x @ k
                slope = np.asarray(-term.cos_coeff * np.sin(phase) + term.sin_coeff * np.cos(phase))
                out[..., i, :] += slope[..., None] * k
        return out

    def divergence_at(self, points: np.ndarray) -> np.ndarray:
        return np.trace(self.jacobian(points), axis1=-2, axis2=-1)

    def sample_grid(self, n: int = 32) -> np.ndarray:
        """Uniform periodic grid on the torus, shape (n**d, d)."""
        axis = np.linspace(0.0, TWO_PI, n, endpoint=False)
        mesh = np.meshgrid(*([axis] * self.dimension), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def max_speed(self, n: int = 32) -> float:
        """max |V| over a verification grid (torus fields only)."""
        values = self.velocity(self.sample_grid(n))
        return float(np.max(np.linalg.norm(values, axis=-1)))

    def max_half_divergence(self, n: int = 32) -> float:
        """max of F = 1/2 div V over a verification grid (torus fields only)."""
        return float(0.5 * np.max(self.divergence_at(self.sample_grid(n))))


def _check_point(field: FlowField, point: Sequence[float]) -> np.ndarray:
    x = np.asarray(point, dtype=float)
    if x.shape != (field.dimension,):
        raise ArgumentError(
            f"Point of shape {x.shape} does not match field dimension "
            f"{field.dimension}"
        )
    return x


def eval_field(field: FlowField, point: Sequence[float]) -> np.ndarray:
    """Exact value of the field at one point."""
    x = _check_point(field, point)
    value = field.velocity(x)
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"Field {field.name} is not finite at {x.tolist()}")
    return value


def divergence(field: FlowField, point: Sequence[float]) -> float:
    """div V at one point (flat torus or Euclidean volume)."""
    x = _check_point(field, point)
    return float(field.divergence_at(x))


def field_jacobian(field: FlowField, point: Sequence[float]) -> np.ndarray:
    return field.jacobian(_check_point(field, point))


def trig_field(
    name: str, components: Sequence[Sequence[Tuple[Sequence[int], float, float]]]
) -> FlowField:
    """Build a torus field from per-component (k, cos, sin) triples."""
    if not components:
        raise ArgumentError("A trig field needs at least one component")
    dimension = len(components)
    parsed = tuple(
        tuple(TrigTerm(tuple(int(v) for v in k), float(a), float(b)) for k, a, b in comp)
        for comp in components
    )
    return FlowField(name, dimension, FieldRepresentation.TORUS_TRIG, parsed)


def rotation_field(speed: float = 1.0) -> FlowField:
    """Rotation speed * d_theta on the circle."""
    return trig_field("rotation", [[((0,), speed, 0.0)]])


def translation_field(a: float = 1.0, b: float = float(np.sqrt(2.0))) -> FlowField:
    """Constant translation a d_1 + b d_2 on T^2."""
    return trig_field("translation", [[((0, 0), a, 0.0)], [((0, 0), b, 0.0)]])


def shear_field(amplitude: float = 1.0, a: float = 0.0, b: float = 0.0) -> FlowField:
    """(amplitude sin x2 + a) d_1 + b d_2 on T^2 (divergence free)."""
    first = [((0, 1), 0.0, amplitude)]
    if a:
        first.append(((0, 0), a, 0.0))
    second = [((0, 0), b, 0.0)] if b else []
    return trig_field("shear", [first, second])


def vertical_field() -> FlowField:
    """d_3 on T^3."""
    return trig_field("vertical", [[], [], [((0, 0, 0), 1.0, 0.0)]])


def nose_hoover_field(kind: str = "W") -> FlowField:
    if kind not in ("W", "V"):
        raise ArgumentError(f"Nose-Hoover field kind must be W or V, got {kind}")
    name = f"nose_hoover_{kind}"
    return FlowField(name, 3, FieldRepresentation.CLOSED_FORM_R3, evaluator=name)


BUILTIN_FIELDS: Dict[str, Callable[..., FlowField]] = {
    "rotation": rotation_field,
    "translation": translation_field,
    "shear": shear_field,
    "vertical": vertical_field,
    "nose_hoover_W": lambda: nose_hoover_field("W"),
    "nose_hoover_V": lambda: nose_hoover_field("V"),
    "vertical_r3": lambda: FlowField(
        "vertical_r3", 3, FieldRepresentation.CLOSED_FORM_R3, evaluator="vertical_r3"
    ),
}


def builtin_field(name: str, **params: float) -> FlowField:
    if name not in BUILTIN_FIELDS:
        raise ArgumentError(f"Unknown built-in field: {name}")
    return BUILTIN_FIELDS[name](**params)


@dataclass(frozen=True)
class MapSystem:
    """
    Torus map f(x) = A x + p(x) mod 2pi with integer A, |det A| = 1.

    The optional perturbation p is a two-component torus_trig field.
    """

    matrix: Tuple[Tuple[int, int], Tuple[int, int]]
    perturbation: Optional[FlowField] = None
    name: str = "cat_map"
    verification_grid: int = 64

    def __post_init__(self) -> None:
        a = self.integer_matrix
        if a.shape != (2, 2):
            raise ArgumentError("Map matrix must be 2x2")
        det = int(round(np.linalg.det(a)))
        if abs(det) != 1:
            raise ArgumentError(f"Map matrix must have determinant +-1, got {det}")

        if self.perturbation is not None:
            if not self.perturbation.on_torus or self.perturbation.dimension != 2:
                raise ArgumentError("Map perturbation must be a T^2 trig field")
            grid = self.perturbation.sample_grid(self.verification_grid)
            dets = np.linalg.det(self.jacobian(grid))
            if np.min(np.abs(dets)) < 1e-8:
                raise ArgumentError(
                    f"Perturbed map {self.name} is not a local diffeomorphism "
                    f"(min |det Df| = {np.min(np.abs(dets)):.3e})"
                )

    @property
    def integer_matrix(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=np.int64)

    @property
    def dimension(self) -> int:
        return 2

    def apply(self, points: np.ndarray) -> np.ndarray:
        x = np.asarray(points, dtype=float)
        image = x @ self.integer_matrix.T.astype(float)
        if self.perturbation is not None:
            image = image + self.perturbation.velocity(x)
        return np.mod(image, TWO_PI)

    def jacobian(self, points: np.ndarray) -> np.ndarray:
        x = np.asarray(points, dtype=float)
        base = np.broadcast_to(
            self.integer_matrix.astype(float), x.shape[:-1] + (2, 2)
        ).copy()
        if self.perturbation is not None:
            base = base + self.perturbation.jacobian(x)
        return base


def map_apply(system: MapSystem, point: Sequence[float]) -> np.ndarray:
    x = np.asarray(point, dtype=float)
    if x.shape != (2,):
        raise ArgumentError(f"Map points are 2-vectors, got shape {x.shape}")
    return system.apply(x)


def map_jacobian(system: MapSystem, point: Sequence[float]) -> np.ndarray:
    x = np.asarray(point, dtype=float)
    if x.shape != (2,):
        raise ArgumentError(f"Map points are 2-vectors, got shape {x.shape}")
    return system.jacobian(x)


def cat_map(
    matrix: Sequence[Sequence[int]] = ((2, 1), (1, 1)), delta: float = 0.0
) -> MapSystem:
    """
    Cat map, optionally perturbed as f(x) = A (x1, x2 + delta sin x1).

    The perturbation is written through A so the map stays area preserving.
    """
    a = tuple(tuple(int(v) for v in row) for row in matrix)
    if not delta:
        return MapSystem(a)  # type: ignore[arg-type]
    perturbation = trig_field(
        "cat_perturbation",
        [[((1, 0), 0.0, a[0][1] * delta)], [((1, 0), 0.0, a[1][1] * delta)]],
    )
    return MapSystem(a, perturbation, name="perturbed_cat_map")  # type: ignore[arg-type]


BUILTIN_MAPS: Dict[str, Callable[..., MapSystem]] = {
    "cat_map": cat_map,
}


@dataclass(frozen=True)
class ContactStructure:
    """A one-form alpha with its Reeb candidate field on R^3."""

    one_form: Callable[[np.ndarray], np.ndarray]
    reference_field: FlowField
    name: str = "contact"


@dataclass
class ContactReport:
    """Worst-case violations of alpha(V) = 1 and d alpha(V, .) = 0."""

    max_alpha_defect: float
    max_dalpha_defect: float
    points_checked: int


def _nose_hoover_alpha(x: np.ndarray) -> np.ndarray:
    scale = np.exp(-0.5 * np.sum(x**2, axis=-1))
    zero = np.zeros_like(x[..., 0])
    one = np.ones_like(x[..., 0])
    return scale[..., None] * np.stack([x[..., 1], zero, one], axis=-1)


def nose_hoover_contact() -> ContactStructure:
    """alpha = e^{-|x|^2/2}(x2 dx1 + dx3) with Reeb field V = e^{|x|^2/2} W."""
    return ContactStructure(_nose_hoover_alpha, nose_hoover_field("V"), "nose_hoover")


def _form_derivatives(
    one_form: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float
) -> np.ndarray:
    """D[i, j] = d_i alpha_j by Richardson-extrapolated central differences."""
    dim = x.shape[0]
    out = np.zeros((dim, dim))

    def central(h: float, i: int) -> np.ndarray:
        e = np.zeros(dim)
        e[i] = h
        return (one_form(x + e) - one_form(x - e)) / (2.0 * h)

    for i in range(dim):
        coarse = central(step, i)
        fine = central(0.5 * step, i)
        out[i] = (4.0 * fine - coarse) / 3.0
    return out


def verify_contact(
    cs: ContactStructure, sample_points: Sequence[Sequence[float]], step: float = 1e-3
) -> ContactReport:
    """Check alpha(V) = 1 and d alpha(V, .) = 0 at every sample point."""
    worst_alpha = 0.0
    worst_dalpha = 0.0
    for point in sample_points:
        x = np.asarray(point, dtype=float)
        alpha = cs.one_form(x)
        v = cs.reference_field.velocity(x)
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(v))):
            raise EvaluationError(f"Contact data not finite at {x.tolist()}")

        worst_alpha = max(worst_alpha, abs(float(alpha @ v) - 1.0))

        d = _form_derivatives(cs.one_form, x, step)
        # d alpha(V, w) = sum_ij (d_i alpha_j - d_j alpha_i) V_i w_j
        contraction = (d - d.T).T @ v
        worst_dalpha = max(worst_dalpha, float(np.max(np.abs(contraction))))

    report = ContactReport(worst_alpha, worst_dalpha, len(sample_points))
    logger.debug(
        f"Contact check {cs.name}: alpha defect {report.max_alpha_defect:.2e}, "
        f"d alpha defect {report.max_dalpha_defect:.2e}"
    )
    return report
