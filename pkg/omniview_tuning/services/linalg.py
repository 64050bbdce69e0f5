"""Dense float64 helpers shared by the model, the losses and the maximization step.

Every differentiable helper comes with its vector-Jacobian rule next to it;
`finite_difference_check` is the guardrail for all hand-derived gradients.
"""
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from omniview_tuning import config
from omniview_tuning.services.exceptions import (
    ConfigError,
    DimensionError,
    NonFiniteError,
    NormalizationError,
)


Matrix = NDArray[np.float64]
Vector = NDArray[np.float64]

GRADCHECK_STEP_RANGE = (1e-7, 1e-3)


def as_matrix(values: ArrayLike, name: str = "matrix") -> Matrix:
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {matrix.shape}")
    _ensure_finite(matrix, name)
    return matrix


def as_vector(values: ArrayLike, name: str = "vector") -> Vector:
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {vector.shape}")
    _ensure_finite(vector, name)
    return vector


def matmul(a: ArrayLike, b: ArrayLike) -> Matrix:
    left, right = as_matrix(a, "left operand"), as_matrix(b, "right operand")
    if left.shape[1] != right.shape[0] or left.shape[1] == 0:
        raise DimensionError(
            f"cannot multiply {left.shape[0]}x{left.shape[1]} "
            f"by {right.shape[0]}x{right.shape[1]}"
        )
    product = left @ right
    _ensure_finite(product, "product")
    return product


def l2_normalize(v: ArrayLike) -> Vector:
    vector = as_vector(v)
    norm = float(np.sqrt(np.sum(vector * vector)))
    if norm <= config.NORM_FLOOR:
        raise NormalizationError(f"cannot normalize vector with norm {norm:.3e}")
    return vector / norm


def normalize_rows(m: Matrix) -> tuple[Matrix, Vector]:
    """Returns row-normalized copy and the original row norms."""
    norms = np.sqrt(np.sum(m * m, axis=-1))
    if np.any(norms <= config.NORM_FLOOR):
        row = int(np.argmin(norms))
        raise NormalizationError(
            f"row {row} has near-zero norm {float(norms.flat[row]):.3e}"
        )
    return m / norms[..., None], norms


def normalize_rows_vjp(normalized: Matrix, norms: Vector, grad: Matrix) -> Matrix:
    radial = np.sum(normalized * grad, axis=-1, keepdims=True)
    return (grad - normalized * radial) / norms[..., None]


def cosine_similarity(a: ArrayLike, b: ArrayLike) -> float:
    left, right = as_vector(a, "a"), as_vector(b, "b")
    _ensure_same_length(left, right)
    return _cosine(left, right)


def cosine_similarity_vjp(a: ArrayLike, b: ArrayLike) -> Vector:
    """Gradient of cosine_similarity(a, b) w.r.t. a (unclamped)."""
    left, right = as_vector(a, "a"), as_vector(b, "b")
    _ensure_same_length(left, right)
    left_sq, right_sq = _squared_norm(left), _squared_norm(right)
    dot = float(np.sum(left * right))
    return right / np.sqrt(left_sq * right_sq) - dot * left / (
        left_sq * np.sqrt(left_sq * right_sq)
    )


def cosine_distance(a: ArrayLike, b: ArrayLike) -> float:
    return 1.0 - cosine_similarity(a, b)


def cosine_distance_vjp(a: ArrayLike, b: ArrayLike) -> Vector:
    return -cosine_similarity_vjp(a, b)


def cosine_distance_matrix(m: Matrix) -> Matrix:
    """Pairwise cosine distances between the rows of `m`.

    Exactly symmetric with an exact zero diagonal; identical rows are at
    distance exactly 0.
    """
    rows = as_matrix(m)
    dots = np.sum(rows[:, None, :] * rows[None, :, :], axis=-1)
    squared = np.diagonal(dots).copy()
    if np.any(np.sqrt(squared) <= config.NORM_FLOOR):
        raise NormalizationError("cannot compute distances for a zero-norm row")
    similarity = np.clip(dots / np.sqrt(squared[:, None] * squared[None, :]), -1, 1)
    distances = 1.0 - similarity
    np.fill_diagonal(distances, 0.0)
    return distances


def cosine_distances_to(m: Matrix, target: ArrayLike) -> Vector:
    rows, point = as_matrix(m), as_vector(target, "target")
    if rows.shape[1] != point.shape[0]:
        raise DimensionError(f"rows have dim {rows.shape[1]}, target {point.shape[0]}")
    return np.array([cosine_distance(row, point) for row in rows])


def softmax_rows(m: ArrayLike) -> Matrix:
    """Softmax along the last axis, stabilized by per-row max subtraction."""
    logits = np.asarray(m, dtype=np.float64)
    _ensure_finite(logits, "logits")
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exponents = np.exp(shifted)
    return exponents / np.sum(exponents, axis=-1, keepdims=True)


def log_softmax_rows(m: Matrix) -> Matrix:
    shifted = m - np.max(m, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax_rows_vjp(probabilities: Matrix, grad: Matrix) -> Matrix:
    inner = np.sum(grad * probabilities, axis=-1, keepdims=True)
    return probabilities * (grad - inner)


@dataclass(frozen=True)
class ParameterError:
    """Worst coordinate of one parameter group."""

    name: str
    relative_error: float
    worst_index: tuple[int, ...]
    analytic_norm: float
    numeric_norm: float


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    errors: tuple[ParameterError, ...]
    numeric: dict[str, NDArray[np.float64]] = field(repr=False)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


Objective = Callable[
    [Mapping[str, NDArray[np.float64]]],
    tuple[float, Mapping[str, NDArray[np.float64]]],
]


def finite_difference_check(
    objective: Objective,
    params: Mapping[str, ArrayLike],
    h: float = 1e-4,
) -> GradCheckReport:
    """Compares the analytic gradients returned by `objective` with
    fourth-order central differences, coordinate by coordinate."""
    if not GRADCHECK_STEP_RANGE[0] <= h <= GRADCHECK_STEP_RANGE[1]:
        raise ConfigError(f"step h={h} outside {GRADCHECK_STEP_RANGE}")
    point = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    _, returned = objective(point)
    analytic = {name: np.array(grad, dtype=np.float64) for name, grad in returned.items()}

    numeric: dict[str, NDArray[np.float64]] = {}
    errors = []
    for name, value in point.items():
        gradient = np.zeros_like(value)
        for index in np.ndindex(value.shape):
            original = value[index]
            samples = []
            for offset in (2 * h, h, -h, -2 * h):
                value[index] = original + offset
                samples.append(_evaluate(objective, point, name))
            value[index] = original
            far_plus, plus, minus, far_minus = samples
            gradient[index] = (8 * (plus - minus) - (far_plus - far_minus)) / (12 * h)
        numeric[name] = gradient
        expected = np.asarray(analytic.get(name, np.zeros_like(value)), dtype=np.float64)
        if expected.shape != value.shape:
            raise DimensionError(f"gradient for {name} has shape {expected.shape}, expected {value.shape}")
        errors.append(_relative_error(name, expected, gradient))

    return GradCheckReport(
        max_relative_error=max((e.relative_error for e in errors), default=0.0),
        errors=tuple(errors),
        numeric=numeric,
    )


def relative_errors(analytic: ArrayLike, numeric: ArrayLike) -> NDArray[np.float64]:
    """|a - n| / max(|a|, |n|, 1e-8), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _relative_error(
    name: str, analytic: NDArray[np.float64], numeric: NDArray[np.float64]
) -> ParameterError:
    per_coordinate = relative_errors(analytic, numeric)
    if per_coordinate.ndim == 0 or per_coordinate.size == 0:
        worst: tuple = ()
    else:
        worst = np.unravel_index(int(np.argmax(per_coordinate)), per_coordinate.shape)
    return ParameterError(
        name=name,
        relative_error=float(per_coordinate.max()) if per_coordinate.size else 0.0,
        worst_index=tuple(int(i) for i in worst),
        analytic_norm=float(np.linalg.norm(analytic)),
        numeric_norm=float(np.linalg.norm(numeric)),
    )


def _evaluate(objective: Objective, point, name: str) -> float:
    value, _ = objective(point)
    if not np.isfinite(value):
        raise NonFiniteError(f"objective is not finite while perturbing {name}")
    return float(value)


def _cosine(left: Vector, right: Vector) -> float:
    left_sq, right_sq = _squared_norm(left), _squared_norm(right)
    if min(left_sq, right_sq) <= config.NORM_FLOOR**2:
        raise NormalizationError("cosine is undefined for a zero vector")
    similarity = float(np.sum(left * right)) / float(np.sqrt(left_sq * right_sq))
    return min(1.0, max(-1.0, similarity))


def _squared_norm(vector: Vector) -> float:
    return float(np.sum(vector * vector))


def _ensure_same_length(left: Vector, right: Vector) -> None:
    if left.shape != right.shape:
        raise DimensionError(f"vectors differ in length: {left.shape} vs {right.shape}")


def _ensure_finite(values: NDArray[np.float64], name: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
