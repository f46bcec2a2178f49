"""Dense-vector primitives used throughout the pipeline.

Everything runs in double precision. Analytic gradients elsewhere in the
package are validated against the central finite-difference oracle defined
here, so the helpers are deliberately strict about degenerate inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateVectorError, InvalidParameterError, OracleFailure


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidParameterError(f"{name} must be a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidParameterError(f"{name} contains non-finite entries")
    return v


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, clipped to [-1, 1]."""
    va = _as_vector(a, "a")
    vb = _as_vector(b, "b")
    if va.shape != vb.shape:
        raise InvalidParameterError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def l2_normalize(v) -> np.ndarray:
    """Scale a nonzero vector to unit norm."""
    vec = _as_vector(v, "v")
    n = float(np.linalg.norm(vec))
    if n == 0.0:
        raise DegenerateVectorError("cannot normalize a zero vector")
    return vec / n


def log_sum_exp(scores: np.ndarray, axis: int | None = None) -> np.ndarray:
    """Stable log(sum(exp(scores))) along an axis."""
    m = np.max(scores, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(scores - m), axis=axis, keepdims=True))
    if axis is None:
        return out.reshape(())
    return np.squeeze(out, axis=axis)


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    """Stable softmax of scores/temperature.

    Invariant under adding a constant to all scores; output entries are
    positive and sum to one.
    """
    if temperature <= 0.0 or not np.isfinite(temperature):
        raise InvalidParameterError(f"temperature must be positive, got {temperature}")
    s = _as_vector(scores, "scores")
    if s.size < 1:
        raise InvalidParameterError("softmax requires at least one score")
    z = s / temperature
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class GradCheckConfig:
    """Step size and tolerances for central-difference gradient checks."""

    step: float = 1e-5
    rel_tol: float = 1e-4
    abs_tol: float = 1e-7

    def __post_init__(self):
        if self.step <= 0.0:
            raise InvalidParameterError("finite-difference step must be positive")
        if self.rel_tol <= 0.0 or self.abs_tol <= 0.0:
            raise InvalidParameterError("gradient-check tolerances must be positive")


def finite_difference_gradient(
    f: Callable[[np.ndarray], float],
    params,
    cfg: GradCheckConfig = GradCheckConfig(),
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    Evaluates (f(p + h*e_i) - f(p - h*e_i)) / (2h) per coordinate. This is
    the reference oracle for every analytic gradient in the package and must
    stay independent of the code paths it checks.
    """
    p = _as_vector(params, "params")
    h = cfg.step
    grad = np.empty_like(p)
    for i in range(p.size):
        probe = p.copy()
        probe[i] = p[i] + h
        hi = float(f(probe))
        probe[i] = p[i] - h
        lo = float(f(probe))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise OracleFailure(
                f"objective non-finite while probing coordinate {i}: f+={hi}, f-={lo}"
            )
        grad[i] = (hi - lo) / (2.0 * h)
    return grad
