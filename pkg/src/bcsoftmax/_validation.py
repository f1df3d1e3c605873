"""Input validation helpers and the package-wide numeric tolerances."""

from __future__ import annotations

import numpy as np

#: Absolute tolerance on |sum(p) - 1| for probability vectors.
EPS_SIMPLEX = 1e-9
#: Absolute per-coordinate slack used by feasibility predicates.
EPS_FEAS = 1e-12
#: Relative-or-absolute (whichever is larger) tolerance for cross-algorithm equality.
EPS_EQ = 1e-9
#: Tolerance on objective-value comparisons.
EPS_OBJ = 1e-9


def as_float_vector(values, name: str) -> np.ndarray:
    """Coerce ``values`` to a finite 1-D float64 array with at least one entry."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size < 1:
        raise ValueError(f"{name} must have at least one entry")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_logits(x) -> np.ndarray:
    return as_float_vector(x, "logits")


def check_temperature(tau) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0.0:
        raise ValueError(f"temperature must be a positive finite number, got {tau}")
    return tau


def check_lower_bounds(a, k: int) -> np.ndarray:
    """Validate a feasible lower-bound vector: 0 <= a < 1 elementwise, sum(a) <= 1."""
    a = as_float_vector(a, "lower bounds")
    if a.size != k:
        raise ValueError(f"lower bounds have length {a.size}, expected {k}")
    if np.any(a < 0.0) or np.any(a >= 1.0):
        raise ValueError("lower bounds must satisfy 0 <= a_k < 1")
    if a.sum() > 1.0 + EPS_SIMPLEX:
        raise ValueError(f"lower bounds sum to {a.sum()!r} > 1; infeasible")
    return a


def check_upper_bounds(b, k: int) -> np.ndarray:
    """Validate a feasible upper-bound vector: 0 < b <= 1 elementwise, sum(b) >= 1."""
    b = as_float_vector(b, "upper bounds")
    if b.size != k:
        raise ValueError(f"upper bounds have length {b.size}, expected {k}")
    if np.any(b <= 0.0) or np.any(b > 1.0):
        raise ValueError("upper bounds must satisfy 0 < b_k <= 1")
    if b.sum() < 1.0 - EPS_SIMPLEX:
        raise ValueError(f"upper bounds sum to {b.sum()!r} < 1; infeasible")
    return b


def check_box_bounds(a, b, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Validate a feasible (lower, upper) pair: both feasible and a <= b."""
    a = check_lower_bounds(a, k)
    b = check_upper_bounds(b, k)
    if np.any(a > b):
        raise ValueError("box bounds must satisfy a_k <= b_k for all k")
    return a, b


def check_prob_vector(p, k: int | None = None) -> np.ndarray:
    """Validate a probability vector: nonnegative entries summing to 1."""
    p = as_float_vector(p, "probabilities")
    if k is not None and p.size != k:
        raise ValueError(f"probability vector has length {p.size}, expected {k}")
    if np.any(p < -EPS_FEAS):
        raise ValueError("probability vector has negative entries")
    if abs(p.sum() - 1.0) > EPS_SIMPLEX:
        raise ValueError(f"probability vector sums to {p.sum()!r}, not 1")
    return p
