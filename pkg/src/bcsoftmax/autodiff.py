"""Closed-form derivatives of the box-constrained softmax.

Every Jacobian block is a diagonal matrix minus a rank-one correction, so
vector-Jacobian and Jacobian-vector products run in O(K) without materializing
any K-by-K matrix.  Temperature is fixed to one here; callers differentiate
through their own ``x / tau`` scaling via the chain rule.

At points where a coordinate sits exactly on a bound the mapping is not
differentiable; the formulas below follow the pinned/free partition reported
by the solver, which yields a deterministic generalized derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_float_vector
from .core import bcsoftmax

__all__ = [
    "JacobianFactors",
    "jacobian_factors",
    "vjp_x",
    "vjp_a",
    "vjp_b",
    "jvp",
    "check_gradients",
    "GradientCheckReport",
]


@dataclass(frozen=True)
class JacobianFactors:
    """Everything needed to apply the solution's Jacobians in O(K).

    Attributes
    ----------
    free_probs : ndarray, shape (K,)
        The solution with pinned coordinates zeroed: ``p * ~lower * ~upper``.
        Its entries sum to ``free_mass``.
    free_mass : float
        Probability mass shared by the free coordinates.
    lower_pinned, upper_pinned : ndarray of bool, shape (K,)
        The solution's pinned/free partition.
    """

    free_probs: np.ndarray
    free_mass: float
    lower_pinned: np.ndarray
    upper_pinned: np.ndarray


@dataclass(frozen=True)
class GradientCheckReport:
    """Finite-difference comparison of the closed-form derivatives.

    ``max_dev_*`` are NaN when ``at_boundary`` is set: the instance sits within
    one step of an active-set change, where finite differences are meaningless.
    """

    max_dev_x: float
    max_dev_a: float
    max_dev_b: float
    at_boundary: bool
    step: float
    tol: float

    @property
    def passed(self) -> bool:
        if self.at_boundary:
            return True
        return max(self.max_dev_x, self.max_dev_a, self.max_dev_b) < self.tol


def jacobian_factors(x, a, b) -> JacobianFactors:
    """Solve at temperature one and package the Jacobian factors.

    The pinned flags are value-based: a coordinate sitting exactly on its
    bound counts as pinned even when the solver classified it as free (the
    minimal-pin convention leaves such boundary coincidences free, e.g. when
    the bounds sum to one).  Exact equality only; no tolerance is applied.

    Parameters
    ----------
    x : array-like, shape (K,)
        Logit vector, already divided by the temperature.
    a, b : array-like, shape (K,)
        Feasible box bounds.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    p, active = bcsoftmax(x, a, b, 1.0)
    lower = active.lower_pinned | (p == a)
    upper = (active.upper_pinned | (p == b)) & ~lower
    q = np.where(lower | upper, 0.0, p)
    # the free mass is taken as sum(q) rather than 1 - sum(pinned bounds): the
    # two agree to roundoff, and this choice makes the rank-one corrections
    # conserve mass exactly (and is exactly zero when nothing is free)
    return JacobianFactors(
        free_probs=q,
        free_mass=float(q.sum()),
        lower_pinned=lower,
        upper_pinned=upper,
    )


def vjp_x(factors: JacobianFactors, v) -> np.ndarray:
    """Pull ``v`` back through the logit Jacobian ``Diag(q) - q q^T / s``."""
    v = as_float_vector(v, "cotangent")
    q, s = factors.free_probs, factors.free_mass
    if s <= 0.0:
        return np.zeros_like(q)
    return q * v - q * (q @ v / s)


def _vjp_pinned(flags: np.ndarray, factors: JacobianFactors, v) -> np.ndarray:
    # pullback of Diag(flags) - q flags^T / s
    v = as_float_vector(v, "cotangent")
    q, s = factors.free_probs, factors.free_mass
    if s <= 0.0:
        return np.where(flags, v, 0.0)
    return np.where(flags, v - q @ v / s, 0.0)


def vjp_a(factors: JacobianFactors, v) -> np.ndarray:
    """Pull ``v`` back through the lower-bound Jacobian ``Diag(g) - q g^T / s``."""
    return _vjp_pinned(factors.lower_pinned, factors, v)


def vjp_b(factors: JacobianFactors, v) -> np.ndarray:
    """Pull ``v`` back through the upper-bound Jacobian ``Diag(h) - q h^T / s``."""
    return _vjp_pinned(factors.upper_pinned, factors, v)


def jvp(factors: JacobianFactors, dx, da, db) -> np.ndarray:
    """Directional derivative of the solution for joint tangents (dx, da, db)."""
    dx = as_float_vector(dx, "dx")
    da = as_float_vector(da, "da")
    db = as_float_vector(db, "db")
    q, s = factors.free_probs, factors.free_mass
    g, h = factors.lower_pinned, factors.upper_pinned
    pinned = np.where(g, da, 0.0) + np.where(h, db, 0.0)
    if s <= 0.0:
        return pinned
    # the x-block is symmetric, so its JVP coincides with its VJP; the bound
    # blocks push the pinned tangent mass onto q
    carried = (q @ dx + da[g].sum() + db[h].sum()) / s
    return q * dx + pinned - q * carried


def _dense_jacobians(factors: JacobianFactors) -> tuple[np.ndarray, ...]:
    """Explicit K-by-K Jacobian blocks; reference path for tests only."""
    q, s = factors.free_probs, factors.free_mass
    g = factors.lower_pinned.astype(float)
    h = factors.upper_pinned.astype(float)
    k = q.size
    if s <= 0.0:
        return np.zeros((k, k)), np.diag(g), np.diag(h)
    jx = np.diag(q) - np.outer(q, q) / s
    ja = np.diag(g) - np.outer(q, g) / s
    jb = np.diag(h) - np.outer(q, h) / s
    return jx, ja, jb


def _active_signature(x, a, b) -> tuple[bytes, bytes]:
    # value-based flags, matching jacobian_factors: exact-boundary coincidences
    # count as pinned, so losing one under perturbation reads as a change
    factors = jacobian_factors(x, a, b)
    return factors.lower_pinned.tobytes(), factors.upper_pinned.tobytes()


def check_gradients(
    x, a, b, step: float = 1e-6, tol: float = 1e-5
) -> GradientCheckReport:
    """Compare closed-form Jacobians against central finite differences.

    The instance is first probed for active-set stability: if perturbing any
    coordinate of any input block by ``step`` changes the pinned partition, the
    point straddles a nondifferentiable boundary and the report flags it
    instead of failing.

    Parameters
    ----------
    x, a, b : array-like, shape (K,)
        Instance at temperature one.
    step : float
        Central-difference step size.
    tol : float
        Maximum deviation considered a pass.
    """
    x = as_float_vector(x, "logits").copy()
    a = as_float_vector(a, "lower bounds").copy()
    b = as_float_vector(b, "upper bounds").copy()
    k = x.size
    base_sig = _active_signature(x, a, b)
    factors = jacobian_factors(x, a, b)
    jx, ja, jb = _dense_jacobians(factors)

    def probe(block: np.ndarray, j: int, up: float, down: float):
        """Two-point difference with active-set stability checks.

        Bound coordinates may have one-sided feasible room only; within a fixed
        active set the solution is linear in the bounds, so an asymmetric
        difference stays exact there.
        """
        if up + down < step * 1e-3:
            return None
        old = block[j]
        try:
            block[j] = old + up
            if _active_signature(x, a, b) != base_sig:
                return None
            hi = bcsoftmax(x, a, b, 1.0)[0]
            block[j] = old - down
            if _active_signature(x, a, b) != base_sig:
                return None
            lo = bcsoftmax(x, a, b, 1.0)[0]
        finally:
            block[j] = old
        return (hi - lo) / (up + down)

    sum_a = float(a.sum())
    sum_b = float(b.sum())
    boundary = GradientCheckReport(np.nan, np.nan, np.nan, True, step, tol)
    dev_x = dev_a = dev_b = 0.0
    for j in range(k):
        col = probe(x, j, step, step)
        if col is None:
            return boundary
        dev_x = max(dev_x, float(np.abs(col - jx[:, j]).max()))
    for j in range(k):
        up = max(min(step, b[j] - a[j], (1.0 - a[j]) / 2, 1.0 - sum_a), 0.0)
        down = max(min(step, a[j]), 0.0)
        col = probe(a, j, up, down)
        if col is None:
            return boundary
        dev_a = max(dev_a, float(np.abs(col - ja[:, j]).max()))
    for j in range(k):
        up = max(min(step, 1.0 - b[j]), 0.0)
        down = max(min(step, b[j] - a[j], sum_b - 1.0, b[j] / 2), 0.0)
        col = probe(b, j, up, down)
        if col is None:
            return boundary
        dev_b = max(dev_b, float(np.abs(col - jb[:, j]).max()))
    return GradientCheckReport(dev_x, dev_a, dev_b, False, step, tol)
