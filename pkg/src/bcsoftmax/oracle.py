"""Brute-force reference solvers used as ground truth in tests.

These deliberately share no solver machinery with :mod:`bcsoftmax.core`: the
enumeration walks every assignment of coordinates to {lower-pinned, free,
upper-pinned}, reconstructs the implied vector from first principles, and keeps
the feasible candidate with the largest objective.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import xlogy

from ._validation import (
    EPS_FEAS,
    EPS_SIMPLEX,
    check_box_bounds,
    check_logits,
    check_temperature,
    check_upper_bounds,
)

__all__ = ["solve_enumerate", "solve_sweep_ub", "MAX_ENUMERATION_SIZE"]

#: Largest K accepted by the enumeration solver (3^K candidates).
MAX_ENUMERATION_SIZE = 12

_LOWER, _FREE, _UPPER = 0, 1, 2


@lru_cache(maxsize=None)
def _assignments(k: int) -> np.ndarray:
    """All 3^k assignments of k coordinates to {lower, free, upper}, as digits."""
    grids = np.meshgrid(*([np.arange(3, dtype=np.int8)] * k), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _objective_rows(y: np.ndarray, x: np.ndarray, tau: float) -> np.ndarray:
    yc = np.maximum(y, 0.0)
    return y @ x - tau * xlogy(yc, yc).sum(axis=1)


def _enumerate_candidates(x, a, b, tau):
    """All candidate vectors with feasibility flags and objective values.

    Returns ``(ys, feasible, objectives)`` over the 3^K pin assignments;
    infeasible rows carry ``-inf`` objective.
    """
    x = check_logits(x)
    k = x.size
    if k > MAX_ENUMERATION_SIZE:
        raise ValueError(
            f"enumeration oracle supports K <= {MAX_ENUMERATION_SIZE}, got {k}"
        )
    a, b = check_box_bounds(a, b, k)
    tau = check_temperature(tau)

    u = x / tau
    u = u - u.max()
    e = np.exp(u)

    digits = _assignments(k)
    low = digits == _LOWER
    free = digits == _FREE
    up = digits == _UPPER

    s = 1.0 - low @ a - up @ b
    r = free @ e
    any_free = free.any(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(any_free & (r > 0.0), s / r, 0.0)
    y = low * a + up * b + free * (scale[:, None] * e)

    feasible = s >= -EPS_FEAS
    # free coordinates must land inside the box (boundary hits are accepted;
    # they coincide with a pinned assignment and the objective max resolves it)
    viol = free & ((y < a - EPS_FEAS) | (y > b + EPS_FEAS))
    feasible &= ~viol.any(axis=1)
    feasible &= np.abs(y.sum(axis=1) - 1.0) <= EPS_SIMPLEX

    obj = np.where(feasible, _objective_rows(y, x, tau), -np.inf)
    return y, feasible, obj


def solve_enumerate(x, a, b, tau: float = 1.0) -> np.ndarray:
    """Solve the box-constrained problem by enumerating all 3^K pin assignments.

    Parameters
    ----------
    x : array-like, shape (K,)
        Logit vector with ``K <= MAX_ENUMERATION_SIZE``.
    a, b : array-like, shape (K,)
        Feasible box bounds.
    tau : float
        Positive temperature.

    Returns
    -------
    ndarray, shape (K,)
        The feasible candidate with the largest objective value.
    """
    y, feasible, obj = _enumerate_candidates(x, a, b, tau)
    if not feasible.any():
        raise RuntimeError("enumeration found no feasible candidate")
    return y[int(np.argmax(obj))]


def solve_sweep_ub(x, b, tau: float = 1.0) -> np.ndarray:
    """Upper-bounded solver via the O(K^2) sorted candidate sweep.

    Sorts by ``b_i / exp(x_i/tau)`` ascending, materializes the pinned-prefix
    candidate ``y(k)`` for every ``k`` in ``{0, ..., K}``, and returns the
    feasible candidate maximizing the objective.
    """
    x = check_logits(x)
    k = x.size
    b = check_upper_bounds(b, k)
    tau = check_temperature(tau)

    u = x / tau
    u = u - u.max()
    e = np.exp(u)
    order = np.argsort(np.log(b) - u, kind="stable")
    bo, eo = b[order], e[order]

    prefix_b = np.concatenate(([0.0], np.cumsum(bo)))
    suffix_e = np.concatenate((np.cumsum(eo[::-1])[::-1], [0.0]))
    counts = np.arange(k + 1)
    mass = 1.0 - prefix_b[:-1]  # mass left after pinning the first k coords

    cols = np.arange(k)
    pinned = cols[None, :] < counts[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(suffix_e[:-1] > 0.0, mass / suffix_e[:-1], 0.0)
    scale = np.concatenate((scale, [0.0]))
    ys = np.where(pinned, bo[None, :], scale[:, None] * eo[None, :])

    feasible = (
        np.all(ys <= bo[None, :] + EPS_FEAS, axis=1)
        & np.all(ys >= -EPS_FEAS, axis=1)
        & (np.abs(ys.sum(axis=1) - 1.0) <= EPS_SIMPLEX)
    )
    if not feasible.any():
        raise RuntimeError("candidate sweep found no feasible candidate")
    xo = (x / 1.0)[order]
    obj = np.where(feasible, _objective_rows(ys, xo, tau), -np.inf)
    best = ys[int(np.argmax(obj))]

    y = np.empty(k)
    y[order] = best
    return y
