"""Row-batched box-constrained softmax for uniform (scalar) bounds.

Calibration fits solve the same uniform-bounds problem for every row of a
minibatch at every step, so this module vectorizes the exact active-set
construction across rows: with a scalar lower bound the ratio order is simply
the logit order, lower pins form a prefix and upper pins a suffix of the sorted
row.  Rows the vectorized path cannot certify (e.g. exponent underflow from
huge logit spreads) fall back to the scalar solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import EPS_FEAS, EPS_SIMPLEX
from .core import _PREDICATE_SLACK, bcsoftmax

__all__ = ["UniformSolution", "solve_uniform_rows"]


@dataclass(frozen=True)
class UniformSolution:
    """Batched solutions with the per-row pinned/free partition."""

    probs: np.ndarray  # (N, K)
    lower_pinned: np.ndarray  # (N, K) bool
    upper_pinned: np.ndarray  # (N, K) bool
    free_mass: np.ndarray  # (N,)


def _fallback_rows(logits, a, b, rows, out: UniformSolution) -> None:
    for n in rows:
        k = logits.shape[1]
        y, active = bcsoftmax(logits[n], np.full(k, a[n]), np.full(k, b[n]))
        out.probs[n] = y
        out.lower_pinned[n] = active.lower_pinned
        out.upper_pinned[n] = active.upper_pinned
        out.free_mass[n] = active.free_mass


def solve_uniform_rows(logits, lower, upper) -> UniformSolution:
    """Solve ``bcsoftmax(row, lower_n * 1_K, upper_n * 1_K, tau=1)`` for each row.

    Parameters
    ----------
    logits : ndarray, shape (N, K)
        One logit vector per row (temperature already applied).
    lower, upper : float or ndarray of shape (N,)
        Per-row uniform bounds; each pair must be feasible, i.e.
        ``0 <= lower <= min(1/K, upper)`` and ``1/K <= upper <= 1``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {logits.shape}")
    n, k = logits.shape
    a = np.broadcast_to(np.asarray(lower, dtype=np.float64), (n,)).copy()
    b = np.broadcast_to(np.asarray(upper, dtype=np.float64), (n,)).copy()
    if np.any(a < 0.0) or np.any(a * k > 1.0 + EPS_SIMPLEX):
        raise ValueError("uniform lower bounds must satisfy 0 <= a <= 1/K")
    if np.any(b <= 0.0) or np.any(b > 1.0) or np.any(b * k < 1.0 - EPS_SIMPLEX):
        raise ValueError("uniform upper bounds must satisfy 1/K <= b <= 1")
    if np.any(a > b):
        raise ValueError("uniform bounds must satisfy lower <= upper")

    u = logits - logits.max(axis=1, keepdims=True)
    order = np.argsort(u, axis=1, kind="stable")
    eo = np.exp(np.take_along_axis(u, order, axis=1))
    prefix = np.concatenate([np.zeros((n, 1)), np.cumsum(eo, axis=1)], axis=1)

    best_low = np.full(n, -1)
    best_up = np.zeros(n, dtype=np.intp)
    best_mass = np.zeros(n)
    best_rexp = np.ones(n)

    # lower-pin count i scans smallest logits first; for each i the suffix is a
    # uniform upper-bounded subproblem whose pin count m comes off the top
    m_range = np.arange(k)
    for i in range(k + 1):
        todo = best_low < 0
        if not todo.any():
            break
        s_i = 1.0 - i * a
        if i == k:
            feasible = todo & (np.abs(s_i) <= EPS_SIMPLEX)
            best_low[feasible] = k
            best_up[feasible] = 0
            best_mass[feasible] = 0.0
            continue
        span = k - i
        m = m_range[:span]
        # predicate: the largest unpinned exponential fits under the cap once
        # m coordinates are pinned there (cleared of divisions by the mass)
        e_next = eo[:, k - 1 - m]
        mass_m = s_i[:, None] - m[None, :] * b[:, None]
        r_m = prefix[:, k - m] - prefix[:, i : i + 1]
        lhs = e_next * mass_m
        rhs = b[:, None] * r_m
        ok = lhs <= rhs + _PREDICATE_SLACK * (np.abs(lhs) + rhs)
        has = ok.any(axis=1) & (span * b >= s_i - EPS_FEAS)
        m_star = np.argmax(ok, axis=1)
        mass = s_i - m_star * b
        r_star = np.take_along_axis(r_m, m_star[:, None], axis=1)[:, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(r_star > 0.0, mass / r_star, np.nan)
        v_min = eo[:, i] * scale
        v_max = eo[np.arange(n), k - 1 - m_star] * scale
        feasible = (
            todo
            & has
            & (r_star > 0.0)
            & (v_min >= a - EPS_FEAS)
            & (v_max <= b + EPS_FEAS)
        )
        best_low[feasible] = i
        best_up[feasible] = m_star[feasible]
        best_mass[feasible] = mass[feasible]
        best_rexp[feasible] = r_star[feasible]

    cols = np.arange(k)[None, :]
    low_sorted = cols < np.minimum(best_low, k)[:, None]
    up_sorted = cols >= (k - best_up)[:, None]
    free_sorted = ~(low_sorted | up_sorted)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = eo * np.where(best_rexp > 0.0, best_mass / best_rexp, 0.0)[:, None]
    y_sorted = np.where(low_sorted, a[:, None], np.where(up_sorted, b[:, None], vals))

    probs = np.empty_like(y_sorted)
    np.put_along_axis(probs, order, y_sorted, axis=1)
    lower_pinned = np.zeros((n, k), dtype=bool)
    np.put_along_axis(lower_pinned, order, low_sorted, axis=1)
    upper_pinned = np.zeros((n, k), dtype=bool)
    np.put_along_axis(upper_pinned, order, up_sorted, axis=1)
    out = UniformSolution(probs, lower_pinned, upper_pinned, best_mass)

    unresolved = np.flatnonzero(best_low < 0)
    if unresolved.size:
        _fallback_rows(logits, a, b, unresolved, out)
    return out
