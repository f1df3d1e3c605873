"""Exact evaluation of softmax under box constraints on the output probabilities.

The central object is ``bcsoftmax``: the maximizer of the entropy-regularized
linear objective ``x @ y - tau * sum(y * log y)`` over the probability simplex
intersected with a box ``[a, b]``.  Every solution decomposes into coordinates
pinned at their lower bound, coordinates pinned at their upper bound, and free
coordinates proportional to ``exp(x_i / tau)``; the solvers here differ only in
how they locate that partition.

All exponentials are evaluated in a shifted frame ``u = x/tau - max(x/tau)``
(the solution is invariant to constant logit offsets), which keeps the
arithmetic overflow-free for logit spreads up to roughly ``700 * tau``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from ._validation import (
    EPS_EQ,
    EPS_FEAS,
    EPS_OBJ,
    EPS_SIMPLEX,
    check_box_bounds,
    check_logits,
    check_lower_bounds,
    check_prob_vector,
    check_temperature,
    check_upper_bounds,
)

__all__ = [
    "ActiveSet",
    "softmax",
    "ubsoftmax_sorted",
    "ubsoftmax_select",
    "lbsoftmax",
    "bcsoftmax",
    "bcsoftmax_quadratic",
    "scalar_bounds_to_clip",
    "objective_value",
    "EPS_SIMPLEX",
    "EPS_FEAS",
    "EPS_EQ",
    "EPS_OBJ",
]

_EMPTY_INT = np.empty(0, dtype=np.intp)

# Relative slack for the pin-threshold predicates.  Bound recipes routinely
# produce exact-boundary instances (e.g. sum(b) == 1) where the two sides of
# the comparison agree in real arithmetic but differ by a few ulp in floats;
# the slack resolves those ties toward "fits under the bound", shifting the
# output by at most ~1e-13 relative, well inside EPS_FEAS.
_PREDICATE_SLACK = 1e-13


@dataclass(frozen=True)
class ActiveSet:
    """Structural description of a box-constrained softmax solution.

    Attributes
    ----------
    lower_pinned : ndarray of bool, shape (K,)
        True where the output equals its lower bound.
    upper_pinned : ndarray of bool, shape (K,)
        True where the output equals its upper bound.
    free_mass : float
        Probability mass shared by the free coordinates,
        ``1 - sum(a[lower_pinned]) - sum(b[upper_pinned])``.
    normalizer : float
        ``free_exp_sum / free_mass``; free coordinates equal
        ``exp(u_i) / normalizer``.  NaN when no coordinate is free.
    free_exp_sum : float
        Sum of ``exp(u_i)`` over free coordinates, with
        ``u = x/tau - max(x/tau)`` (the shifted frame shared by
        ``normalizer``).
    """

    lower_pinned: np.ndarray
    upper_pinned: np.ndarray
    free_mass: float
    normalizer: float
    free_exp_sum: float

    @property
    def free(self) -> np.ndarray:
        """Boolean mask of coordinates pinned at neither bound."""
        return ~(self.lower_pinned | self.upper_pinned)


def _shifted(x: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    u = x / tau
    u = u - u.max()
    return u, np.exp(u)


def _free_values(u_free: np.ndarray, mass: float) -> np.ndarray:
    # mass * softmax(u_free), re-shifted so that a pinned coordinate dominating
    # the global max cannot underflow every free exponential to zero
    w = np.exp(u_free - u_free.max())
    return w * (mass / w.sum())


def _assemble(
    a: np.ndarray,
    b: np.ndarray,
    u: np.ndarray,
    e: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
) -> tuple[np.ndarray, ActiveSet]:
    """Materialize the solution vector from its pinned/free partition."""
    free = ~(lower | upper)
    s = float(1.0 - a[lower].sum() - b[upper].sum())
    r = float(e[free].sum())
    y = np.empty_like(e)
    y[lower] = a[lower]
    y[upper] = b[upper]
    if free.any():
        s = max(s, 0.0)
        y[free] = _free_values(u[free], s)
        z = r / s if s > 0.0 else np.inf
    else:
        z = np.nan
    return y, ActiveSet(
        lower_pinned=lower,
        upper_pinned=upper,
        free_mass=s,
        normalizer=z,
        free_exp_sum=r,
    )


def softmax(x, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax ``exp(x_i/tau) / sum_k exp(x_k/tau)``.

    Parameters
    ----------
    x : array-like, shape (K,)
        Finite logit vector.
    tau : float
        Positive temperature.

    Returns
    -------
    ndarray, shape (K,)
        Probability vector.
    """
    x = check_logits(x)
    tau = check_temperature(tau)
    _, e = _shifted(x, tau)
    return e / e.sum()


# ---------------------------------------------------------------------------
# Upper-bounded softmax
# ---------------------------------------------------------------------------


def ubsoftmax_sorted(x, b, tau: float = 1.0) -> tuple[np.ndarray, ActiveSet]:
    """Upper-bounded softmax via ratio sorting, O(K log K).

    Sorts coordinates by ``b_i / exp(x_i/tau)`` ascending and pins the shortest
    prefix whose successor already fits under its bound; the remaining mass is
    spread softmax-proportionally over the suffix.

    Parameters
    ----------
    x : array-like, shape (K,)
        Logit vector.
    b : array-like, shape (K,)
        Feasible upper bounds: ``0 < b <= 1`` elementwise and ``sum(b) >= 1``.
    tau : float
        Positive temperature.

    Returns
    -------
    (y, active) : (ndarray, ActiveSet)
        The solution and its pinned/free partition.
    """
    x = check_logits(x)
    k = x.size
    b = check_upper_bounds(b, k)
    tau = check_temperature(tau)
    u, e = _shifted(x, tau)
    lower = np.zeros(k, dtype=bool)
    if k == 1:
        return _assemble(np.zeros(1), b, u, e, lower, np.zeros(1, dtype=bool))
    order = np.argsort(np.log(b) - u, kind="stable")
    bo, eo = b[order], e[order]
    suffix_exp = np.cumsum(eo[::-1])[::-1]
    mass = 1.0 - np.concatenate(([0.0], np.cumsum(bo)[:-1]))
    # pin count rho = first k where the next coordinate fits under its bound:
    # exp(u_{k+1}) / z_k <= b_{k+1}, cleared of divisions
    lhs = eo * mass
    rhs = bo * suffix_exp
    ok = lhs <= rhs + _PREDICATE_SLACK * (lhs + rhs)
    if not ok.any():  # unreachable for feasible b; guards float pathologies
        raise RuntimeError("no feasible pin count found for upper bounds")
    rho = int(np.argmax(ok))
    upper = np.zeros(k, dtype=bool)
    upper[order[:rho]] = True
    return _assemble(np.zeros(k), b, u, e, lower, upper)


def ubsoftmax_select(x, b, tau: float = 1.0) -> tuple[np.ndarray, ActiveSet]:
    """Upper-bounded softmax via quickselect-style partitioning, expected O(K).

    Output contract is identical to :func:`ubsoftmax_sorted`; instead of a full
    sort, candidate pin thresholds are partitioned around pivots while running
    caches of the unpinned mass and exponential sum are maintained.
    """
    x = check_logits(x)
    k = x.size
    b = check_upper_bounds(b, k)
    tau = check_temperature(tau)
    u, e = _shifted(x, tau)
    if k == 1:
        zeros = np.zeros(1, dtype=bool)
        return _assemble(np.zeros(1), b, u, e, zeros, zeros)

    key = np.log(b) - u
    # extended index 0 is a virtual "pin nothing" candidate; candidate i+1 means
    # "pin every coordinate of rank <= rank(i)" in the (key, index) total order
    keys = np.concatenate(([-np.inf], key))
    bb = np.concatenate(([0.0], b))
    ee = np.concatenate(([0.0], e))

    # the maximum-rank coordinate is always a valid free witness
    top = key.max()
    wit = int(np.flatnonzero(key == top).max()) + 1
    cand = np.delete(np.arange(k + 1), wit)
    # running caches: caps committed as pinned, exponentials confirmed free.
    # Both only ever grow, so no subtractive cancellation enters the predicate.
    pinned_caps = 0.0
    free_exp = float(ee[wit])
    best = -1
    while cand.size:
        piv = int(cand[cand.size // 2])
        pk = keys[piv]
        ck = keys[cand]
        in_low = (ck < pk) | ((ck == pk) & (cand <= piv))
        low, high = cand[in_low], cand[~in_low]
        pinned_try = pinned_caps + bb[low].sum()
        s_try = 1.0 - pinned_try
        r_try = free_exp + ee[high].sum()
        if high.size:
            hk = keys[high]
            succ = int(high[np.lexsort((high, hk))[0]])
            if (keys[wit], wit) < (keys[succ], succ):
                succ = wit
        else:
            succ = wit
        lhs = ee[succ] * s_try
        rhs = bb[succ] * r_try
        if s_try <= 0.0:
            # pinning this far exhausts the mass: the threshold lies strictly
            # lower, so the pivot and everything above it are free
            free_exp += ee[high].sum() + ee[piv]
            wit = piv
            cand = low[low != piv]
        elif lhs <= rhs + _PREDICATE_SLACK * (lhs + rhs):
            best = piv
            free_exp += ee[high].sum() + ee[piv]
            wit = piv
            cand = low[low != piv]
        else:
            pinned_caps = pinned_try
            cand = high
    if best < 0:  # unreachable for feasible b
        raise RuntimeError("no feasible pin count found for upper bounds")

    bk = keys[best]
    upper = (key < bk) | ((key == bk) & (np.arange(1, k + 1) <= best))
    return _assemble(np.zeros(k), b, u, e, np.zeros(k, dtype=bool), upper)


# ---------------------------------------------------------------------------
# Lower-bounded softmax
# ---------------------------------------------------------------------------


def _lower_ratio_key(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    # log(a_i) - u_i with log(0) treated as -inf, so zero lower bounds sort last
    # in the descending ratio order
    key = np.full_like(u, -np.inf)
    pos = a > 0.0
    key[pos] = np.log(a[pos]) - u[pos]
    return key


def lbsoftmax(x, a, tau: float = 1.0) -> tuple[np.ndarray, ActiveSet]:
    """Lower-bounded softmax, i.e. ``bcsoftmax`` with upper bounds all one.

    Mirrors :func:`ubsoftmax_sorted`: coordinates are sorted by
    ``a_i / exp(x_i/tau)`` descending and the shortest prefix is pinned at its
    lower bound; the first suffix coordinate must sit at or above its bound.

    Parameters
    ----------
    x : array-like, shape (K,)
        Logit vector.
    a : array-like, shape (K,)
        Feasible lower bounds: ``0 <= a < 1`` elementwise and ``sum(a) <= 1``.
    tau : float
        Positive temperature.
    """
    x = check_logits(x)
    k = x.size
    a = check_lower_bounds(a, k)
    tau = check_temperature(tau)
    u, e = _shifted(x, tau)
    ones = np.ones(k)
    no_pin = np.zeros(k, dtype=bool)
    if k == 1:
        return _assemble(a, ones, u, e, no_pin, no_pin.copy())
    order = np.argsort(-_lower_ratio_key(a, u), kind="stable")
    ao, eo = a[order], e[order]
    suffix_exp = np.cumsum(eo[::-1])[::-1]
    mass = 1.0 - np.concatenate(([0.0], np.cumsum(ao)[:-1]))
    mass = np.maximum(mass, 0.0)
    # rho = first k where the next free coordinate clears its lower bound:
    # exp(u_{k+1}) / z_k >= a_{k+1}
    lhs = eo * mass
    rhs = ao * suffix_exp
    ok = lhs >= rhs - _PREDICATE_SLACK * (lhs + rhs)
    if not ok.any():
        raise RuntimeError("no feasible pin count found for lower bounds")
    rho = int(np.argmax(ok))
    lower = np.zeros(k, dtype=bool)
    lower[order[:rho]] = True
    if mass[rho] <= 0.0:
        # zero free mass: the remaining bounds are all zero and pinned there
        lower[order[rho:]] = True
    return _assemble(a, ones, u, e, lower, np.zeros(k, dtype=bool))


# ---------------------------------------------------------------------------
# Box-constrained softmax
# ---------------------------------------------------------------------------


def _box_candidate(
    kpin: int,
    s_k: float,
    ao: np.ndarray,
    ub_order: np.ndarray,
    ub_a: np.ndarray,
    ub_b: np.ndarray,
    ub_e: np.ndarray,
) -> tuple[bool, np.ndarray, bool]:
    """Evaluate the candidate that pins the first ``kpin`` ratio-sorted coords at ``a``.

    The tail is solved as an upper-bounded subproblem with bounds ``b / s_k``.
    Returns ``(feasible, upper_positions, tail_at_lower)`` where positions index
    the ratio-sorted frame.  The ``ub_*`` arrays hold the ratio-sorted data
    re-ordered by the upper-bound ratio key, precomputed once per solve.
    """
    if s_k <= 0.0:
        feasible = s_k >= -EPS_FEAS and bool(np.all(ao[kpin:] <= EPS_FEAS))
        return feasible, _EMPTY_INT, True
    mask = ub_order >= kpin
    sel = ub_order[mask]
    bsel, esel, asel = ub_b[mask], ub_e[mask], ub_a[mask]
    cum_b = np.cumsum(bsel)
    if cum_b[-1] < s_k - EPS_FEAS:
        # the tail caps cannot absorb the remaining mass; no valid subproblem
        return False, _EMPTY_INT, False
    prefix_b = cum_b - bsel
    suffix_exp = np.cumsum(esel[::-1])[::-1]
    # inner pin threshold, scaled by s_k to avoid dividing the bounds
    lhs = esel * (s_k - prefix_b)
    rhs = bsel * suffix_exp
    ok = lhs <= rhs + _PREDICATE_SLACK * (np.abs(lhs) + rhs)
    if not ok.any():
        return False, _EMPTY_INT, False
    m = int(np.argmax(ok))
    mass = max(s_k - prefix_b[m], 0.0)
    r_m = suffix_exp[m]
    if r_m <= 0.0:
        # exponent underflow wiped the free block; only zero lower bounds pass
        feasible = bool(np.all(asel[m:] <= EPS_FEAS))
        return feasible, sel[:m], False
    # free values e_j * mass / r_m must clear their lower bounds; the upper
    # side is already implied by the pin-threshold predicate
    feasible = bool(np.all(esel[m:] * mass >= asel[m:] * r_m - EPS_FEAS * r_m))
    return feasible, sel[:m], False


def _box_prepare(x, a, b, tau):
    x = check_logits(x)
    k = x.size
    a, b = check_box_bounds(a, b, k)
    tau = check_temperature(tau)
    u, e = _shifted(x, tau)
    order = np.argsort(-_lower_ratio_key(a, u), kind="stable")
    ao, bo, eo, uo = a[order], b[order], e[order], u[order]
    ub_order = np.argsort(np.log(bo) - uo, kind="stable")
    ub_frame = (ub_order, ao[ub_order], bo[ub_order], eo[ub_order])
    prefix_a = np.concatenate(([0.0], np.cumsum(ao)))
    return a, b, u, e, order, ao, bo, ub_frame, prefix_a


def _box_result(a, b, u, e, order, rho, upper_sel, tail_at_lower):
    k = a.size
    lower = np.zeros(k, dtype=bool)
    upper = np.zeros(k, dtype=bool)
    lower[order[:rho]] = True
    if tail_at_lower:
        lower[order[rho:]] = True
    upper[order[upper_sel]] = True
    return _assemble(a, b, u, e, lower, upper)


def bcsoftmax(
    x, a, b, tau: float = 1.0, *, validate_rho: bool = False
) -> tuple[np.ndarray, ActiveSet]:
    """Box-constrained softmax via ratio sorting and bisection, O(K log K).

    Coordinates are sorted by ``a_i / exp(x_i/tau)`` descending; the solution
    pins the shortest prefix at its lower bound, with the suffix solved as an
    upper-bounded subproblem.  The pin count is located by bisection on the
    candidate-feasibility predicate and certified afterwards; if certification
    fails (the predicate is not provably monotone), a linear scan from zero
    recovers the minimal feasible candidate.

    Parameters
    ----------
    x : array-like, shape (K,)
        Logit vector.
    a, b : array-like, shape (K,)
        Feasible box bounds with ``a <= b`` elementwise.
    tau : float
        Positive temperature.
    validate_rho : bool
        Debug mode: additionally verify by linear scan that no smaller pin
        count is feasible, raising ``RuntimeError`` on mismatch.

    Returns
    -------
    (y, active) : (ndarray, ActiveSet)
        The solution and its pinned/free partition.
    """
    a, b, u, e, order, ao, bo, ub_frame, prefix_a = _box_prepare(x, a, b, tau)
    k = a.size
    if k == 1:
        zeros = np.zeros(1, dtype=bool)
        return _assemble(a, b, u, e, zeros, zeros.copy())

    def evaluate(kpin: int):
        return _box_candidate(kpin, 1.0 - prefix_a[kpin], ao, *ub_frame)

    # candidates beyond k_max leave more mass than the tail caps can hold; the
    # margin decreases with the pin count, so they are all infeasible
    margin = np.cumsum(bo[::-1])[::-1] + prefix_a[:k] - 1.0
    k_max = int(np.max(np.flatnonzero(margin >= -EPS_FEAS)))

    lo, hi = 0, k_max
    while lo < hi:
        mid = (lo + hi) // 2
        if evaluate(mid)[0]:
            hi = mid
        else:
            lo = mid + 1
    rho = lo
    feasible, upper_sel, tail_at_lower = evaluate(rho)
    if not feasible:
        rho = None
        for kpin in range(k):
            feasible, upper_sel, tail_at_lower = evaluate(kpin)
            if feasible:
                rho = kpin
                break
        if rho is None:
            raise RuntimeError("no feasible active-set candidate found")
    if validate_rho:
        for kpin in range(rho):
            if evaluate(kpin)[0]:
                raise RuntimeError(
                    f"bisection selected pin count {rho} but {kpin} is feasible"
                )
    return _box_result(a, b, u, e, order, rho, upper_sel, tail_at_lower)


def bcsoftmax_quadratic(x, a, b, tau: float = 1.0) -> tuple[np.ndarray, ActiveSet]:
    """Box-constrained softmax via exhaustive candidate evaluation, O(K^2).

    Evaluates the pinned-prefix candidate for every pin count in ``{0, ..., K}``
    and returns the smallest feasible one.  Slower than :func:`bcsoftmax` but
    free of any bisection assumption; serves as an internal cross-check and a
    batch-friendly reference.
    """
    a, b, u, e, order, ao, bo, ub_frame, prefix_a = _box_prepare(x, a, b, tau)
    k = a.size
    if k == 1:
        zeros = np.zeros(1, dtype=bool)
        return _assemble(a, b, u, e, zeros, zeros.copy())

    rho = None
    chosen = None
    for kpin in range(k + 1):
        s_k = 1.0 - prefix_a[kpin]
        if kpin == k:
            result = (abs(s_k) <= EPS_SIMPLEX, _EMPTY_INT, True)
        else:
            result = _box_candidate(kpin, s_k, ao, *ub_frame)
        if result[0] and rho is None:
            rho = kpin
            chosen = result
        # no early exit: this variant evaluates every candidate by design
    if rho is None:
        raise RuntimeError("no feasible active-set candidate found")
    return _box_result(a, b, u, e, order, rho, chosen[1], chosen[2])


# ---------------------------------------------------------------------------
# Uniform bounds as logit clipping
# ---------------------------------------------------------------------------


def scalar_bounds_to_clip(
    x, lower: float, upper: float, tau: float = 1.0
) -> tuple[float, float]:
    """Clip thresholds (c, C) reproducing bcsoftmax under uniform bounds.

    For scalar bounds ``a = lower * 1_K`` and ``b = upper * 1_K`` there exist
    ``c <= C`` with ``softmax(clip(x, c, C), tau)`` equal to
    ``bcsoftmax(x, (a, b), tau)``:  upper-pinned coordinates are clipped down
    to ``C = tau * log(z * upper)`` and lower-pinned ones lifted to
    ``c = tau * log(z * lower)``, with ``z`` the solution's normalizer.

    Parameters
    ----------
    x : array-like, shape (K,)
        Logit vector.
    lower, upper : float
        Uniform bounds; ``(lower * 1_K, upper * 1_K)`` must be feasible.
    tau : float
        Positive temperature.

    Returns
    -------
    (c, C) : (float, float)
        Clip thresholds with ``c <= C``.
    """
    x = check_logits(x)
    k = x.size
    lower = float(lower)
    upper = float(upper)
    tau = check_temperature(tau)
    a = np.full(k, lower)
    b = np.full(k, upper)
    _, active = bcsoftmax(x, a, b, tau)
    any_low = bool(active.lower_pinned.any())
    any_up = bool(active.upper_pinned.any())
    if not active.free.any():
        # fully pinned: the normalizer is not determined; any thresholds that
        # separate the two pinned groups at the right ratio work
        if any_low and any_up:
            c = float(x[active.lower_pinned].max())
            return c, c + tau * np.log(upper / lower)
        pin = float(x.min()) if any_up else float(x.max())
        return pin, pin
    shift = float((x / tau).max())
    log_z = np.log(active.normalizer) + shift
    c = tau * (log_z + np.log(lower)) if any_low else float(x.min())
    big = tau * (log_z + np.log(upper)) if any_up else float(x.max())
    return float(c), float(big)


def objective_value(y, x, tau: float = 1.0) -> float:
    """Entropy-regularized linear objective ``x @ y - tau * sum(y log y)``.

    Uses the convention ``0 * log 0 = 0``.
    """
    x = check_logits(x)
    tau = check_temperature(tau)
    y = check_prob_vector(y, x.size)
    yc = np.maximum(y, 0.0)
    return float(x @ y - tau * xlogy(yc, yc).sum())
