"""Per-round FDMA bandwidth allocation for a fixed scheduling set.

Given a delay target D, the bandwidth a device needs so that
``mu / (B log2(1 + g / (B sigma^2))) == D`` has a closed form through the
lower real branch of the Lambert-W function. ``min_delay`` searches for the
smallest common delay whose per-device bandwidths fit in the total band,
which equalises every scheduled device's upload time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from wirelessfedft.channel import LN2, achievable_rate

INV_E = math.exp(-1.0)
# relative bracket width on the common delay
DELAY_RTOL = 1e-9
# relative residual accepted on the rate-delay equation
RESIDUAL_RTOL = 1e-9
BUDGET_RTOL = 1e-9
SEARCH_METHODS = ("newton", "bisection")
# budget match that ends the Newton search
NEWTON_BUDGET_RTOL = 1e-12


class InfeasibleDelay(ValueError):
    """No finite bandwidth reaches the requested delay."""


def _wm1_from_log(log_negx, w0=None):
    """W_{-1}(x) given l = ln(-x) <= -1, computed without forming x.

    Solves w + ln(-w) = l by Halley iteration. Working in the log domain keeps
    arguments that would underflow as x (|x| < 1e-308) representable. ``w0``
    replaces the series/asymptotic starting point when a nearby solution is
    already known.
    """
    l = np.minimum(np.asarray(log_negx, dtype=float), -1.0)
    if w0 is not None:
        return _halley_wm1(l, np.minimum(w0, -1.0))
    near_branch = l > -2.5
    # branch-point series in p = -sqrt(2(1 + e x)), with e x = -exp(1 + l)
    p = -np.sqrt(-2.0 * np.expm1(np.minimum(1.0 + l, 0.0)))
    w_branch = -1.0 + p * (1.0 + p * (-1.0 / 3.0 + p * (11.0 / 72.0 + p * (-43.0 / 540.0 + p * 769.0 / 17280.0))))
    if near_branch.all():
        w = w_branch
    else:
        # asymptotic L1 - L2 + L2/L1 with L1 = ln(-x), L2 = ln(-L1)
        l_far = np.minimum(l, -2.5)
        l2 = np.log(-l_far)
        w_asym = l_far - l2 + l2 / l_far
        w = np.where(near_branch, w_branch, w_asym)
    return _halley_wm1(l, np.minimum(w, -1.0))


def _halley_wm1(l, w):
    for _ in range(20):
        g = w + np.log(-w) - l
        inv_w = 1.0 / w
        dg = 1.0 + inv_w
        # Halley: 2 g g' / (2 g'^2 - g g''), g'' = -1/w^2; denom is 0 only where the numerator is
        step = 2.0 * g * dg / (2.0 * dg * dg + g * inv_w * inv_w + 1e-300)
        w = np.minimum(w - step, -1.0)
        # cubic convergence: after a 1e-6 step the remaining error is ~1e-18
        if (np.abs(step) <= 1e-6 * np.abs(w)).all():
            break
    return w


def lambert_w_m1(x):
    """Lower real branch W_{-1} of the Lambert-W function.

    Returns ``w <= -1`` with ``w * exp(w) == x`` for ``-1/e <= x < 0``.
    Accepts scalars or arrays.

    Raises
    ------
    ValueError
        If any argument lies outside ``[-1/e, 0)``.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < -INV_E) or np.any(arr >= 0.0):
        raise ValueError("lambert_w_m1 is defined on [-1/e, 0)")
    w = _wm1_from_log(np.log(-arr))
    if w.ndim == 0:
        return float(w)
    return w


def _check_inputs(delay, gain, mu, noise_psd):
    if noise_psd <= 0:
        raise ValueError("noise_psd must be positive")
    if mu <= 0:
        raise ValueError("payload mu must be positive")
    if delay <= 0:
        raise ValueError("delay must be positive")
    if gain <= 0:
        raise ValueError("gain must be positive")


def _rate_gap(bw: float, rate_needed: float, snr_bw: float) -> float:
    # r(B) - c with r(B) = B log2(1 + a/B), a = gain / noise_psd
    return bw * math.log1p(snr_bw / bw) / LN2 - rate_needed


def _bandwidth_by_bisection(rate_needed: float, snr_bw: float) -> float:
    """Bracketed root of r(B) = c on B in (0, inf); assumes c < a / ln 2."""
    hi = max(rate_needed, snr_bw)
    while _rate_gap(hi, rate_needed, snr_bw) < 0.0:
        hi *= 2.0
        if not math.isfinite(hi):
            raise InfeasibleDelay("rate target not reachable with finite bandwidth")
    lo = hi
    while _rate_gap(lo, rate_needed, snr_bw) >= 0.0:
        lo *= 0.5
    # geometric bisection: r(lo) < c <= r(hi)
    while hi / lo - 1.0 > 1e-15:
        mid = math.sqrt(lo * hi)
        if mid <= lo or mid >= hi:
            break
        if _rate_gap(mid, rate_needed, snr_bw) >= 0.0:
            hi = mid
        else:
            lo = mid
    return hi


def _closed_form_inverse(delay, gains, mu, noise_psd):
    """1/B* from the Lambert-W expression, elementwise; NaN where infeasible.

    With c = mu/D and a = g/sigma^2 the required rate is feasible iff
    u = c ln2 / a < 1; then the W argument is x = -u e^{-u} and
    1/B* = -D W_{-1}(x)/(mu ln2) - sigma^2/g = (-W_{-1}(x) - u) / (c ln2).
    """
    rate_needed = mu / delay
    u = (rate_needed * LN2 * noise_psd) / np.asarray(gains, dtype=float)
    ok = u < 1.0
    if ok.all():
        w = _wm1_from_log(np.log(u) - u)
        return (-w - u) / (rate_needed * LN2)
    u_ok = np.where(ok, u, 0.5)
    w = _wm1_from_log(np.log(u_ok) - u_ok)
    inv_bw = (-w - u_ok) / (rate_needed * LN2)
    return np.where(ok, inv_bw, np.nan)


def required_bandwidth(delay: float, gain: float, mu: float, noise_psd: float) -> float:
    """Bandwidth (Hz) at which a device uploads ``mu`` bits in exactly ``delay`` s.

    Evaluated in closed form via W_{-1}, refined with Newton steps on the
    rate-delay equation and checked against it. Falls back to a bracketed
    search when the closed form is unusable (nonpositive or non-finite 1/B*,
    or residual above tolerance).

    Raises
    ------
    InfeasibleDelay
        If ``mu / delay`` is at least the infinite-bandwidth rate
        ``gain / (noise_psd ln 2)``.
    """
    _check_inputs(delay, gain, mu, noise_psd)
    rate_needed = mu / delay
    snr_bw = gain / noise_psd
    if rate_needed * LN2 >= snr_bw:
        raise InfeasibleDelay(
            f"delay {delay:g} s unreachable: needs {rate_needed:.6g} bit/s, "
            f"capacity limit is {snr_bw / LN2:.6g} bit/s"
        )
    inv_bw = float(_closed_form_inverse(delay, [gain], mu, noise_psd)[0])
    if not (math.isfinite(inv_bw) and inv_bw > 0.0):
        return _bandwidth_by_bisection(rate_needed, snr_bw)
    bw = 1.0 / inv_bw
    bw = _newton_polish(bw, rate_needed, snr_bw)
    if abs(_rate_gap(bw, rate_needed, snr_bw)) > RESIDUAL_RTOL * rate_needed:
        return _bandwidth_by_bisection(rate_needed, snr_bw)
    return bw


def _newton_polish(bw, rate_needed, snr_bw, steps: int = 2):
    """Newton steps on r(B) - c; keeps the input where a step would not help."""
    for _ in range(steps):
        gap = _rate_gap(bw, rate_needed, snr_bw)
        slope = (math.log1p(snr_bw / bw) - snr_bw / (bw + snr_bw)) / LN2
        if slope <= 0.0 or gap == 0.0:
            break
        cand = bw - gap / slope
        if not (cand > 0.0) or abs(_rate_gap(cand, rate_needed, snr_bw)) >= abs(gap):
            break
        bw = cand
    return bw


def _bandwidths_at(delay, gains, mu, noise_psd):
    """Vectorised required bandwidths at a common delay; inf where unreachable."""
    inv_bw = _closed_form_inverse(delay, gains, mu, noise_psd)
    with np.errstate(divide="ignore"):
        bw = np.where(inv_bw > 0.0, 1.0 / inv_bw, np.inf)
    return np.where(np.isnan(inv_bw), np.inf, bw)


def _bandwidths_and_slopes(delay, gains, mu, noise_psd, w0=None):
    """Required bandwidths at ``delay`` and their derivatives dB_k/dD.

    Every device must be able to reach ``delay`` (u_k < 1). Differentiating
    D r(B) = mu gives dB/dD = -(c/D) / r'(B); in terms of w = W_{-1} and u,
    ln2 r'(B) = -w - u - 1 - u/w.
    """
    rate_needed = mu / delay
    u = (rate_needed * LN2 * noise_psd) / gains
    w = _wm1_from_log(np.log(u) - u, w0)
    bw = (rate_needed * LN2) / (-w - u)
    slope = -(rate_needed / delay) * LN2 / (-w - u - 1.0 - u / w)
    return bw, slope, w


@dataclass
class AllocationProblem:
    device_gains: np.ndarray
    total_bandwidth: float
    payload: float
    noise_psd: float

    def __post_init__(self):
        self.device_gains = np.atleast_1d(np.asarray(self.device_gains, dtype=float))
        if self.device_gains.size == 0:
            raise ValueError("candidate set must be nonempty")
        if np.any(self.device_gains <= 0) or not np.all(np.isfinite(self.device_gains)):
            raise ValueError("device gains must be finite and positive")
        if self.total_bandwidth <= 0:
            raise ValueError("total_bandwidth must be positive")
        if self.payload <= 0:
            raise ValueError("payload must be positive")
        if self.noise_psd <= 0:
            raise ValueError("noise_psd must be positive")


@dataclass
class Allocation:
    """Bandwidth shares (Hz, aligned with the candidate set) and the common delay."""

    bandwidths: np.ndarray = field(repr=False)
    delay: float
    feasible: bool = True

    @property
    def total(self) -> float:
        return float(np.sum(self.bandwidths))


def min_delay(problem: AllocationProblem, method: str = "newton",
              rtol: float = DELAY_RTOL) -> Allocation:
    """Smallest common delay whose required bandwidths sum to at most B.

    The search is bracketed by two certified bounds: the weakest device
    alone on the full band (no allocation can beat it) and the equal split
    B/N (always feasible). ``method="bisection"`` halves the bracket until
    its relative width is ``rtol``. ``"newton"`` (default) runs safeguarded
    Newton steps on the same bracket, stopping once the bandwidth sum
    matches B to 1e-12 relative; a step leaving the bracket is replaced by
    a bisection step. Returned bandwidths are the per-device requirements at
    the final delay, so every device finishes at the same time.
    """
    if method not in SEARCH_METHODS:
        raise ValueError(f"method must be one of {SEARCH_METHODS}")
    gains = problem.device_gains
    budget = problem.total_bandwidth
    mu = problem.payload
    noise = problem.noise_psd
    n = gains.size

    g_min = float(gains.min())
    lo = mu / achievable_rate(budget, g_min, noise)
    if n == 1:
        return Allocation(bandwidths=np.array([budget]), delay=lo)
    hi = mu / achievable_rate(budget / n, g_min, noise)

    if method == "bisection":
        while hi - lo > rtol * hi:
            mid = 0.5 * (lo + hi)
            if _bandwidths_at(mid, gains, mu, noise).sum() <= budget:
                hi = mid
            else:
                lo = mid
        delay = hi
    else:
        delay = _newton_delay(gains, budget, mu, noise, lo, hi)
    bandwidths = _bandwidths_at(delay, gains, mu, noise)
    leftover = budget - bandwidths.sum()
    if leftover > 0.0:
        # near a device's capacity limit the sum is too flat in D to hit B exactly;
        # the widest share is the least delay-sensitive place for the remainder
        bandwidths[np.argmax(bandwidths)] += leftover
    return Allocation(bandwidths=bandwidths, delay=float(delay))


def _newton_delay(gains, budget, mu, noise, lo, hi):
    # sum_k B_k(D) is decreasing in D; lo is infeasible (or exact), hi feasible
    tol = NEWTON_BUDGET_RTOL * budget
    delay = lo
    w = None
    for _ in range(200):
        bw, slope, w = _bandwidths_and_slopes(delay, gains, mu, noise, w)
        excess = bw.sum() - budget
        if abs(excess) <= tol:
            return delay
        if excess > 0.0:
            lo = delay
        else:
            hi = delay
        if hi - lo <= 1e-15 * hi:
            break
        cand = delay - excess / slope.sum()
        if not lo < cand < hi:
            cand = 0.5 * (lo + hi)
        delay = cand
    return hi
