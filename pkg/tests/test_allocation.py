import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bandwidth_root, lambert_wm1_mp, min_delay_oracle, rate
from wirelessfedft.allocation import (
    AllocationProblem,
    InfeasibleDelay,
    lambert_w_m1,
    min_delay,
    required_bandwidth,
)
from wirelessfedft.channel import achievable_rate

NOISE = 1e-11


def test_w_branch_point():
    assert lambert_w_m1(-math.exp(-1.0)) == pytest.approx(-1.0, abs=1e-7)


def test_w_at_minus_tenth():
    assert lambert_w_m1(-0.1) == pytest.approx(-3.577152063957297, rel=1e-14)


def test_w_matches_newton_from_minus_four():
    w = -4.0
    for _ in range(60):
        w -= (w * math.exp(w) + 0.1) / (math.exp(w) * (w + 1.0))
    assert lambert_w_m1(-0.1) == pytest.approx(w, rel=1e-14)


@settings(max_examples=300, deadline=None)
@given(st.floats(-math.exp(-1.0), -1e-300, exclude_max=False))
def test_w_residual(x):
    w = lambert_w_m1(x)
    assert w <= -1.0
    assert abs(w * math.exp(w) - x) <= 1e-12 * abs(x)


def test_w_against_mpmath():
    xs = -np.logspace(-300, math.log10(math.exp(-1.0)) - 1e-9, 200)
    got = lambert_w_m1(xs)
    ref = np.array([lambert_wm1_mp(x) for x in xs])
    err = np.abs(got - ref) / np.abs(ref)
    # W is infinitely sensitive at -1/e; within 1e-6 of it, ln(-x) rounding limits accuracy
    near_branch = np.abs(1.0 + math.e * xs) < 1e-6
    assert np.max(err[~near_branch]) < 1e-13
    assert np.max(err[near_branch]) < 1e-10


@pytest.mark.parametrize("x", [0.0, 0.5, -0.4, float("nan"), -1.0])
def test_w_domain(x):
    with pytest.raises(ValueError):
        lambert_w_m1(x)


def test_roundtrip_feasible_example():
    # gain 1e-4 keeps mu / D = 2e6 bit/s below the capacity limit g / (sigma^2 ln 2)
    bw = required_bandwidth(0.5, 1e-4, 1e6, NOISE)
    assert achievable_rate(bw, 1e-4, NOISE) * 0.5 == pytest.approx(1e6, rel=1e-9)
    assert bw == pytest.approx(float(bandwidth_root(0.5, 1e-4, 1e6, NOISE)), rel=1e-9)


def test_infeasible_example_raises():
    # gain 1e-7: the infinite-bandwidth rate is about 1.44e4 bit/s < 2e6 bit/s
    with pytest.raises(InfeasibleDelay):
        required_bandwidth(0.5, 1e-7, 1e6, NOISE)


def test_scale_invariance():
    a = required_bandwidth(0.2, 3e-5, 1e5, NOISE)
    b = required_bandwidth(0.4, 3e-5, 2e5, NOISE)
    assert a == pytest.approx(b, rel=1e-12)


def test_longer_delay_needs_less_bandwidth():
    a = required_bandwidth(0.1, 3e-5, 1e5, NOISE)
    b = required_bandwidth(0.2, 3e-5, 1e5, NOISE)
    assert b < a
    assert b == pytest.approx(float(bandwidth_root(0.2, 3e-5, 1e5, NOISE)), rel=1e-9)


def test_near_capacity_instance():
    # u = c ln2 / a just below 1: needs an enormous band, closed form must still hold
    gain, mu = 1e-6, 1e4
    cap = gain / (NOISE * math.log(2.0))
    delay = mu / (cap * (1 - 1e-6))
    bw = required_bandwidth(delay, gain, mu, NOISE)
    assert rate(bw, gain, NOISE) * delay == pytest.approx(mu, rel=1e-9)


@pytest.mark.parametrize("args", [(0.0, 1e-6, 1e4), (0.1, 0.0, 1e4), (0.1, 1e-6, 0.0)])
def test_required_bandwidth_rejects_nonpositive(args):
    with pytest.raises(ValueError):
        required_bandwidth(*args, NOISE)


def _check_allocation(gains, alloc, budget, mu):
    assert np.all(alloc.bandwidths >= 0)
    assert alloc.total <= budget * (1 + 1e-9)
    assert alloc.total == pytest.approx(budget, rel=1e-6)
    delays = mu / achievable_rate(alloc.bandwidths, gains, NOISE)
    assert np.max(np.abs(delays - alloc.delay)) <= 1e-6 * alloc.delay


def test_singleton_takes_full_band():
    p = AllocationProblem([2e-6], 10e6, 5e4, NOISE)
    a = min_delay(p)
    assert a.bandwidths.tolist() == [10e6]
    assert a.delay == 5e4 / achievable_rate(10e6, 2e-6, NOISE)


@pytest.mark.parametrize("method", ["newton", "bisection"])
def test_equal_gains_split_evenly(method):
    a = min_delay(AllocationProblem([1e-6, 1e-6], 10e6, 5e4, NOISE), method=method)
    assert a.bandwidths == pytest.approx([5e6, 5e6], rel=1e-6)


@pytest.mark.parametrize("method", ["newton", "bisection"])
def test_min_delay_against_oracle(method):
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(2, 8))
        gains = 10 ** rng.uniform(-9, -6, n)
        a = min_delay(AllocationProblem(gains, 10e6, 53248, NOISE), method=method)
        _check_allocation(gains, a, 10e6, 53248)
        assert a.delay == pytest.approx(min_delay_oracle(gains, 10e6, 53248, NOISE), rel=1e-6)


def test_adding_a_device_never_lowers_delay():
    rng = np.random.default_rng(8)
    for _ in range(30):
        gains = 10 ** rng.uniform(-9, -6, 8)
        delays = [min_delay(AllocationProblem(gains[:n], 10e6, 53248, NOISE)).delay for n in range(1, 9)]
        # a much stronger newcomer changes the delay only at rounding level
        assert all(b >= a * (1 - 1e-12) for a, b in zip(delays, delays[1:]))


def test_extreme_fade_keeps_budget():
    # one device barely above capacity for this delay range
    gains = np.array([3e-6, 8e-7, 2e-7, 1.4e-9])
    a = min_delay(AllocationProblem(gains, 10e6, 53248, NOISE))
    _check_allocation(gains, a, 10e6, 53248)


def test_problem_validation():
    with pytest.raises(ValueError):
        AllocationProblem([], 1e6, 1e4, NOISE)
    with pytest.raises(ValueError):
        AllocationProblem([1e-6, 0.0], 1e6, 1e4, NOISE)
    with pytest.raises(ValueError):
        min_delay(AllocationProblem([1e-6], 1e6, 1e4, NOISE), method="golden")
