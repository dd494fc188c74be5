import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_subset_variance
from wirelessfedft.bounds import (
    BoundParams,
    alpha,
    beta,
    decomposition_from_grads,
    estimate_gradient_variance,
    estimate_smoothness,
    gradient_decomposition_check,
    optimality_gap_bound,
    subset_variance_exact_rational,
    subset_variance_oracle,
    varsigma,
)
from wirelessfedft.fedft import DataConfig, ModelConfig, SplitModel, make_datasets


def _params(**kw):
    base = dict(L=1.0, eta=0.1, tau=0.5, phi2=0.01, omega_a=128, omega_t=170, K=20)
    base.update(kw)
    return BoundParams(**base)


def test_varsigma_examples():
    p = _params()
    assert varsigma(10, p) == pytest.approx(0.09 / 400 - 10 / 152000, rel=1e-14)
    assert varsigma(10, p) == pytest.approx(1.5921e-4, rel=1e-4)
    assert varsigma(20, p) == pytest.approx(2.25e-4, rel=1e-14)
    assert varsigma(20, p) > varsigma(10, p)


def test_varsigma_full_participation_exact():
    for L, eta, K in [(1.0, 0.1, 20), (0.3, 0.05, 7), (2.5, 0.01, 2)]:
        p = _params(L=L, eta=eta, K=K)
        assert varsigma(K, p) == pytest.approx((eta - L * eta ** 2) / K ** 2, rel=1e-15)


def test_varsigma_domain():
    with pytest.raises(ValueError):
        _params(K=1)
    with pytest.raises(ValueError):
        varsigma(0, _params())
    with pytest.raises(ValueError):
        varsigma(21, _params())


def test_alpha_beta():
    p = _params(phi2=0.0)
    assert alpha(varsigma(5, p), p) == 0.0 and beta(p) == 0.0
    p = _params()
    assert beta(p) < 0  # L eta < 1
    a1 = alpha(1e-4, _params(omega_a=10))
    assert alpha(1e-4, _params(omega_a=30)) == pytest.approx(3 * a1, rel=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pure_geometric_decay():
    p = _params(phi2=0.0)
    hist = [20] * 9
    q = 1 - 2 * p.tau * varsigma(20, p)
    traj = optimality_gap_bound(hist, p, 3.0)
    assert traj.final == pytest.approx(q ** 9 * 3.0, rel=1e-13)


def test_recursive_equals_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(200):
        K = int(rng.integers(2, 30))
        p = _params(L=float(rng.uniform(0.01, 2)), eta=float(rng.uniform(0.01, 0.5)),
                    tau=float(rng.uniform(0, 2)), phi2=float(rng.uniform(0, 0.1)), K=K)
        hist = rng.integers(1, K + 1, 10)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            traj = optimality_gap_bound(hist, p, float(rng.uniform(0, 5)))
        assert traj.closed_form == pytest.approx(traj.final, rel=1e-12, abs=1e-12 * abs(traj.initial_term))


def test_more_participation_never_hurts():
    p = _params(L=0.05, eta=0.1, tau=0.5)
    rng = np.random.default_rng(1)
    for _ in range(50):
        hist = rng.integers(1, 20, 12)
        more = np.minimum(hist + rng.integers(0, 3, 12), 20)
        assert optimality_gap_bound(more, p, 1.0).final <= optimality_gap_bound(hist, p, 1.0).final + 1e-15


def test_weights_in_unit_interval_when_premise_holds():
    for K in (2, 5, 20):
        for eta in (0.01, 0.1, 0.5):
            for n in range(1, K + 1):
                L = 0.5 * eta * n * (K - 1) / ((K - 1) * n * eta ** 2 + K - n)
                p = _params(L=L, eta=eta, K=K, tau=1.0)
                assert p.round_step_ok(n)
                vs = varsigma(n, p)
                if p.tau * vs < 0.5:
                    assert 0 < 1 - 2 * p.tau * vs < 1


def test_step_condition_flags_and_warning():
    p = _params(L=5.0)
    assert not p.global_step_ok
    with pytest.warns(RuntimeWarning):
        traj = optimality_gap_bound([3, 4], p, 1.0)
    assert not traj.global_step_ok and not traj.round_step_ok.any()
    assert math.isfinite(traj.final)


def test_subset_variance_worked_example():
    exact, formula = subset_variance_oracle([1, 2, 3, 4], 2)
    assert exact == pytest.approx(5 / 12, rel=1e-15) and formula == pytest.approx(5 / 12, rel=1e-15)
    e, f = subset_variance_exact_rational([1, 2, 3, 4], 2)
    assert e == f == Fraction(5, 12)


def test_subset_variance_full_set_is_zero():
    exact, formula = subset_variance_oracle(np.random.default_rng(0).normal(size=(5, 3)), 5)
    assert exact == pytest.approx(0.0, abs=1e-28) and formula == 0.0


def test_subset_variance_random_vectors():
    g = np.random.default_rng(2).normal(size=(6, 3))
    exact, formula = subset_variance_oracle(g, 3)
    assert exact == pytest.approx(formula, rel=1e-12)
    assert exact == pytest.approx(brute_subset_variance(g, 3), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=2, max_size=7), st.data())
def test_subset_variance_rational(vals, data):
    n = data.draw(st.integers(1, len(vals)))
    e, f = subset_variance_exact_rational(vals, n)
    assert e == f


def test_subset_variance_domain():
    with pytest.raises(ValueError):
        subset_variance_oracle([1.0], 1)
    with pytest.raises(ValueError):
        subset_variance_oracle(list(range(13)), 2)


def test_decomposition_trivial_cases():
    r = decomposition_from_grads([np.array([3.0])], [np.array([4.0])])
    assert r.lhs == 25.0 and r.rhs == 50.0 and r.holds
    z = decomposition_from_grads([np.zeros(3)] * 4, [np.zeros(2)] * 4)
    assert z.lhs == 0.0 and z.rhs == 0.0 and z.holds


def test_decomposition_holds_for_two_devices():
    rng = np.random.default_rng(5)
    for _ in range(500):
        r = decomposition_from_grads(rng.normal(size=(2, 4)), rng.normal(size=(2, 3)) * rng.uniform(0, 10))
        assert r.holds


def test_shared_adapter_form_can_fail_beyond_two_devices():
    # identical adapter gradients: ||sum a||^2 = K^2 ||a||^2 outgrows 2 K ||a||^2 for K > 2
    K = 3
    r = decomposition_from_grads([np.zeros(2)] * K, [np.ones(2)] * K)
    assert not r.holds and r.lhs == pytest.approx(1.5 * r.rhs)
    assert r.holds_per_device


def test_per_device_form_always_holds():
    rng = np.random.default_rng(6)
    for K in (2, 5, 10):
        for _ in range(50):
            r = decomposition_from_grads(rng.normal(size=(K, 5)), rng.normal(size=(K, 4)) * 3)
            assert r.holds_per_device


def test_decomposition_on_model_matches_direct_sums():
    rng = np.random.default_rng(3)
    m = SplitModel.initialize(ModelConfig(), 3, rng)
    m.B[:] = rng.normal(size=m.B.shape)
    m.head_weights[:] = rng.normal(size=m.head_weights.shape)
    shards, _ = make_datasets(DataConfig(pool_size=300, device_share=1 / 3), ModelConfig(), 3, rng)
    r = gradient_decomposition_check(m, shards)
    assert r.rhs > 0 and r.lhs > 0 and r.lhs_per_device <= r.rhs


def test_smoothness_estimate_on_quadratic():
    H = np.diag([1.0, 4.0, 2.0])
    probes = [(t, w, H @ w) for t, w in enumerate(np.random.default_rng(0).normal(size=(6, 3)))]
    L = estimate_smoothness(probes)
    assert 1.0 <= L <= 4.0 + 1e-12
    with pytest.raises(ValueError):
        estimate_smoothness(probes[:1])


def test_gradient_variance_estimate_is_positive_and_seeded():
    rng = np.random.default_rng(0)
    m = SplitModel.initialize(ModelConfig(), 2, rng)
    m.head_weights[:] = rng.normal(size=m.head_weights.shape)
    shards, _ = make_datasets(DataConfig(pool_size=200, device_share=0.5), ModelConfig(), 2, rng)
    a = estimate_gradient_variance(m, shards, 8, np.random.default_rng(1))
    b = estimate_gradient_variance(m, shards, 8, np.random.default_rng(1))
    assert a == b and a > 0
