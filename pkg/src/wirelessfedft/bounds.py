"""Convergence-bound machinery for partial-participation split LoRA training.

The per-round contraction factor is ``1 - 2 tau varsigma(N)`` with

    varsigma(N) = -(L eta^2 - eta)/K^2 - (K - N) L / (2 N (K - 1) K^2),

and the optimality gap obeys gap(t+1) = (1 - 2 tau varsigma(t)) gap(t) + beta - alpha(t).
Also here: the empirical checks of the gradient split inequality and of the
subset-sampling variance identity, and estimators for L and phi^2.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


@dataclass
class BoundParams:
    """L: smoothness, eta: step, tau: PL constant, phi2: per-entry gradient
    variance bound, omega_a / omega_t: adapter / task gradient sizes, K: devices."""

    L: float
    eta: float
    tau: float
    phi2: float
    omega_a: int
    omega_t: int
    K: int

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError("L must be positive")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.tau < 0 or self.phi2 < 0:
            raise ValueError("tau and phi2 must be nonnegative")
        if self.K < 2:
            raise ValueError("K must be at least 2 (varsigma divides by K - 1)")

    @property
    def global_step_ok(self) -> bool:
        """Preamble condition L < eta / (eta^2 + 1)."""
        return self.L < self.eta / (self.eta ** 2 + 1.0)

    def round_step_ok(self, n: int) -> bool:
        """Per-round condition L < eta N (K-1) / ((K-1) N eta^2 + K - N)."""
        K = self.K
        return self.L < self.eta * n * (K - 1) / ((K - 1) * n * self.eta ** 2 + K - n)


def varsigma(n: int, params: BoundParams) -> float:
    K = params.K
    if K < 2:
        raise ValueError("varsigma needs K >= 2")
    if not 1 <= n <= K:
        raise ValueError(f"N must satisfy 1 <= N <= K, got {n}")
    L, eta = params.L, params.eta
    return -(L * eta ** 2 - eta) / K ** 2 - (K - n) * L / (2.0 * n * (K - 1) * K ** 2)


def alpha(vs: float, params: BoundParams) -> float:
    return params.phi2 * params.K ** 2 * vs * params.omega_a


def beta(params: BoundParams) -> float:
    return params.omega_t * (params.L * params.eta ** 2 - params.eta) * params.phi2


@dataclass
class BoundTrajectory:
    """Per-round bound quantities; index i describes round i + 1.

    ``gap[0]`` is the initial gap and ``gap[i + 1]`` the bound after round
    i + 1. ``weight_product[i]`` is the product of contraction factors of
    rounds 1..i+1.
    """

    varsigma: np.ndarray
    alpha: np.ndarray
    beta: float
    weights: np.ndarray
    weight_product: np.ndarray
    gap: np.ndarray
    initial_term: float
    lora_term: float
    task_term: float
    global_step_ok: bool
    round_step_ok: np.ndarray = field(repr=False)

    @property
    def final(self) -> float:
        return float(self.gap[-1])

    @property
    def closed_form(self) -> float:
        return self.initial_term - self.lora_term + self.task_term


def optimality_gap_bound(history, params: BoundParams, initial_gap: float) -> BoundTrajectory:
    """Unroll the gap recursion over the scheduled counts ``history``.

    Also evaluates the expanded form: with q_t = 1 - 2 tau varsigma(t) over
    the T + 1 rounds t = 0..T and P_i = q_T q_{T-1} ... q_{T-i+1},

        initial = (prod q) gap0
        lora    = alpha(T) + sum_{i=1..T} P_i alpha(T - i)
        task    = beta (1 + sum_{i=1..T} P_i)

    and the bound is initial - lora + task. A warning is issued (and the
    flags set) when the step conditions do not hold; the bound is still
    computed.
    """
    hist = [int(n) for n in history]
    if not hist:
        raise ValueError("history must be nonempty")
    vs = np.array([varsigma(n, params) for n in hist])
    al = np.array([alpha(v, params) for v in vs])
    b = beta(params)
    q = 1.0 - 2.0 * params.tau * vs
    round_ok = np.array([params.round_step_ok(n) for n in hist])
    if not params.global_step_ok or not round_ok.all():
        warnings.warn("step-size condition violated; bound reported as computed", RuntimeWarning,
                      stacklevel=2)

    gap = np.empty(len(hist) + 1)
    gap[0] = initial_gap
    for i in range(len(hist)):
        gap[i + 1] = q[i] * gap[i] + b - al[i]

    # expanded form, accumulated from the last round backwards
    T = len(hist) - 1
    initial = float(np.prod(q)) * initial_gap
    lora = al[T]
    task = b
    p = 1.0
    for i in range(1, T + 1):
        p *= q[T - i + 1]
        lora += p * al[T - i]
        task += p * b
    return BoundTrajectory(vs, al, b, q, np.cumprod(q), gap, initial, float(lora), float(task),
                           params.global_step_ok, round_ok)


@dataclass
class DecompositionReport:
    """Both sides of the gradient split inequality for one model state.

    ``lhs`` is ||grad F||^2 for the shared adapter, ``rhs`` the
    (2/K^2)(sum ||task grads||^2 + sum ||adapter grads||^2) bound.
    ``lhs_per_device`` treats each device's adapter as its own copy, in
    which case the bound always holds.
    """

    lhs: float
    rhs: float
    lhs_per_device: float
    task_sq: float
    adapter_sq: float
    adapter_sum_sq: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1.0 + 1e-12) + 1e-300

    @property
    def holds_per_device(self) -> bool:
        return self.lhs_per_device <= self.rhs * (1.0 + 1e-12) + 1e-300


def decomposition_from_grads(task_grads, adapter_grads) -> DecompositionReport:
    """Evaluate both sides from per-device gradients of f_k.

    ``task_grads[k]`` is grad f_k w.r.t. device k's head, ``adapter_grads[k]``
    grad f_k w.r.t. the shared adapter. F is the device average, so
    ||grad F||^2 = (sum_k ||t_k||^2 + ||sum_k a_k||^2) / K^2.
    """
    t = [np.ravel(g) for g in task_grads]
    a = [np.ravel(g) for g in adapter_grads]
    K = len(t)
    if K == 0 or len(a) != K:
        raise ValueError("need one task and one adapter gradient per device")
    task_sq = float(sum(g @ g for g in t))
    adapter_sq = float(sum(g @ g for g in a))
    total = np.sum(a, axis=0)
    adapter_sum_sq = float(total @ total)
    return DecompositionReport(
        lhs=(task_sq + adapter_sum_sq) / K ** 2,
        rhs=2.0 * (task_sq + adapter_sq) / K ** 2,
        lhs_per_device=(task_sq + adapter_sq) / K ** 2,
        task_sq=task_sq,
        adapter_sq=adapter_sq,
        adapter_sum_sq=adapter_sum_sq,
    )


def gradient_decomposition_check(model, datasets) -> DecompositionReport:
    """Full-shard gradients of every device's loss, fed to the inequality."""
    from wirelessfedft.fedft import full_gradients

    heads, adapters = full_gradients(model, datasets)
    return decomposition_from_grads(heads, adapters)


def subset_variance_oracle(gradients, n: int) -> tuple[float, float]:
    """Exact vs closed-form mean squared error of an N-subset gradient mean.

    ``exact`` enumerates all C(K, N) subsets and averages ||mean_S - mean||^2;
    ``formula`` is (K - N) / (K N (K - 1)) * sum_k ||g_k - mean||^2.
    """
    g = np.asarray(gradients, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    K = g.shape[0]
    if not 2 <= K <= 12:
        raise ValueError("enumeration supports 2 <= K <= 12")
    if not 1 <= n <= K:
        raise ValueError("N must satisfy 1 <= N <= K")
    mean = g.mean(axis=0)
    dev = g - mean
    formula = (K - n) / (K * n * (K - 1)) * float(np.sum(dev * dev))
    # summing deviations is exact-mean-free and cheaper than re-averaging g
    total = 0.0
    for subset in itertools.combinations(range(K), n):
        d = dev[list(subset)].sum(axis=0) / n
        total += float(d @ d)
    return total / math.comb(K, n), formula


def subset_variance_exact_rational(values, n: int) -> tuple[Fraction, Fraction]:
    """Scalar version of ``subset_variance_oracle`` in exact rational arithmetic."""
    vals = [Fraction(v) for v in values]
    K = len(vals)
    mean = sum(vals) / K
    formula = Fraction(K - n, K * n * (K - 1)) * sum((v - mean) ** 2 for v in vals)
    total = sum((sum(vals[i] for i in s) / n - mean) ** 2 for s in itertools.combinations(range(K), n))
    return total / math.comb(K, n), formula


def estimate_smoothness(probes) -> float:
    """Largest ||grad(W1) - grad(W2)|| / ||W1 - W2|| over consecutive probes.

    ``probes`` is a sequence of ``(round, parameters, gradient)``.
    """
    best = 0.0
    for (_, w1, g1), (_, w2, g2) in zip(probes, probes[1:]):
        dw = np.linalg.norm(w2 - w1)
        if dw > 0:
            best = max(best, float(np.linalg.norm(g2 - g1) / dw))
    if best == 0.0:
        raise ValueError("need at least two distinct probes to estimate L")
    return best


def estimate_gradient_variance(model, datasets, draws: int, rng: np.random.Generator) -> float:
    """Max per-entry variance of minibatch gradients (heads and adapter).

    For every device, ``draws`` minibatches are sampled at the current model
    and the per-entry sample variance of the local gradients is taken.
    """
    from wirelessfedft.fedft import adapter_gradient, forward_round, local_gradients

    if draws < 2:
        raise ValueError("draws must be at least 2")
    worst = 0.0
    for k, d in enumerate(datasets):
        samples = []
        for _ in range(draws):
            x, y = d.sample_batch(rng)
            fp = forward_round(model, {k: x}, [k])[k]
            g = local_gradients(model, fp, y)
            dA, dB = adapter_gradient(model, fp.embedded, g.feature_grad)
            samples.append(np.concatenate([g.head_weight.ravel(), g.head_bias, dA.ravel(), dB.ravel()]))
        worst = max(worst, float(np.max(np.var(np.stack(samples), axis=0, ddof=1))))
    return worst
