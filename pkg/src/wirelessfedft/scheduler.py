"""Lyapunov-queue device scheduling and the benchmark policies.

Every policy returns a prefix of the devices sorted by channel gain
(descending, ties by index). The online policy grows that prefix one device
at a time, solving the min-delay allocation for each candidate set and
scoring it with the drift-plus-penalty objective ``N - zeta * Dhat * D``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from wirelessfedft.allocation import (
    BUDGET_RTOL,
    Allocation,
    AllocationProblem,
    InfeasibleDelay,
    min_delay,
    required_bandwidth,
)
from wirelessfedft.channel import ChannelConfig, ChannelSnapshot, achievable_rate

POLICIES = ("online", "allin", "aaba", "gs")
QUEUE_VARIANTS = ("alg1", "eq16")


@dataclass
class SchedulerConfig:
    """Scheduling policy and its control parameters.

    ``delay_budget`` is the long-run average delay target in seconds.
    ``queue_variant`` picks where zeta(t) enters the queue recursion:
    ``"alg1"`` scales the increment by zeta(t), ``"eq16"`` does not.
    ``full_scan`` makes the online policy score every prefix instead of
    stopping at the first decrease of the objective.
    """

    delay_budget: float = 0.08
    zeta0: float = 10.0
    zeta_decay: float = 1e-4
    policy: str = "online"
    queue_variant: str = "alg1"
    full_scan: bool = False
    search_method: str = "newton"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.delay_budget > 0:
            raise ValueError("delay_budget must be positive")
        if not self.zeta0 > 0:
            raise ValueError("zeta0 must be positive")
        if self.zeta_decay < 0:
            raise ValueError("zeta_decay must be nonnegative")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.queue_variant not in QUEUE_VARIANTS:
            raise ValueError(f"queue_variant must be one of {QUEUE_VARIANTS}")


def zeta(t: int, cfg: SchedulerConfig) -> float:
    """Descending positive control weight zeta0 / (1 + zeta_decay * t), t >= 1."""
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    return cfg.zeta0 / (1.0 + cfg.zeta_decay * t)


def objective(n: int, zeta_t: float, queue: float, delay: float) -> float:
    """Per-round drift-plus-penalty score J = N - zeta * Dhat * D."""
    return n - zeta_t * queue * delay


@dataclass
class VirtualQueue:
    """Delay-debt queue Dhat(t) with Dhat(0) = 0.

    ``history`` holds every value including the initial one; ``log`` holds
    the ``(D, Dbar, zeta, variant)`` inputs of each update so a trajectory
    can be replayed exactly.
    """

    value: float = 0.0
    history: list[float] = field(default_factory=lambda: [0.0])
    log: list[tuple[float, float, float, str]] = field(default_factory=list)

    def update(self, delay: float, budget: float, zeta_t: float, variant: str = "alg1") -> float:
        if variant == "eq16":
            nxt = max(0.0, self.value + delay - budget)
        elif variant == "alg1":
            nxt = max(0.0, self.value + zeta_t * (delay - budget))
        else:
            raise ValueError(f"unknown queue variant {variant!r}")
        self.value = nxt
        self.history.append(nxt)
        self.log.append((delay, budget, zeta_t, variant))
        return nxt

    @classmethod
    def replay(cls, log) -> "VirtualQueue":
        q = cls()
        for delay, budget, zeta_t, variant in log:
            q.update(delay, budget, zeta_t, variant)
        return q


def update_queue(q: VirtualQueue, delay: float, budget: float, zeta_t: float,
                 variant: str = "alg1") -> VirtualQueue:
    q.update(delay, budget, zeta_t, variant)
    return q


@dataclass
class ScheduleDecision:
    """Scheduled prefix, its allocation and objective value.

    ``allocation.bandwidths`` is aligned with ``scheduled_set``. An empty
    decision has no allocation and delay 0.
    """

    scheduled_set: tuple[int, ...]
    allocation: Allocation | None
    objective: float
    candidates_evaluated: int = 0

    @property
    def n(self) -> int:
        return len(self.scheduled_set)

    @property
    def delay(self) -> float:
        return 0.0 if self.allocation is None else self.allocation.delay

    @classmethod
    def empty(cls, candidates_evaluated: int = 0) -> "ScheduleDecision":
        return cls((), None, 0.0, candidates_evaluated)


def _usable_order(snapshot: ChannelSnapshot) -> np.ndarray:
    order = snapshot.order()
    return order[snapshot.gains[order] > 0]


def schedule_online(snapshot: ChannelSnapshot, queue: VirtualQueue, cfg: SchedulerConfig,
                    mu: float, channel_cfg: ChannelConfig, t: int) -> ScheduleDecision:
    """Set-expansion online policy.

    Candidate sets are the growing prefixes of the gain order. The first
    candidate is always taken so a round with any reachable device schedules
    at least one. Expansion stops the first time J strictly decreases (ties
    keep expanding) and the best-so-far prefix is returned; with
    ``cfg.full_scan`` all prefixes are scored and the last maximiser wins.
    """
    order = _usable_order(snapshot)
    if order.size == 0:
        raise ValueError("no device has a positive channel gain")
    weight = zeta(t, cfg) * queue.value
    gains = snapshot.gains[order]
    if weight == 0.0:
        # J = N is strictly increasing, so expansion always reaches the full set
        full = min_delay(AllocationProblem(gains, channel_cfg.total_bandwidth, mu, channel_cfg.noise_psd),
                         method=cfg.search_method)
        return ScheduleDecision(tuple(int(i) for i in order), full, float(order.size), 1)
    best = None
    evaluated = 0
    for n in range(1, order.size + 1):
        problem = AllocationProblem(gains[:n], channel_cfg.total_bandwidth, mu, channel_cfg.noise_psd)
        alloc = min_delay(problem, method=cfg.search_method)
        evaluated += 1
        score = objective(n, 1.0, weight, alloc.delay)
        if best is None or score >= best.objective:
            best = ScheduleDecision(tuple(int(i) for i in order[:n]), alloc, score)
        elif not cfg.full_scan:
            break
    best.candidates_evaluated = evaluated
    return best


def schedule_all_in(snapshot: ChannelSnapshot, mu: float, channel_cfg: ChannelConfig,
                    weight: float = 0.0, search_method: str = "newton") -> ScheduleDecision:
    """Every reachable device, min-delay allocation, no delay budget.

    ``weight`` (zeta * Dhat) only affects the reported objective.
    """
    order = _usable_order(snapshot)
    if order.size == 0:
        raise ValueError("no device has a positive channel gain")
    problem = AllocationProblem(snapshot.gains[order], channel_cfg.total_bandwidth, mu,
                                channel_cfg.noise_psd)
    alloc = min_delay(problem, method=search_method)
    return ScheduleDecision(tuple(int(i) for i in order), alloc,
                            objective(order.size, 1.0, weight, alloc.delay), 1)


def aaba_delay(n: int, gains_sorted: np.ndarray, mu: float, channel_cfg: ChannelConfig) -> float:
    """Round delay when the top ``n`` devices split the band equally."""
    share = channel_cfg.total_bandwidth / n
    rate = achievable_rate(share, gains_sorted[n - 1], channel_cfg.noise_psd)
    return math.inf if rate <= 0 else mu / rate


def schedule_aaba(snapshot: ChannelSnapshot, mu: float, cfg: SchedulerConfig,
                  channel_cfg: ChannelConfig, weight: float = 0.0) -> ScheduleDecision:
    """Adaptive average bandwidth allocation.

    Picks the largest N for which the N strongest devices, each on B/N, all
    finish within the delay budget. With an equal split the weakest of them
    is the slowest, so only its delay is checked.
    """
    order = _usable_order(snapshot)
    gains = snapshot.gains[order]
    limit = cfg.delay_budget * (1.0 + BUDGET_RTOL)
    best_n = 0
    for n in range(1, order.size + 1):
        if aaba_delay(n, gains, mu, channel_cfg) <= limit:
            best_n = n
    if best_n == 0:
        return ScheduleDecision.empty(order.size)
    delay = aaba_delay(best_n, gains, mu, channel_cfg)
    alloc = Allocation(np.full(best_n, channel_cfg.total_bandwidth / best_n), delay)
    return ScheduleDecision(tuple(int(i) for i in order[:best_n]), alloc,
                            objective(best_n, 1.0, weight, delay), order.size)


def schedule_gs(snapshot: ChannelSnapshot, mu: float, cfg: SchedulerConfig,
                channel_cfg: ChannelConfig, weight: float = 0.0) -> ScheduleDecision:
    """Greedy admission under a per-round delay cap.

    Walks the gain order, giving each device the bandwidth that makes it
    finish exactly at the budget, until the next device no longer fits in
    the remaining band (or cannot meet the budget at all).
    """
    order = _usable_order(snapshot)
    budget = channel_cfg.total_bandwidth
    limit = budget * (1.0 + BUDGET_RTOL)
    shares = []
    for idx in order:
        try:
            need = required_bandwidth(cfg.delay_budget, float(snapshot.gains[idx]), mu,
                                      channel_cfg.noise_psd)
        except InfeasibleDelay:
            break
        if sum(shares) + need > limit:
            break
        shares.append(need)
    n = len(shares)
    if n == 0:
        return ScheduleDecision.empty(1)
    bandwidths = np.array(shares)
    rates = achievable_rate(bandwidths, snapshot.gains[order[:n]], channel_cfg.noise_psd)
    delay = float(np.max(mu / rates))
    return ScheduleDecision(tuple(int(i) for i in order[:n]), Allocation(bandwidths, delay),
                            objective(n, 1.0, weight, delay), min(n + 1, order.size))


def schedule(snapshot: ChannelSnapshot, queue: VirtualQueue, cfg: SchedulerConfig, mu: float,
             channel_cfg: ChannelConfig, t: int, policy: str | None = None) -> ScheduleDecision:
    """Dispatch to the configured (or given) policy for round ``t``."""
    policy = policy or cfg.policy
    if policy == "online":
        return schedule_online(snapshot, queue, cfg, mu, channel_cfg, t)
    weight = zeta(t, cfg) * queue.value
    if policy == "allin":
        return schedule_all_in(snapshot, mu, channel_cfg, weight, cfg.search_method)
    if policy == "aaba":
        return schedule_aaba(snapshot, mu, cfg, channel_cfg, weight)
    if policy == "gs":
        return schedule_gs(snapshot, mu, cfg, channel_cfg, weight)
    raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
