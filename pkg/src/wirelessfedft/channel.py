"""Device deployment, block-fading channel gains and FDMA uplink rates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LN2 = math.log(2.0)

FADING_MODELS = ("rayleigh", "none")


@dataclass
class ChannelConfig:
    """Radio environment and deployment geometry.

    Defaults follow the single-cell setting used for the experiments: server
    at the origin, devices uniform in a 50 m disc centred at (300, 0),
    (d/d0)^-3.5 pathloss with d0 = 10 m, noise PSD 1e-11 W/Hz, 10 MHz shared.
    """

    server_position: tuple[float, float] = (0.0, 0.0)
    device_disc_center: tuple[float, float] = (300.0, 0.0)
    device_disc_radius: float = 50.0
    reference_distance: float = 10.0
    pathloss_exponent: float = 3.5
    noise_psd: float = 1e-11
    total_bandwidth: float = 10e6
    num_devices: int = 20
    rng_seed: int = 0
    fading: str = "rayleigh"
    # W; the rate expression has no explicit power term, so 1 W keeps gain == SNR numerator
    transmit_power: float = 1.0

    def __post_init__(self):
        self.server_position = tuple(float(v) for v in self.server_position)
        self.device_disc_center = tuple(float(v) for v in self.device_disc_center)
        self.validate()

    def validate(self) -> None:
        if self.reference_distance <= 0:
            raise ValueError("reference_distance must be positive")
        if self.noise_psd <= 0:
            raise ValueError("noise_psd must be positive")
        if self.total_bandwidth <= 0:
            raise ValueError("total_bandwidth must be positive")
        if self.num_devices < 1:
            raise ValueError("num_devices must be at least 1")
        if self.device_disc_radius < 0:
            raise ValueError("device_disc_radius must be nonnegative")
        if self.transmit_power <= 0:
            raise ValueError("transmit_power must be positive")
        if self.fading not in FADING_MODELS:
            raise ValueError(f"fading must be one of {FADING_MODELS}, got {self.fading!r}")


@dataclass(frozen=True)
class ChannelSnapshot:
    """Channel power gains |h_k(t)|^2 of all devices for one round."""

    t: int
    gains: np.ndarray = field(repr=False)

    def __post_init__(self):
        gains = np.array(self.gains, dtype=float)
        if gains.ndim != 1:
            raise ValueError("gains must be one-dimensional")
        if np.any(gains < 0) or not np.all(np.isfinite(gains)):
            raise ValueError("gains must be finite and nonnegative")
        gains.flags.writeable = False
        object.__setattr__(self, "gains", gains)

    @property
    def num_devices(self) -> int:
        return self.gains.size

    def order(self) -> np.ndarray:
        """Device indices sorted by gain descending, ties by ascending index."""
        # lexsort keys: last key is primary
        return np.lexsort((np.arange(self.gains.size), -self.gains))


def deploy_devices(cfg: ChannelConfig) -> np.ndarray:
    """Place ``cfg.num_devices`` devices uniformly on the deployment disc.

    Returns a ``(K, 2)`` array of coordinates in metres. The draw depends only
    on ``cfg.rng_seed``.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    radius = cfg.device_disc_radius * np.sqrt(rng.random(cfg.num_devices))
    angle = 2.0 * np.pi * rng.random(cfg.num_devices)
    center = np.asarray(cfg.device_disc_center)
    return center + np.column_stack((radius * np.cos(angle), radius * np.sin(angle)))


def round_rng(seed: int, t: int) -> np.random.Generator:
    """Independent generator for round ``t`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(t), 0x5EED]))


def pathloss(cfg: ChannelConfig, positions: np.ndarray) -> np.ndarray:
    """Large-scale power attenuation (d/d0)^-exponent, distances clamped at d0."""
    d = np.linalg.norm(np.asarray(positions, dtype=float) - np.asarray(cfg.server_position), axis=1)
    d = np.maximum(d, cfg.reference_distance)
    return (d / cfg.reference_distance) ** (-cfg.pathloss_exponent)


def sample_gains(cfg: ChannelConfig, positions: np.ndarray, t: int,
                 rng: np.random.Generator | None = None) -> ChannelSnapshot:
    """Draw one block-fading realisation of every device's power gain.

    Small-scale power is unit-mean exponential (Rayleigh amplitude) when
    ``cfg.fading == "rayleigh"`` and identically 1 when ``"none"``. If ``rng``
    is omitted the per-round generator ``round_rng(cfg.rng_seed, t)`` is used,
    so identical ``(seed, t)`` always reproduce the same snapshot.
    """
    if rng is None:
        rng = round_rng(cfg.rng_seed, t)
    large_scale = pathloss(cfg, positions)
    if cfg.fading == "rayleigh":
        small_scale = rng.exponential(1.0, size=large_scale.size)
    else:
        small_scale = np.ones_like(large_scale)
    return ChannelSnapshot(t=t, gains=cfg.transmit_power * large_scale * small_scale)


def achievable_rate(bandwidth, gain, noise_psd: float):
    """Uplink rate B_k log2(1 + g / (B_k sigma^2)) in bit/s.

    Works elementwise on arrays. Zero bandwidth gives rate 0 (the continuous
    limit) instead of NaN.
    """
    if noise_psd <= 0:
        raise ValueError("noise_psd must be positive")
    bw = np.asarray(bandwidth, dtype=float)
    g = np.asarray(gain, dtype=float)
    if np.any(bw < 0) or np.any(g < 0):
        raise ValueError("bandwidth and gain must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = bw * np.log1p(g / (bw * noise_psd)) / LN2
    rate = np.where(bw > 0, rate, 0.0)
    if rate.ndim == 0:
        return float(rate)
    return rate


def transmission_delay(mu: float, rates) -> float:
    """Round delay: the slowest scheduled device's upload time max_k mu / r_k."""
    r = np.asarray(rates, dtype=float)
    if r.size == 0:
        raise ValueError("rates must be nonempty")
    if mu <= 0:
        raise ValueError("payload mu must be positive")
    if np.any(r <= 0):
        raise ValueError("unreachable device: rate must be positive")
    return float(np.max(mu / r))
