"""Experiment configuration: nested dataclasses with a JSON file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from wirelessfedft.channel import ChannelConfig
from wirelessfedft.fedft import DataConfig, ModelConfig, model_payload
from wirelessfedft.scheduler import POLICIES, SchedulerConfig


class ConfigError(ValueError):
    """Configuration file missing, unparsable or invalid."""


@dataclass
class BoundConfig:
    """Inputs to the convergence-bound report that the run cannot observe."""

    pl_constant: float = 0.01  # tau
    probe_every: int = 25  # rounds between smoothness probes; 0 disables the bound CSV
    variance_draws: int = 16

    def __post_init__(self):
        if self.pl_constant < 0:
            raise ValueError("pl_constant must be nonnegative")
        if self.probe_every < 0 or self.variance_draws < 2:
            raise ValueError("probe_every must be >= 0 and variance_draws >= 2")


@dataclass
class ExperimentConfig:
    """Everything a run needs.

    ``delay_per_bit`` (seconds per payload bit), when set, overrides
    ``scheduler.delay_budget`` with ``delay_per_bit * mu``.
    """

    channel: ChannelConfig = field(default_factory=ChannelConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bound: BoundConfig = field(default_factory=BoundConfig)
    rounds: int = 500
    seeds: list[int] = field(default_factory=lambda: [0])
    policies: list[str] = field(default_factory=lambda: list(POLICIES))
    output_dir: str = "results"
    delay_per_bit: float | None = None

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        self.policies = [str(p) for p in self.policies]
        self.validate()

    def validate(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.policies:
            raise ValueError("at least one policy is required")
        for p in self.policies:
            if p not in POLICIES:
                raise ValueError(f"unknown policy {p!r}; choose from {POLICIES}")
        if self.delay_per_bit is not None and not self.delay_per_bit > 0:
            raise ValueError("delay_per_bit must be positive")

    @property
    def payload(self) -> int:
        return model_payload(self.model)

    def scheduler_config(self) -> SchedulerConfig:
        """Scheduler settings with the delay budget resolved to seconds."""
        if self.delay_per_bit is None:
            return self.scheduler
        return dataclasses.replace(self.scheduler, delay_budget=self.delay_per_bit * self.payload)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        sections = {"channel": ChannelConfig, "scheduler": SchedulerConfig, "model": ModelConfig,
                    "data": DataConfig, "bound": BoundConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be a mapping")
                sub_known = {f.name for f in dataclasses.fields(sections[key])}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                try:
                    kwargs[key] = sections[key](**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid {key!r} section: {exc}") from exc
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2) + "\n"


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
