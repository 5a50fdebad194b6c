"""Protocol, channel and scorer configuration (JSON file format)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

SECONDS_PER_DAY = 86400


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    epoch_duration_sec: int = 900
    ct_days: int = 14
    esr_per_day: int = 4
    padding_T: int = 64
    min_encounter_sec: int = 120
    peer_loss_timeout_sec: int = 60
    reset_days: int = 3
    notify_p: float = 0.0
    risk_threshold_sec: float = 900

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "notify_p":
                if not 0.0 <= value <= 1.0:
                    raise ConfigError(f"notify_p must be in [0, 1], got {value}")
            elif value <= 0:
                raise ConfigError(f"{f.name} must be positive, got {value}")
        if SECONDS_PER_DAY % self.epoch_duration_sec:
            raise ConfigError("epoch_duration_sec must divide a day")
        if self.epochs_per_day % self.esr_per_day:
            raise ConfigError(
                f"esr_per_day={self.esr_per_day} does not divide {self.epochs_per_day} epochs/day")

    @property
    def epochs_per_day(self) -> int:
        return SECONDS_PER_DAY // self.epoch_duration_sec

    @property
    def esr_min_epochs(self) -> int:
        return SECONDS_PER_DAY // (self.esr_per_day * self.epoch_duration_sec)

    @property
    def reset_epochs(self) -> int:
        return self.reset_days * self.epochs_per_day


@dataclass(frozen=True)
class ChannelConfig:
    mixing: bool = True
    mix_delay_max_sec: int = 6 * 3600
    proxy_drop_rate: float = 0.0
    beacon_interval_sec: int = 3
    ble_mode: str = "scan_response"

    def __post_init__(self):
        if self.mix_delay_max_sec < 0:
            raise ConfigError("mix_delay_max_sec must be >= 0")
        if not 0.0 <= self.proxy_drop_rate < 1.0:
            raise ConfigError("proxy_drop_rate must be in [0, 1)")
        if self.beacon_interval_sec <= 0:
            raise ConfigError("beacon_interval_sec must be positive")
        if self.ble_mode not in ("scan_response", "fragmentation"):
            raise ConfigError(f"unknown ble_mode {self.ble_mode!r}")


@dataclass(frozen=True)
class ScorerConfig:
    name: str = "additive"
    min_match_count: int = 1

    def __post_init__(self):
        if self.name != "additive":
            raise ConfigError(f"unknown scorer {self.name!r}")
        if self.min_match_count < 1:
            raise ConfigError("min_match_count must be >= 1")


@dataclass(frozen=True)
class SimConfig:
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)

    def to_dict(self) -> dict:
        out = asdict(self.protocol)
        out["channel"] = asdict(self.channel)
        out["scorer"] = asdict(self.scorer)
        return out


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> SimConfig:
    data = dict(data)
    channel = data.pop("channel", {})
    scorer = data.pop("scorer", {})
    return SimConfig(
        protocol=_build(ProtocolConfig, data, "config"),
        channel=_build(ChannelConfig, channel, "config.channel"),
        scorer=_build(ScorerConfig, scorer, "config.scorer"),
    )


def load_config(path: str | Path) -> SimConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)
