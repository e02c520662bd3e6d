"""System configuration: population sizes, capacity ranges, weights, seeds.

Defaults follow the full-scale simulation parameters (capacities, powers,
path loss, Zipf exponent, privacy coefficients). Desk-scale experiment plans
override counts and a few ranges so training runs finish in minutes; see
``plans/`` for the shipped plan files.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .channel import ChannelParams
from .costs import CostWeights

GB = 10**9
MB = 10**6
MHZ = 10**6


class ConfigError(ValueError):
    """Raised for unparseable or inconsistent configuration files."""


@dataclass(frozen=True)
class SystemConfig:
    num_models: int = 45  # I, must equal the catalog size
    num_servers: int = 10  # J
    num_users: int = 50  # K
    horizon: int = 200  # T, slots per episode
    deploy_interval: int = 10  # deployment refresh period in slots
    area_m: tuple[float, float] = (1000.0, 1000.0)
    user_flops_range: tuple[float, float] = (10e9, 100e9)
    server_flops_range: tuple[float, float] = (500e9, 2000e9)
    server_bandwidth_range_hz: tuple[float, float] = (50 * MHZ, 100 * MHZ)
    server_storage_range_bytes: tuple[int, int] = (3 * GB, 5 * GB)
    cloud_edge_rate_range_bps: tuple[float, float] = (200e6, 500e6)
    zipf_s: float = 0.8
    privacy_pref_range: tuple[float, float] = (0.2, 0.8)
    energy_coeff_range: tuple[float, float] = (1e-11, 1e-9)  # J/FLOP
    batch_range: tuple[int, int] = (1, 4)  # samples per request
    mu_hit: float = 1.0
    mu_mig: float = 0.1
    weights: CostWeights = field(default_factory=CostWeights)
    channel: ChannelParams = field(default_factory=ChannelParams)
    seed: int = 0

    def validate(self) -> None:
        if min(self.num_models, self.num_servers, self.num_users, self.horizon) < 1:
            raise ConfigError("population counts and horizon must be positive")
        if self.deploy_interval < 1 or self.horizon % self.deploy_interval != 0:
            raise ConfigError("deploy_interval must divide the horizon")
        ranges = {
            "user_flops_range": self.user_flops_range,
            "server_flops_range": self.server_flops_range,
            "server_bandwidth_range_hz": self.server_bandwidth_range_hz,
            "server_storage_range_bytes": self.server_storage_range_bytes,
            "cloud_edge_rate_range_bps": self.cloud_edge_rate_range_bps,
            "privacy_pref_range": self.privacy_pref_range,
            "energy_coeff_range": self.energy_coeff_range,
            "batch_range": self.batch_range,
        }
        for name, (lo, hi) in ranges.items():
            if hi < lo or lo < 0:
                raise ConfigError(f"{name} is empty or negative")
        if self.batch_range[0] < 1:
            raise ConfigError("batch_range must start at >= 1 sample")
        if self.zipf_s < 0:
            raise ConfigError("zipf_s must be non-negative")
        if min(self.mu_hit, self.mu_mig) < 0:
            raise ConfigError("deployment reward weights must be non-negative")
        try:
            self.weights.validate()
            self.channel.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **updates) -> "SystemConfig":
        return dataclasses.replace(self, **updates)

    def to_dict(self) -> dict:
        def unpack(value):
            if dataclasses.is_dataclass(value):
                return {k: unpack(v) for k, v in dataclasses.asdict(value).items()}
            if isinstance(value, tuple):
                return list(value)
            return value

        return {f.name: unpack(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "SystemConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key == "weights":
                kwargs[key] = CostWeights(**value)
            elif key == "channel":
                value = dict(value)
                for tup in ("server_tx_power_dbm", "user_tx_power_dbm"):
                    if tup in value:
                        value[tup] = tuple(value[tup])
                kwargs[key] = ChannelParams(**value)
            elif isinstance(value, list):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        try:
            config = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        config.validate()
        return config

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json_file(cls, path: str) -> "SystemConfig":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(data)


def desk_config(**overrides) -> SystemConfig:
    """Small configuration for laptop-scale experiments.

    Three servers, eight users, six services (three families x two). The
    area shrinks with the server count so per-server cell sizes (and hence
    link budgets) stay comparable to the full-scale setup; storage is
    narrowed so deployment choices matter, and the delay constraint is
    tightened until it binds for unconstrained training.
    """
    base = dict(
        num_models=6,
        num_servers=3,
        num_users=8,
        horizon=100,
        deploy_interval=5,
        area_m=(500.0, 500.0),
        server_storage_range_bytes=(int(0.7 * GB), int(1.0 * GB)),
        weights=CostWeights(tau_bar=3.0, tau_fail=15.0),
    )
    base.update(overrides)
    config = SystemConfig(**base)
    config.validate()
    return config


DESK_FAMILIES = ("lenet9", "resnet18", "vgg16")
DESK_SERVICES_PER_MODEL = 2
