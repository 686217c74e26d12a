"""Scenario configuration: a flat mapping of named fields, loadable from YAML."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Any, Mapping

import yaml

from .consensus import ConfigError
from .core import HEADER_BYTES, TX_BYTES
from .sim import NetworkModel, parse_latency

BEHAVIORS = ("silent", "equivocate", "invalid", "staller", "reveal_withholder")


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 1
    n_nodes: int = 25
    n_shards: int = 5
    committee_size: int = 0          # 0: n_nodes // n_shards
    v_min: int = 4
    block_limit: int = HEADER_BYTES + 64 * TX_BYTES
    header_bytes: int = HEADER_BYTES
    tx_bytes: int = TX_BYTES
    t_block: int = 50
    tau: int = 100
    r_max: int = 8
    duration: int = 2000
    drain: bool = True
    drain_limit: int = 20000
    # workload
    tx_rate: float = 1.0
    cross_fraction: float = 0.1
    n_accounts: int = 500
    initial_balance: int = 1000
    amount_max: int = 10
    fee_max: int = 5
    zipf: float = 0.0
    hot_range: bool = False          # rank popularity by key, not by index
    # faults
    malicious_fraction: float = 0.0
    behavior_mix: str = "silent=1,equivocate=1"
    inject_reject: float = 0.0
    inject_expiry: float = 0.0
    # cross-shard
    locking: str = "fine"
    lock_ttl: int = 200
    backoff_base: int = 4
    max_attempts: int = 6
    fee_weight: float = 1.0
    # network
    latency: str = "uniform:5:15"
    drop_rate: float = 0.0
    ticks_per_second: int = 1000
    # epochs and beacon
    epoch_length: int = 0            # 0: a single epoch
    w_hi: float = 0.0                # 0: self-scaling
    w_lo: float = 0.0
    beacon_mode: str = "xor"
    beacon_participants: int = 16
    w1: float = 0.5
    w2: float = 0.5
    # DoS
    dos_rate: float = 0.0
    dos_target: int = 0
    dos_senders: int = 5
    dos_defense: str = "none"        # none | static | adaptive
    rl_limit: int = 5
    rl_window: int = 100
    rl_penalty: int = 200
    # output
    trace: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def committee(self) -> int:
        return self.committee_size or self.n_nodes // self.n_shards

    def validate(self) -> None:
        if self.n_nodes < 1 or self.n_shards < 1:
            raise ConfigError("n_nodes and n_shards must be positive")
        if self.committee * self.n_shards > self.n_nodes:
            raise ConfigError(f"committee {self.committee} x {self.n_shards} shards "
                              f"exceeds {self.n_nodes} nodes")
        if self.committee < self.v_min:
            raise ConfigError(f"committee {self.committee} below v_min {self.v_min}")
        if not 0 <= self.malicious_fraction < 1:
            raise ConfigError("malicious_fraction must lie in [0, 1)")
        if not 0 <= self.cross_fraction <= 1:
            raise ConfigError("cross_fraction must lie in [0, 1]")
        if self.block_limit < self.header_bytes:
            raise ConfigError("block_limit smaller than a block header")
        if self.locking not in ("fine", "full"):
            raise ConfigError(f"locking must be fine or full, got {self.locking!r}")
        if self.dos_defense not in ("none", "static", "adaptive"):
            raise ConfigError(f"unknown dos_defense {self.dos_defense!r}")
        if self.beacon_mode not in ("xor", "average"):
            raise ConfigError(f"unknown beacon_mode {self.beacon_mode!r}")
        if self.n_accounts < 2:
            raise ConfigError("need at least two accounts")
        if self.t_block < 1 or self.tau < 1:
            raise ConfigError("t_block and tau must be positive")
        self.mix()
        try:
            parse_latency(self.latency)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def mix(self) -> list[tuple[str, float]]:
        out = []
        for part in filter(None, self.behavior_mix.split(",")):
            name, _, w = part.partition("=")
            name = name.strip()
            if name not in BEHAVIORS:
                raise ConfigError(f"unknown behavior {name!r}")
            try:
                out.append((name, float(w or 1)))
            except ValueError:
                raise ConfigError(f"bad weight in behavior_mix: {part!r}") from None
        return out

    def network(self) -> NetworkModel:
        return NetworkModel(parse_latency(self.latency), self.drop_rate)

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


FIELD_TYPES = {f.name: f.type for f in fields(ScenarioConfig)}


def _coerce(name: str, value: Any) -> Any:
    default = ScenarioConfig.__dataclass_fields__[name].default
    kind = type(default)
    if kind is bool:
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot read {value!r} as {kind.__name__}") from None


def config_from_mapping(data: Mapping[str, Any], base: ScenarioConfig | None = None
                        ) -> ScenarioConfig:
    unknown = sorted(set(data) - set(FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kw = {k: _coerce(k, v) for k, v in data.items()}
    return dataclasses.replace(base or ScenarioConfig(), **kw)


def load_config(path) -> ScenarioConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key/value mapping")
    for k, v in data.items():
        if isinstance(v, (dict, list)):
            raise ConfigError(f"{path}: key {k!r} must hold a scalar")
    return config_from_mapping(data)
