"""Scenario configuration and its key-value file format.

A configuration file is an INI-style document with one ``[scenario]`` section
holding ``key = value`` lines. Keys are the field names of
:class:`ScenarioConfig`; unknown keys are rejected. Tuple-valued keys take a
comma-separated list, e.g.::

    [scenario]
    num_sus = 4
    num_subchannels = 3
    max_multiplexed = 2
    pu_transition = 0.9, 0.1, 0.2, 0.8
    uav_start = 10.0, -20.0

Other sections (``[agent]``, ``[experiment]``) are read by the modules that
own them and ignored here.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Raised for an invalid or unreadable configuration."""


@dataclass(frozen=True)
class ScenarioConfig:
    """Every physical and simulation parameter of one UAV cognitive-NOMA cell.

    Defaults follow the published parameter table: 100 m cell, 50 m flight
    height, 5 m/s, 10 time steps, 6 subchannels, 20 W budget, 1.4 MHz,
    -174 dBm/Hz, free-space exponent 2, power-difference threshold 1 and GNG
    learning rate 0.01. ``num_sus`` and ``max_multiplexed`` are not fixed
    there; 6 users and M = 2 are used.
    """

    cell_radius: float = 100.0
    uav_height: float = 50.0
    uav_speed: float = 5.0
    num_time_steps: int = 10
    num_sus: int = 6
    num_subchannels: int = 6
    max_multiplexed: int = 2
    p_max: float = 20.0
    bandwidth: float = 1.4e6
    noise_density: float = -174.0  # dBm/Hz
    path_loss_exponent: float = 2.0
    power_diff_threshold: float = 1.0
    gng_learning_rate: float = 0.01
    t_max: float = 60.0
    seed: int = 0

    step_duration: float = 1.0
    su_perturbation: float = 1.0
    su_max_height: float = 2.0
    fading: float = 1.0
    shadowing: float = 1.0
    reference_gain: float = 1.0
    pu_transition: tuple[float, float, float, float] = (0.9, 0.1, 0.2, 0.8)
    pu_snr_db: float = 20.0
    block_length: int = 64
    uav_start: tuple[float, float] | None = None

    def __post_init__(self):
        for name in ("num_time_steps", "num_sus", "num_subchannels",
                     "max_multiplexed", "block_length"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_multiplexed > self.num_sus:
            raise ConfigError("max_multiplexed must not exceed num_sus")
        for name in ("p_max", "uav_height", "cell_radius", "bandwidth",
                     "step_duration", "t_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("uav_speed", "su_perturbation", "su_max_height",
                     "gng_learning_rate", "power_diff_threshold"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if len(self.pu_transition) != 4:
            raise ConfigError("pu_transition needs four entries (row-major 2x2)")
        a, b, c, d = self.pu_transition
        if min(self.pu_transition) < 0 or abs(a + b - 1) > 1e-12 or abs(c + d - 1) > 1e-12:
            raise ConfigError("pu_transition rows must be probability vectors")
        if self.uav_start is not None and len(self.uav_start) != 2:
            raise ConfigError("uav_start must be an (x, y) pair")
        # C6: the flight must fit in the mission time budget
        if self.num_time_steps * self.step_duration > self.t_max:
            raise ConfigError(
                f"flight time {self.num_time_steps * self.step_duration} s "
                f"exceeds t_max {self.t_max} s")

    @property
    def subchannel_bandwidth(self) -> float:
        return self.bandwidth / self.num_subchannels

    @property
    def noise_power(self) -> float:
        """Per-subchannel noise power in watts."""
        return 10.0 ** ((self.noise_density - 30.0) / 10.0) * self.subchannel_bandwidth

    @property
    def pu_rx_power(self) -> float:
        return self.noise_power * 10.0 ** (self.pu_snr_db / 10.0)

    @property
    def flight_time(self) -> float:
        return self.num_time_steps * self.step_duration

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def desk(cls, **changes) -> "ScenarioConfig":
        """Desk-scale default used by the experiment harness (N=4, K=3)."""
        base = dict(num_sus=4, num_subchannels=3, max_multiplexed=2)
        base.update(changes)
        return cls(**base)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"unknown scenario key {key!r}")
            kwargs[key] = _coerce(known[key], value)
        return cls(**kwargs)


_INT_FIELDS = {"num_time_steps", "num_sus", "num_subchannels", "max_multiplexed",
               "seed", "block_length"}


def _coerce(f: dataclasses.Field, value):
    if f.name in ("pu_transition", "uav_start"):
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
            if f.name == "uav_start":
                return None
            raise ConfigError("pu_transition cannot be empty")
        if isinstance(value, str):
            value = [v for v in value.replace(";", ",").split(",") if v.strip()]
        return tuple(float(v) for v in value)
    try:
        if f.name in _INT_FIELDS:
            fv = float(value)
            if not fv.is_integer():
                raise ConfigError(f"{f.name} must be an integer")
            return int(fv)
        out = float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {f.name}: {value!r}") from exc
    if not math.isfinite(out):
        raise ConfigError(f"{f.name} must be finite")
    return out


def read_sections(path: str | Path) -> dict[str, dict[str, str]]:
    """Read every section of a key-value configuration file."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return {name: dict(parser[name]) for name in parser.sections()}


def load_config(path: str | Path) -> ScenarioConfig:
    sections = read_sections(path)
    return ScenarioConfig.from_dict(sections.get("scenario", {}))


def dump_config(config: ScenarioConfig, path: str | Path, extra: dict[str, dict] | None = None) -> None:
    parser = configparser.ConfigParser()
    parser["scenario"] = {}
    for key, value in config.to_dict().items():
        if value is None:
            parser["scenario"][key] = "none"
        elif isinstance(value, list):
            parser["scenario"][key] = ", ".join(repr(float(v)) for v in value)
        else:
            parser["scenario"][key] = repr(value)
    for name, section in (extra or {}).items():
        parser[name] = {k: str(v) for k, v in section.items()}
    with open(path, "w") as fh:
        parser.write(fh)
