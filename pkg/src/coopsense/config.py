"""Scenario configuration: a flat TOML table of keys mapped onto ScenarioConfig."""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODES = ("COOP", "CV", "ORACLE")
DETECTION_INPUTS = ("merged", "per_sensor")


class ConfigError(ValueError):
    """Invalid or infeasible scenario configuration."""


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str = "COOP"
    seed: int = 1
    duration: float = 900.0
    warmup: float = 120.0
    dt: float = 0.1
    # traffic
    volume_main: float = 500.0
    volume_side: float = 360.0
    cav_rate: float = 0.0
    cv_rate: float = 0.0
    left_ratio: float = 0.5
    lane_width: float = 3.5
    upstream_length: float = 250.0
    downstream_length: float = 120.0
    # sensing
    infra_sensors: tuple = ((0.0, 0.0, 0.0, 3.0),)  # (x, y, yaw, height)
    cav_mount_height: float = 2.4
    lidar_channels: int = 64
    lidar_vfov_min: float = -25.0
    lidar_vfov_max: float = 5.0
    lidar_azimuth_step: float = 0.4
    lidar_max_range: float = 100.0
    lidar_range_noise: float = 0.0
    roadside_clutter: bool = True
    clutter_seed: int = 7
    merge_convention: str = "corrected"
    perception_period: float = 1.0
    cv_position_noise: float = 1.5
    # detection and fusion
    detection_input: str = "merged"
    ransac_distance: float = 0.2
    ransac_iters: int = 3000
    ransac_passes: int = 2
    dbscan_eps: float = 1.25
    dbscan_min_pts: int = 3
    dedupe_threshold: float = 3.0  # under the 3.5 m lane spacing so side-by-side cars survive
    # control
    min_green: float = 5.0
    yellow: float = 4.0
    all_red: float = 1.0
    decision_period: float = 1.0
    staleness: float = 1.0
    upstream_window: float = 200.0
    downstream_window: float = 100.0
    # evaluation
    ecvpr_radius: float = 2.5
    ap_min_points: int = 1  # AP ground truth needs this many returns; 0 keeps all in range

    def __post_init__(self):
        object.__setattr__(self, "mode", str(self.mode).upper())
        object.__setattr__(self, "infra_sensors",
                           tuple(tuple(float(v) for v in s) for s in self.infra_sensors))
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("duration", "dt", "perception_period", "decision_period",
                     "dedupe_threshold", "ecvpr_radius", "cav_mount_height"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive number")
        for name in ("warmup", "volume_main", "volume_side", "cv_position_noise",
                     "lidar_range_noise", "staleness"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be >= 0")
        if self.ap_min_points < 0:
            raise ConfigError("ap_min_points must be >= 0")
        if not (0 <= self.cav_rate <= 1 and 0 <= self.cv_rate <= 1):
            raise ConfigError("cav_rate and cv_rate must lie in [0, 1]")
        if self.cav_rate + self.cv_rate > 1 + 1e-12:
            raise ConfigError("cav_rate + cv_rate must not exceed 1")
        if not 0 <= self.left_ratio <= 1:
            raise ConfigError("left_ratio must lie in [0, 1]")
        for name in ("perception_period", "decision_period"):
            ticks = getattr(self, name) / self.dt
            if abs(ticks - round(ticks)) > 1e-9:
                raise ConfigError(f"{name} must be a whole number of ticks")
        if self.upstream_length < 200 or self.downstream_length < 100:
            raise ConfigError("upstream_length must be >= 200 and downstream_length >= 100")
        for s in self.infra_sensors:
            if len(s) != 4 or s[3] <= 0:
                raise ConfigError("each infra sensor is [x, y, yaw, height] with height > 0")
        if self.mode == "COOP" and not self.infra_sensors:
            raise ConfigError("COOP mode needs at least one infrastructure sensor")
        if self.detection_input not in DETECTION_INPUTS:
            raise ConfigError(f"detection_input must be one of {DETECTION_INPUTS}")
        if self.merge_convention not in ("corrected", "literal", "se3"):
            raise ConfigError("merge_convention must be corrected, literal or se3")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["infra_sensors"] = [list(s) for s in self.infra_sensors]
        return d

    def replace(self, **changes) -> "ScenarioConfig":
        return from_dict({**self.to_dict(), **changes})


_FIELDS = {f.name: f for f in fields(ScenarioConfig)}


def _coerce(name: str, value):
    default = _FIELDS[name].default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{name} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    if name == "infra_sensors":
        try:
            return tuple(tuple(float(v) for v in s) for s in value)
        except (TypeError, ValueError):
            raise ConfigError("infra_sensors must be a list of [x, y, yaw, height]") from None
    return value


def from_dict(data: dict) -> ScenarioConfig:
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v) for k, v in data.items()}
    try:
        return ScenarioConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def loads(text: str) -> ScenarioConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config is flat; unexpected table(s): {', '.join(nested)}")
    return from_dict(data)


def load(path) -> ScenarioConfig:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(raw.decode("utf-8"))


def dumps(cfg: ScenarioConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, bool):
            lines.append(f"{k} = {'true' if v else 'false'}")
        elif isinstance(v, str):
            lines.append(f'{k} = "{v}"')
        elif isinstance(v, list):
            lines.append(f"{k} = {[list(s) for s in v]}")
        else:
            lines.append(f"{k} = {v!r}")
    return "\n".join(lines) + "\n"
