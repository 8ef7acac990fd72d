"""Simulation configuration: nested dataclasses, JSON I/O, dotted overrides."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field


@dataclass
class SensorCfg:
    fov_h_deg: float = 80.0
    fov_v_deg: float = 60.0
    max_range: float = 4.5
    ray_density: float = 0.5


@dataclass
class HgridCfg:
    levels: int = 2
    coarsest_cell_m: float = 4.0
    alpha_u: float = 0.5
    delta_u: int = 10


@dataclass
class FrontierCfg:
    eps_f1: int = 1         # ideal sensing: no noise clusters to filter
    n_vf: int = 3
    r_min: float = 1.0
    r_max: float = 2.5
    n_angles: int = 12
    n_radii: int = 3
    z_offsets: tuple = (0.0,)
    coverage_frac: float = 0.3


@dataclass
class RoutingCfg:
    alpha_rho: float = 0.6
    beta_con_frac: float = 0.3  # beta_con = frac * mean finite cell-cell cost
    restarts: int = 3
    ils_iters: int = 8


@dataclass
class PlannerCfg:
    n_cp: int = 3
    w_con: float = 0.5
    v_max: float = 1.5
    yaw_rate_max: float = 0.9
    d_min: float = 0.8


@dataclass
class NetCfg:
    range_m: float = math.inf
    loss: float = 0.0
    latency_s: tuple = (0.01, 0.05)
    bookkeeping_period_s: float = 1.0
    eps_att: float = 1.0
    peer_stale_s: float = 1.0
    state_period_s: float = 0.3


@dataclass
class SimConfig:
    scene: str = "pillar"          # scene name or path to a scene JSON
    scene_seed: int | None = None  # defaults to `seed`
    robots: int = 4
    start_poses: list | None = None
    seed: int = 0
    variant: str = "Full"          # Full | H_mTSP | NoHgrid | H_BFS
    dt: float = 0.1
    max_time: float = 600.0
    sense_period: float = 0.2
    update_period: float = 0.5
    coord_period: float = 0.5
    replan_period: float = 2.0
    quiesce_time: float = 0.0      # extra loss-free comm-only time after the run
    sensor: SensorCfg = field(default_factory=SensorCfg)
    hgrid: HgridCfg = field(default_factory=HgridCfg)
    frontier: FrontierCfg = field(default_factory=FrontierCfg)
    routing: RoutingCfg = field(default_factory=RoutingCfg)
    planner: PlannerCfg = field(default_factory=PlannerCfg)
    net: NetCfg = field(default_factory=NetCfg)

    def validate(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.variant not in ("Full", "H_mTSP", "NoHgrid", "H_BFS"):
            raise ValueError(f"unknown variant {self.variant}")
        for period in (self.sense_period, self.update_period, self.coord_period,
                       self.net.state_period_s, self.net.bookkeeping_period_s):
            k = period / self.dt
            if abs(k - round(k)) > 1e-6:
                raise ValueError(f"period {period} is not a multiple of dt {self.dt}")


def _to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_dict(x) for x in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return obj


def config_to_dict(cfg: SimConfig) -> dict:
    return _to_dict(cfg)


def _coerce(value, template):
    if isinstance(template, bool):
        return bool(value)
    if isinstance(template, int) and not isinstance(value, bool):
        return int(value)
    if isinstance(template, float):
        if isinstance(value, str):
            return math.inf if value.lower() in ("inf", "+inf", "infinity") else float(value)
        return float(value)
    if isinstance(template, tuple):
        return tuple(float(v) for v in value)
    return value


def _fill(dc, data: dict):
    for f in dataclasses.fields(dc):
        if f.name not in data:
            continue
        cur = getattr(dc, f.name)
        val = data[f.name]
        if dataclasses.is_dataclass(cur):
            _fill(cur, val)
        else:
            setattr(dc, f.name, _coerce(val, cur) if cur is not None else val)
    return dc


def config_from_dict(data: dict) -> SimConfig:
    cfg = SimConfig()
    _fill(cfg, data)
    return cfg


def load_config(path) -> SimConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: SimConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)


def set_dotted(cfg: SimConfig, dotted: str, value: str) -> None:
    """Apply an override like `net.range_m=10` with type coercion."""
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        obj = getattr(obj, p)
    cur = getattr(obj, parts[-1])
    if isinstance(cur, bool):
        setattr(obj, parts[-1], value.lower() in ("1", "true", "yes"))
    elif isinstance(cur, int):
        setattr(obj, parts[-1], int(value))
    elif isinstance(cur, float):
        setattr(obj, parts[-1], math.inf if str(value).lower() == "inf" else float(value))
    elif isinstance(cur, tuple):
        setattr(obj, parts[-1], tuple(float(v) for v in str(value).split(":")))
    else:
        setattr(obj, parts[-1], value)
