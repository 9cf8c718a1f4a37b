"""Dataclass configs and the INI scenario file loader.

A scenario file is plain INI with sections [scenario] [graph] [time] [fleet]
[stations] [demand] [economics] [charging] [heuristic] [nets] [train]; every
key maps one-to-one onto a dataclass field below. See scenarios/ for
checked-in examples.
"""
from __future__ import annotations

import configparser
import math
import os
import types
import typing
from dataclasses import dataclass, field, fields

from .demand import DemandModel, load_demand_csv, synthetic_model
from .hexgrid import RegionGraph, build_hex_graph
from .timegrid import TimeGrid


class ScenarioError(ValueError):
    pass


@dataclass
class SimConfig:
    """Physics, economics and dispatcher constants."""

    xi_max: float = 30.0
    xi_knee: float = 24.0
    xi_safety: float = 3.0
    rate_fast: float = 0.6
    rate_slow: float = 0.2

    travel_cost: float = 1.0
    revenue_rate: float = 4.0
    wait_cost: float = 0.05
    abandon_penalty: float = 10.0
    charge_cost_rate: float = 2.0
    queue_wait_cost: float | None = None

    high_soc_frac: float = 0.5
    omega_scale: float = 5.0
    omega_scale_charge: float = 100.0
    relocation_use_central_flow: bool = True
    book_wait_in_area_reward: bool = False
    max_session_intervals: int = 0  # 0 disables the cap

    init_soc_low_frac: float = 1.0 / 3.0
    init_soc_high_frac: float = 1.0

    def __post_init__(self):
        if not (self.rate_fast > self.rate_slow > 0):
            raise ScenarioError("need rate_fast > rate_slow > 0")
        if not (0 < self.xi_safety < self.xi_knee < self.xi_max):
            raise ScenarioError("need 0 < xi_safety < xi_knee < xi_max")

    @property
    def queue_cost(self) -> float:
        return self.wait_cost if self.queue_wait_cost is None else self.queue_wait_cost

    @property
    def high_soc_threshold(self) -> float:
        return self.high_soc_frac * self.xi_max

    def charge_intervals(self, soc: float, target: float) -> int:
        """Whole intervals needed to charge from soc to target."""
        target = min(target, self.xi_max)
        if target <= soc:
            return 0
        t = 0.0
        if soc < self.xi_knee:
            t += (min(target, self.xi_knee) - soc) / self.rate_fast
        if target > self.xi_knee:
            t += (target - max(soc, self.xi_knee)) / self.rate_slow
        return int(math.ceil(t - 1e-12))

    @property
    def max_charge_cost(self) -> float:
        """Worst-case session cost: safety floor to full at the energy price."""
        return self.charge_cost_rate * self.charge_intervals(self.xi_safety, self.xi_max)


@dataclass
class NetConfig:
    """Network shapes and action-range constants."""

    gat_dim: int = 16
    gat_heads: int = 8
    gat_out: int = 16
    leaky_slope: float = 0.2

    central_actor_hidden: int = 256
    central_actor_layers: int = 2
    central_critic_hidden: int = 256
    central_critic_layers: int = 3

    area_hidden: int = 512
    area_layers: int = 1
    encoder_hidden: int = 512
    encoder_layers: int = 1

    latent_dim: int = 32
    context_batch: int = 32
    temporal_dim: int = 8

    logstd_min: float = -20.0
    logstd_max: float = 2.0
    sigma_floor: float = 1e-4

    f_max: float = 0.3
    q_min: float = 0.8
    p_max: float = 0.2

    forecast_periods: int = 2


@dataclass
class TrainConfig:
    gamma: float = 0.99
    polyak: float = 0.005
    lambda_penalty: float = 100.0

    central_batch: int = 32
    central_lr_actor: float = 1e-5
    central_lr_critic: float = 1e-4
    central_lr_temp: float = 3e-4

    area_batch: int = 16
    area_lr_actor: float = 3e-5
    area_lr_critic: float = 3e-4
    area_lr_temp: float = 1e-4
    lr_encoder: float = 1e-4

    inner_steps: int = 10
    train_tasks_per_epoch: int = 10
    val_tasks_per_epoch: int = 5
    meta_iters: int = 3
    beta_r: float = 0.8
    kl_max: float = 0.1
    kl_anneal_epochs: int = 300

    buffer_transitions: int = 50000
    buffer_context: int = 10000

    fs_steps: int = 10
    fs_central_every: int = 5
    fs_clip: float = 1.0
    fs_central_lr_factor: float = 0.1
    fs_warmup_episodes: int = 1

    def kl_weight(self, epoch: int) -> float:
        """Linear ramp 0 -> kl_max over kl_anneal_epochs, constant after."""
        if self.kl_anneal_epochs <= 0:
            return self.kl_max
        frac = min(1.0, max(0.0, epoch / self.kl_anneal_epochs))
        return self.kl_max * frac


@dataclass
class Scenario:
    name: str = "scenario"

    region_count: int = 5
    layout_descriptor: str = "preset:compact"
    tau: int = 1
    eps: float = 1.0

    periods: int = 8
    intervals_per_period: int = 10
    minutes_per_interval: int = 1

    fleet_size: int = 30
    online_ramp_periods: int = 1
    init_placement: str = "demand"  # or "uniform"

    n_stations: int = 2
    piles: int = 4

    base_rate: float = 1.0
    peak_rate: float = 1.0
    demand_scale: float = 1.0
    origin_weights: tuple[float, ...] | None = None
    dest_weights: tuple[float, ...] | None = None
    pickup_window: int = 0
    max_extra_wait_minutes: int = 15
    demand_csv: str | None = None

    sim: SimConfig = field(default_factory=SimConfig)
    nets: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def build_graph(self) -> RegionGraph:
        return build_hex_graph(
            self.region_count, self.layout_descriptor, self.tau, self.eps
        )

    def build_grid(self) -> TimeGrid:
        return TimeGrid(
            self.periods, self.intervals_per_period, self.minutes_per_interval
        )

    def build_demand_model(self, graph: RegionGraph, grid: TimeGrid) -> DemandModel:
        return synthetic_model(
            graph,
            grid,
            base_rate=self.base_rate,
            peak_rate=self.peak_rate,
            origin_weights=self.origin_weights,
            dest_weights=self.dest_weights,
            scale=self.demand_scale,
            revenue_rate=self.sim.revenue_rate,
            abandon_penalty=self.sim.abandon_penalty,
            max_extra_wait_minutes=self.max_extra_wait_minutes,
            pickup_window=self.pickup_window,
        )

    def demand_csv_rows(self):
        if self.demand_csv is None:
            return None
        return load_demand_csv(self.demand_csv)


_SECTION_TARGETS = {
    "scenario": (None, {"name"}),
    "graph": (None, {"region_count", "layout_descriptor", "tau", "eps"}),
    "time": (None, {"periods", "intervals_per_period", "minutes_per_interval"}),
    "fleet": (None, {"fleet_size", "online_ramp_periods", "init_placement"}),
    "stations": (None, {"n_stations", "piles"}),
    "demand": (
        None,
        {
            "base_rate", "peak_rate", "demand_scale", "origin_weights",
            "dest_weights", "pickup_window", "max_extra_wait_minutes",
            "demand_csv",
        },
    ),
    "economics": ("sim", None),
    "charging": ("sim", None),
    "heuristic": ("sim", None),
    "nets": ("nets", None),
    "train": ("train", None),
}

_SECTION_ALIASES = {
    ("graph", "regions"): "region_count",
    ("graph", "descriptor"): "layout_descriptor",
    ("fleet", "size"): "fleet_size",
    ("stations", "count"): "n_stations",
    ("demand", "scale"): "demand_scale",
    ("demand", "csv"): "demand_csv",
}


def _coerce(raw: str, typ):
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if raw.strip().lower() in ("none", ""):
            return None
        return _coerce(raw, args[0])
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw.strip())
    if typ is float:
        return float(raw.strip())
    if typ is str:
        return raw.strip()
    if origin is tuple:
        inner = typing.get_args(typ)[0]
        return tuple(_coerce(x, inner) for x in raw.split(",") if x.strip())
    raise ValueError(f"unsupported config type {typ}")


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def load_scenario(path: str) -> Scenario:
    if not os.path.exists(path):
        raise ScenarioError(f"scenario file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh, source=path)
    except configparser.Error as exc:
        raise ScenarioError(f"scenario parse error: {exc}") from exc

    scenario = Scenario(name=os.path.splitext(os.path.basename(path))[0])
    top_types = _field_types(Scenario)
    sub_types = {
        "sim": _field_types(SimConfig),
        "nets": _field_types(NetConfig),
        "train": _field_types(TrainConfig),
    }

    for section in parser.sections():
        if section not in _SECTION_TARGETS:
            raise ScenarioError(f"unknown section [{section}] in {path}")
        target, allowed = _SECTION_TARGETS[section]
        for key, raw in parser.items(section):
            name = _SECTION_ALIASES.get((section, key), key)
            if target is None:
                if allowed is not None and name not in allowed:
                    raise ScenarioError(
                        f"unknown key {key!r} in section [{section}] of {path}"
                    )
                if name not in top_types:
                    raise ScenarioError(f"unknown key {key!r} in [{section}]")
                try:
                    setattr(scenario, name, _coerce(raw, top_types[name]))
                except ValueError as exc:
                    raise ScenarioError(
                        f"bad value for [{section}] {key} = {raw!r}: {exc}"
                    ) from exc
            else:
                obj = getattr(scenario, target)
                ts = sub_types[target]
                if name not in ts:
                    raise ScenarioError(
                        f"unknown key {key!r} in section [{section}] of {path}"
                    )
                try:
                    setattr(obj, name, _coerce(raw, ts[name]))
                except ValueError as exc:
                    raise ScenarioError(
                        f"bad value for [{section}] {key} = {raw!r}: {exc}"
                    ) from exc
    # re-validate cross-field constraints after overrides
    SimConfig.__post_init__(scenario.sim)
    return scenario
