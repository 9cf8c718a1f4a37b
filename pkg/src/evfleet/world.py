"""Interval-level fleet simulator.

The world advances one operational interval at a time. Within an interval the
processing order is fixed and documented here, because several invariants are
stated against it:

1. begin_interval: vehicles whose service start has arrived come online;
   requests arriving this interval become visible.
2. assignment validation: the whole batch is checked against flow, demand and
   charging-capacity limits before anything mutates.
3. assignment application in vehicle-id order.
4. movement progression and engagement completion in vehicle-id order.
5. charging progression per station in region order, pile release, queue pull.
6. request aging: waiting-cost accrual and abandonment.
7. charge-queue waiting accrual.

Idle vehicles consume no energy. All randomness lives in world construction;
stepping is fully deterministic.
"""
from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field

from .config import Scenario, SimConfig
from .demand import (
    ABANDONED, MATCHED, PENDING, SERVED,
    Request, generate_demand, requests_from_counts,
)
from .hexgrid import RegionGraph
from .seeding import child_seed
from .tasks import ChargingLayout
from .timegrid import TimeGrid

OFFLINE = "offline"
IDLE = "idle"
SERVING = "serving"
RELOCATING = "relocating"
TO_CHARGE = "enroute_charge"
CHARGING = "charging"

STATUSES = (OFFLINE, IDLE, SERVING, RELOCATING, TO_CHARGE, CHARGING)

SERVE = "serve"
RELOCATE = "relocate"
CHARGE = "charge"


class AssignmentError(ValueError):
    """Malformed assignment batch (bad references, duplicates, rule breaches)."""


class ConstraintViolation(ValueError):
    """An assignment batch breaching a dispatch flow limit.

    kind is one of 'flow' (regional outflow above idle supply), 'demand'
    (matches above pending requests) or 'charging' (charge inflow above
    effective station capacity).
    """

    def __init__(self, kind: str, region: int, detail: str):
        super().__init__(f"{kind} constraint violated in region {region}: {detail}")
        self.kind = kind
        self.region = region


def charge_soc(soc: float, d_eta: float, cfg: SimConfig) -> float:
    """Closed-form piecewise-linear charging curve, clamped at the ceiling.

    Fast rate below the knee, slow rate above, evaluated exactly for the
    whole duration (no per-interval accumulation drift).
    """
    if d_eta <= 0:
        return soc
    if soc >= cfg.xi_max:
        return cfg.xi_max
    if soc + cfg.rate_fast * d_eta < cfg.xi_knee:
        return soc + cfg.rate_fast * d_eta
    if soc < cfg.xi_knee:
        spill = d_eta - (cfg.xi_knee - soc) / cfg.rate_fast
        return min(cfg.xi_max, cfg.xi_knee + cfg.rate_slow * spill)
    return min(cfg.xi_max, soc + cfg.rate_slow * d_eta)


def recovery_rate(soc: float, cfg: SimConfig) -> float:
    """Instantaneous charging rate at the given SOC."""
    return cfg.rate_fast if soc < cfg.xi_knee else cfg.rate_slow


@dataclass
class Assignment:
    kind: str
    vehicle_id: int
    dest: int
    request_id: int | None = None
    charge_target: float | None = None
    safety: bool = False


@dataclass
class Vehicle:
    id: int
    region: int
    soc: float
    status: str = OFFLINE
    service_start: int = 0
    kind: str | None = None
    dest: int | None = None
    request_id: int | None = None
    remaining_hops: int = 0
    hop_timer: int = 0
    charge_target: float = 0.0
    prepaid: bool = False
    cost_region: int = 0
    session_len: int = 0
    stranded: bool = False

    @property
    def engaged(self) -> bool:
        return self.status in (SERVING, RELOCATING, TO_CHARGE)

    def dispatchable(self) -> bool:
        return self.status == IDLE and not self.stranded


@dataclass
class StationState:
    region: int
    capacity: int
    on_pile: list[int] = field(default_factory=list)
    queue: deque = field(default_factory=deque)

    @property
    def occupied(self) -> int:
        return len(self.on_pile)

    @property
    def free(self) -> int:
        return self.capacity - len(self.on_pile)


@dataclass
class PeriodLedger:
    """Everything booked since the last period boundary."""

    n: int
    idle_at_start: list[int] = None
    revenue_raw: list[float] = None       # fares by request origin
    reloc_cost: list[float] = None        # by dispatch origin
    charge_cost: list[float] = None       # trip travel + session energy, by dispatch origin
    wait_cost: list[float] = None         # by request origin
    abandon_cost: list[float] = None
    dispatched_out: list[int] = None
    returned_idle: list[int] = None
    came_online: list[int] = None
    reloc_dep: list[int] = None           # relocation departures by origin
    reloc_arr: list[int] = None           # relocation destinations at dispatch time
    charge_dispatch: list[int] = None     # charge trips by destination station region
    match_flow: list[list[int]] = None    # vehicle region -> request origin
    reloc_flow: list[list[int]] = None
    charge_flow: list[list[int]] = None
    demand_seen: list[int] = None         # pending at start + arrivals, by origin
    served_count: int = 0

    def __post_init__(self):
        n = self.n
        for name in (
            "revenue_raw", "reloc_cost", "charge_cost", "wait_cost",
            "abandon_cost",
        ):
            if getattr(self, name) is None:
                setattr(self, name, [0.0] * n)
        for name in (
            "idle_at_start", "dispatched_out", "returned_idle", "came_online",
            "reloc_dep", "reloc_arr", "charge_dispatch", "demand_seen",
        ):
            if getattr(self, name) is None:
                setattr(self, name, [0] * n)
        for name in ("match_flow", "reloc_flow", "charge_flow"):
            if getattr(self, name) is None:
                setattr(self, name, [[0] * n for _ in range(n)])


@dataclass
class EpisodeLedger:
    revenue: float = 0.0
    travel_cost: float = 0.0
    wait_cost: float = 0.0
    charge_cost: float = 0.0
    abandon_cost: float = 0.0
    served: int = 0
    abandoned: int = 0
    stranded_events: int = 0
    charge_visits: int = 0
    charge_wait_intervals: int = 0


class WorldState:
    """Mutable single-writer simulation state."""

    def __init__(
        self,
        graph: RegionGraph,
        grid: TimeGrid,
        cfg: SimConfig,
        layout: ChargingLayout,
        vehicles: list[Vehicle],
        requests: list[Request],
    ):
        self.graph = graph
        self.grid = grid
        self.cfg = cfg
        self.layout = layout
        self.vehicles = vehicles
        self.requests = requests
        self.stations = {
            j: StationState(region=j, capacity=layout.capacity(j))
            for j in layout.stations
        }
        self.clock = 0
        self._begun = -1
        self._arrival_cursor = 0
        self._requests_by_arrival = sorted(requests, key=lambda r: (r.arrival, r.id))
        self.pending_ids: list[int] = []
        self.ledger = EpisodeLedger()
        self.period = PeriodLedger(n=graph.n)
        self.events: list[tuple] = []
        self.record_events = True

    # ---------------------------------------------------------------- helpers

    @property
    def n(self) -> int:
        return self.graph.n

    def vehicle(self, vid: int) -> Vehicle:
        return self.vehicles[vid]

    def request(self, rid: int) -> Request:
        return self.requests[rid]

    def idle_counts(self) -> list[int]:
        x = [0] * self.n
        for v in self.vehicles:
            if v.status == IDLE:
                x[v.region] += 1
        return x

    def status_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in STATUSES}
        for v in self.vehicles:
            counts[v.status] += 1
        return counts

    def pending_requests(self) -> list[Request]:
        return [self.requests[i] for i in self.pending_ids]

    def pending_counts(self) -> list[int]:
        c = [0] * self.n
        for i in self.pending_ids:
            c[self.requests[i].origin] += 1
        return c

    def station_capacity(self, j: int) -> int:
        return self.layout.capacity(j)

    def emit(self, kind: str, vehicle: int, region: int, **payload) -> None:
        if self.record_events:
            self.events.append((self.clock, kind, vehicle, region, payload))

    def note_stranded(self, vid: int) -> None:
        v = self.vehicles[vid]
        if not v.stranded:
            v.stranded = True
            self.ledger.stranded_events += 1
            self.emit("stranded", vid, v.region, soc=round(v.soc, 6))

    # ------------------------------------------------------------- period api

    def start_period(self) -> None:
        self.period = PeriodLedger(n=self.n)
        self.period.idle_at_start = self.idle_counts()
        self.period.demand_seen = self.pending_counts()

    def idle_identity_report(self) -> tuple[list[int], list[int]]:
        """Recounted idle vector vs the ledger-predicted one."""
        per = self.period
        predicted = [
            per.idle_at_start[j]
            - per.dispatched_out[j]
            + per.returned_idle[j]
            + per.came_online[j]
            for j in range(self.n)
        ]
        return self.idle_counts(), predicted

    # ---------------------------------------------------------------- stepping

    def begin_interval(self) -> None:
        """Activations and request arrivals for the current clock. Idempotent."""
        if self._begun == self.clock:
            return
        self._begun = self.clock
        for v in self.vehicles:
            if v.status == OFFLINE and v.service_start <= self.clock:
                v.status = IDLE
                self.period.came_online[v.region] += 1
                self.emit("online", v.id, v.region)
        while (
            self._arrival_cursor < len(self._requests_by_arrival)
            and self._requests_by_arrival[self._arrival_cursor].arrival <= self.clock
        ):
            r = self._requests_by_arrival[self._arrival_cursor]
            self._arrival_cursor += 1
            self.pending_ids.append(r.id)
            self.period.demand_seen[r.origin] += 1
            self.emit("request", -1, r.origin, request=r.id, dest=r.dest)

    def step_interval(self, assignments: list[Assignment]) -> list[tuple]:
        self.begin_interval()
        mark = len(self.events)
        self._validate(assignments)
        for a in sorted(assignments, key=lambda a: a.vehicle_id):
            self._apply(a)
        self._progress_movement()
        self._progress_charging()
        self._age_requests()
        for j in sorted(self.stations):
            self.ledger.charge_wait_intervals += len(self.stations[j].queue)
        self.clock += 1
        return self.events[mark:]

    # ------------------------------------------------------------- validation

    def _validate(self, assignments: list[Assignment]) -> None:
        seen = set()
        out_by_region = [0] * self.n
        match_by_origin = [0] * self.n
        charge_by_dest = [0] * self.n
        pending_set = set(self.pending_ids)
        idle = self.idle_counts()
        for a in assignments:
            if a.kind not in (SERVE, RELOCATE, CHARGE):
                raise AssignmentError(f"unknown assignment kind {a.kind!r}")
            if not 0 <= a.vehicle_id < len(self.vehicles):
                raise AssignmentError(f"no vehicle {a.vehicle_id}")
            if a.vehicle_id in seen:
                raise AssignmentError(f"vehicle {a.vehicle_id} assigned twice")
            seen.add(a.vehicle_id)
            v = self.vehicles[a.vehicle_id]
            if v.status != IDLE:
                raise AssignmentError(
                    f"vehicle {a.vehicle_id} is {v.status}, not idle"
                )
            if not 0 <= a.dest < self.n:
                raise AssignmentError(f"destination {a.dest} out of range")
            out_by_region[v.region] += 1
            if a.kind == SERVE:
                if a.request_id is None or a.request_id not in pending_set:
                    raise AssignmentError(
                        f"request {a.request_id} is not pending"
                    )
                pending_set.discard(a.request_id)
                r = self.requests[a.request_id]
                if r.origin != v.region:
                    raise AssignmentError(
                        f"vehicle {v.id} in region {v.region} cannot serve "
                        f"request {r.id} originating in region {r.origin}"
                    )
                if a.dest != r.dest:
                    raise AssignmentError("assignment destination != request destination")
                match_by_origin[r.origin] += 1
            elif a.kind == CHARGE:
                if self.layout.bits[a.dest] == 0:
                    raise ConstraintViolation(
                        "charging", a.dest, "no charging service in destination"
                    )
                charge_by_dest[a.dest] += 1
        for j in range(self.n):
            if out_by_region[j] > idle[j]:
                raise ConstraintViolation(
                    "flow", j,
                    f"outflow {out_by_region[j]} exceeds idle supply {idle[j]}",
                )
            if match_by_origin[j] > self.period.demand_seen[j] - sum(
                self.period.match_flow[i][j] for i in range(self.n)
            ):
                raise ConstraintViolation(
                    "demand", j,
                    f"matches exceed pending demand originating in region {j}",
                )
            cap = self.station_capacity(j)
            if self.period.charge_dispatch[j] + charge_by_dest[j] > cap:
                raise ConstraintViolation(
                    "charging", j,
                    f"charge inflow {self.period.charge_dispatch[j] + charge_by_dest[j]}"
                    f" exceeds capacity {cap}",
                )

    # ------------------------------------------------------------ application

    def _apply(self, a: Assignment) -> None:
        v = self.vehicles[a.vehicle_id]
        hops = self.graph.hop_distance(v.region, a.dest)
        travel = hops * self.cfg.travel_cost
        origin = v.region
        v.kind = a.kind
        v.dest = a.dest
        v.remaining_hops = hops
        v.hop_timer = self.graph.tau if hops > 0 else 0
        v.cost_region = origin
        self.period.dispatched_out[origin] += 1
        self.ledger.travel_cost += travel
        if a.kind == SERVE:
            r = self.requests[a.request_id]
            r.status = MATCHED
            self.pending_ids.remove(r.id)
            v.status = SERVING
            v.request_id = r.id
            self.period.match_flow[origin][r.origin] += 1
            self.emit("assign_serve", v.id, origin, request=r.id, dest=a.dest)
        elif a.kind == RELOCATE:
            v.status = RELOCATING
            self.period.reloc_cost[origin] += travel
            self.period.reloc_dep[origin] += 1
            self.period.reloc_arr[a.dest] += 1
            self.period.reloc_flow[origin][a.dest] += 1
            self.emit("assign_relocate", v.id, origin, dest=a.dest)
        else:
            v.status = TO_CHARGE
            v.prepaid = a.safety
            v.charge_target = (
                a.charge_target if a.charge_target is not None else self.cfg.xi_max
            )
            v.session_len = 0
            self.period.charge_cost[origin] += travel
            self.period.charge_dispatch[a.dest] += 1
            self.period.charge_flow[origin][a.dest] += 1
            if a.safety:
                prepay = self.cfg.max_charge_cost
                self.ledger.charge_cost += prepay
                self.period.charge_cost[origin] += prepay
            self.emit(
                "assign_charge", v.id, origin,
                dest=a.dest, safety=a.safety, target=round(v.charge_target, 6),
            )

    # -------------------------------------------------------------- progression

    def _progress_movement(self) -> None:
        for v in self.vehicles:
            if not v.engaged:
                continue
            if v.remaining_hops > 0:
                v.hop_timer -= 1
                if v.hop_timer > 0:
                    continue
                v.region = self.graph.next_hop[v.region][v.dest]
                v.soc -= self.graph.eps
                v.remaining_hops -= 1
                self.emit("hop", v.id, v.region)
                if v.soc < -1e-9:
                    raise RuntimeError(
                        f"vehicle {v.id} drained below zero; dispatcher broke "
                        "the energy-feasibility contract"
                    )
                v.soc = max(v.soc, 0.0)
                if v.remaining_hops > 0:
                    v.hop_timer = self.graph.tau
                    continue
            self._arrive(v)

    def _arrive(self, v: Vehicle) -> None:
        if v.kind == SERVE:
            r = self.requests[v.request_id]
            r.status = SERVED
            self.ledger.revenue += r.revenue
            self.ledger.served += 1
            self.period.revenue_raw[r.origin] += r.revenue
            self.period.served_count += 1
            self.emit("served", v.id, v.region, request=r.id)
            self._release(v)
        elif v.kind == RELOCATE:
            self.emit("relocated", v.id, v.region)
            self._release(v)
        else:
            st = self.stations[v.dest]
            self.ledger.charge_visits += 1
            if st.free > 0:
                st.on_pile.append(v.id)
                self.emit("plug", v.id, v.region)
            else:
                st.queue.append(v.id)
                self.emit("queue_join", v.id, v.region)
            v.status = CHARGING
            v.kind = None
            v.dest = None

    def _release(self, v: Vehicle) -> None:
        v.status = IDLE
        v.kind = None
        v.dest = None
        v.request_id = None
        self.period.returned_idle[v.region] += 1

    def _progress_charging(self) -> None:
        cfg = self.cfg
        for j in sorted(self.stations):
            st = self.stations[j]
            finished = []
            for vid in st.on_pile:
                v = self.vehicles[vid]
                v.soc = charge_soc(v.soc, 1, cfg)
                v.session_len += 1
                if not v.prepaid:
                    self.ledger.charge_cost += cfg.charge_cost_rate
                    self.period.charge_cost[v.cost_region] += cfg.charge_cost_rate
                done = v.soc >= min(v.charge_target, cfg.xi_max) - 1e-12
                if cfg.max_session_intervals and v.session_len >= cfg.max_session_intervals:
                    done = True
                if done:
                    finished.append(vid)
            for vid in finished:
                st.on_pile.remove(vid)
                v = self.vehicles[vid]
                v.prepaid = False
                self.emit("unplug", vid, j, soc=round(v.soc, 6))
                self._release(v)
            while st.free > 0 and st.queue:
                vid = st.queue.popleft()
                st.on_pile.append(vid)
                self.emit("plug", vid, j)

    def _age_requests(self) -> None:
        cfg = self.cfg
        still = []
        for rid in self.pending_ids:
            r = self.requests[rid]
            if self.clock > r.latest_pickup:
                r.wait_accrued += 1
                self.ledger.wait_cost += cfg.wait_cost
                self.period.wait_cost[r.origin] += cfg.wait_cost
            if self.clock - r.latest_pickup >= r.max_extra_wait:
                r.status = ABANDONED
                self.ledger.abandoned += 1
                self.ledger.abandon_cost += r.abandon_penalty
                self.period.abandon_cost[r.origin] += r.abandon_penalty
                self.emit("abandon", -1, r.origin, request=r.id)
            else:
                still.append(rid)
        self.pending_ids = still


# -------------------------------------------------------------- constraint op

def check_constraints(
    idle_supply: list[int],
    pending_by_origin: list[int],
    capacity: list[int],
    match_flow: list[list[int]],
    reloc_flow: list[list[int]],
    charge_flow: list[list[int]],
) -> list[tuple[int, str, str]]:
    """Verify the three period flow-limit families on integer flow matrices.

    Returns a list of (region, kind, detail) violations; empty means ok.
    """
    n = len(idle_supply)
    report = []
    for i in range(n):
        out = sum(match_flow[i]) + sum(reloc_flow[i]) + sum(charge_flow[i])
        if out > idle_supply[i]:
            report.append(
                (i, "flow", f"outflow {out} exceeds idle supply {idle_supply[i]}")
            )
    for j in range(n):
        matched = sum(match_flow[i][j] for i in range(n))
        if matched > pending_by_origin[j]:
            report.append(
                (j, "demand",
                 f"matched {matched} exceeds pending {pending_by_origin[j]}")
            )
    for j in range(n):
        inflow = sum(charge_flow[i][j] for i in range(n))
        if inflow > capacity[j]:
            report.append(
                (j, "charging",
                 f"charge inflow {inflow} exceeds capacity {capacity[j]}")
            )
    return report


def period_flow_report(world: WorldState) -> list[tuple[int, str, str]]:
    """check_constraints applied to the current period ledger.

    Supply counts every idle entry over the period, not just the opening
    snapshot: a vehicle that comes online or returns mid-period can fund one
    more dispatch, and each dispatch requires one idle entry.
    """
    per = world.period
    supply = [
        per.idle_at_start[j] + per.came_online[j] + per.returned_idle[j]
        for j in range(world.n)
    ]
    return check_constraints(
        supply,
        per.demand_seen,
        [world.station_capacity(j) for j in range(world.n)],
        per.match_flow,
        per.reloc_flow,
        per.charge_flow,
    )


# -------------------------------------------------------------------- rewards

def period_reward(
    per: PeriodLedger, j: int, p_mult: float, cfg: SimConfig
) -> float:
    """Regional period reward: boosted fares minus movement-related spend."""
    r = per.revenue_raw[j] * (1.0 + p_mult) - per.reloc_cost[j] - per.charge_cost[j]
    if cfg.book_wait_in_area_reward:
        r -= per.wait_cost[j] + per.abandon_cost[j]
    return r


@dataclass
class EpisodeMetrics:
    total_requests: int
    served: int
    abandoned: int
    stranded: int
    revenue: float
    travel_cost: float
    charge_cost: float
    wait_cost: float
    abandon_cost: float
    charge_visits: int
    charge_wait_intervals: int

    @property
    def fulfillment(self) -> float:
        return self.served / self.total_requests if self.total_requests else 1.0

    @property
    def mean_charge_wait(self) -> float:
        return (
            self.charge_wait_intervals / self.charge_visits
            if self.charge_visits else 0.0
        )

    @property
    def overhead_ratio(self) -> float:
        if self.revenue <= 0:
            return float("nan")
        return (self.travel_cost + self.charge_cost) / self.revenue

    @property
    def cumulative_reward(self) -> float:
        return (
            self.revenue - self.travel_cost - self.charge_cost
            - self.wait_cost - self.abandon_cost
        )


def episode_metrics(world: WorldState) -> EpisodeMetrics:
    led = world.ledger
    return EpisodeMetrics(
        total_requests=len(world.requests),
        served=led.served,
        abandoned=led.abandoned,
        stranded=led.stranded_events,
        revenue=led.revenue,
        travel_cost=led.travel_cost,
        charge_cost=led.charge_cost,
        wait_cost=led.wait_cost,
        abandon_cost=led.abandon_cost,
        charge_visits=led.charge_visits,
        charge_wait_intervals=led.charge_wait_intervals,
    )


def write_trace(world: WorldState, path: str) -> None:
    """Newline-delimited JSON event trace for golden-file comparison."""
    with open(path, "w") as fh:
        for interval, kind, vid, region, payload in world.events:
            rec = {"interval": interval, "kind": kind, "vehicle": vid,
                   "region": region}
            rec.update(payload)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def trace_lines(world: WorldState) -> list[str]:
    out = []
    for interval, kind, vid, region, payload in world.events:
        rec = {"interval": interval, "kind": kind, "vehicle": vid,
               "region": region}
        rec.update(payload)
        out.append(json.dumps(rec, sort_keys=True))
    return out


# ------------------------------------------------------------------- builders

def init_world(
    scenario: Scenario,
    layout: ChargingLayout,
    seed: int,
    graph: RegionGraph | None = None,
    grid: TimeGrid | None = None,
    requests: list[Request] | None = None,
) -> WorldState:
    """Construct a fresh deterministic world for one episode."""
    graph = graph or scenario.build_graph()
    grid = grid or scenario.build_grid()
    cfg = scenario.sim
    if requests is None:
        csv_rows = scenario.demand_csv_rows()
        if csv_rows is not None:
            requests = requests_from_counts(
                csv_rows, grid, graph,
                seed=child_seed(seed, "demand"),
                revenue_rate=cfg.revenue_rate,
                abandon_penalty=cfg.abandon_penalty,
                max_extra_wait_minutes=scenario.max_extra_wait_minutes,
                pickup_window=scenario.pickup_window,
                scale=scenario.demand_scale,
            )
        else:
            model = scenario.build_demand_model(graph, grid)
            requests = generate_demand(
                model, grid, graph, child_seed(seed, "demand")
            )

    rng = random.Random(child_seed(seed, "fleet"))
    if scenario.init_placement == "demand" and scenario.origin_weights:
        weights = list(scenario.origin_weights)
    else:
        weights = [1.0] * graph.n
    regions = list(range(graph.n))
    ramp = max(1, scenario.online_ramp_periods)
    vehicles = []
    for k in range(scenario.fleet_size):
        region = rng.choices(regions, weights=weights)[0]
        soc = rng.uniform(
            cfg.init_soc_low_frac * cfg.xi_max,
            cfg.init_soc_high_frac * cfg.xi_max,
        )
        vehicles.append(
            Vehicle(
                id=k,
                region=region,
                soc=soc,
                service_start=(k % ramp) * grid.intervals_per_period,
            )
        )
    world = WorldState(graph, grid, cfg, layout, vehicles, requests)
    world.start_period()
    return world
