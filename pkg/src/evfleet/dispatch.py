"""Rule-based interval dispatcher driven by agent threshold vectors.

Per interval the planner runs four phases in a fixed order: mandatory safety
charging, high-SOC request matching, the low-SOC serve-or-charge decision,
and opportunistic charging. Relocation (the fifth phase) is folded into the
last interval of each period so that every dispatch flows through the
simulator's validated assignment path.

Greedy mode (no signals) disables budgets, relocation and voluntary charging:
requests are matched on pure economics and charging happens only through the
safety rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .config import SimConfig
from .world import (
    CHARGE, RELOCATE, SERVE,
    Assignment, PeriodLedger, WorldState, period_reward, recovery_rate,
)


@dataclass
class CentralSignals:
    """Decoded coordinator outputs, one entry per region."""

    f: list[float]   # net-flow preference in [-f_max, f_max], mean zero
    q: list[float]   # max fraction of charging capacity to use, [q_min, 1]
    p: list[float]   # fare multiplier in [-p_max, p_max]
    f_max: float = 0.3

    @staticmethod
    def neutral(n: int, f_max: float = 0.3) -> "CentralSignals":
        return CentralSignals([0.0] * n, [1.0] * n, [0.0] * n, f_max)


@dataclass
class AreaSignals:
    """Decoded per-region threshold vectors, each destination-indexed in [0, 1].

    u drives matching budgets, v relocation ratios, w charging incentives;
    the hi/lo pair stratifies by vehicle SOC class.
    """

    u_hi: list[float]
    u_lo: list[float]
    v_hi: list[float]
    v_lo: list[float]
    w_hi: list[float]
    w_lo: list[float]

    @staticmethod
    def neutral(n: int) -> "AreaSignals":
        return AreaSignals(*[[1.0] * n for _ in range(6)])


@dataclass
class BudgetAudit:
    """Final caps and consumption for the budget-accounting invariant."""

    match_cap: dict = field(default_factory=dict)   # (region, class, dest) -> cap
    match_used: dict = field(default_factory=dict)
    charge_cap: dict = field(default_factory=dict)
    charge_used: dict = field(default_factory=dict)


class PeriodBudgets:
    """Decoded allocation caps, decremented on consumption.

    Matching caps are dynamic: the number of requests to a destination
    observed so far this period scales the threshold. Charging caps combine a
    per-region threshold cap with the station's coordinator-quota headroom.
    Keys are (acting region, SOC class, destination).
    """

    def __init__(self, world: WorldState, areas: dict[int, AreaSignals],
                 quota: list[float]):
        self.world = world
        self.areas = areas
        self.used_match: dict[tuple[int, str, int], int] = {}
        self.used_charge: dict[tuple[int, str, int], int] = {}
        self.matched_to_dest: list[int] = [0] * world.n
        self.matched_ids: set[int] = set()
        self.voluntary_cap = []
        self.voluntary_used = [0] * world.n
        for j in range(world.n):
            cap = world.station_capacity(j)
            self.voluntary_cap.append(
                max(1, math.floor(quota[j] * cap)) if cap > 0 else 0
            )

    def _u(self, region: int, soc_class: str) -> list[float]:
        sig = self.areas[region]
        return sig.u_hi if soc_class == "hi" else sig.u_lo

    def _w(self, region: int, soc_class: str) -> list[float]:
        sig = self.areas[region]
        return sig.w_hi if soc_class == "hi" else sig.w_lo

    def observed_to_dest(self, dest: int) -> int:
        # a consumed request may still sit in pending until the assignment
        # batch lands, so exclude it from the live count
        live = sum(
            1 for r in self.world.pending_requests()
            if r.dest == dest and r.id not in self.matched_ids
        )
        return live + self.matched_to_dest[dest]

    def match_cap(self, region: int, soc_class: str, dest: int) -> int:
        thr = self._u(region, soc_class)[dest]
        return math.ceil(thr * self.observed_to_dest(dest))

    def match_remaining(self, region: int, soc_class: str, dest: int) -> int:
        used = self.used_match.get((region, soc_class, dest), 0)
        return self.match_cap(region, soc_class, dest) - used

    def consume_match(
        self, region: int, soc_class: str, dest: int,
        request_id: int | None = None,
    ) -> None:
        key = (region, soc_class, dest)
        self.used_match[key] = self.used_match.get(key, 0) + 1
        self.matched_to_dest[dest] += 1
        if request_id is not None:
            self.matched_ids.add(request_id)

    def charge_cap(self, region: int, soc_class: str, dest: int) -> int:
        thr = self._w(region, soc_class)[dest]
        return math.ceil(thr * self.voluntary_cap[dest])

    def charge_remaining(self, region: int, soc_class: str, dest: int) -> int:
        used = self.used_charge.get((region, soc_class, dest), 0)
        cap = self.charge_cap(region, soc_class, dest)
        headroom = self.voluntary_cap[dest] - self.voluntary_used[dest]
        return min(cap - used, headroom)

    def consume_charge(self, region: int, soc_class: str, dest: int) -> None:
        key = (region, soc_class, dest)
        self.used_charge[key] = self.used_charge.get(key, 0) + 1
        self.voluntary_used[dest] += 1

    def audit(self) -> BudgetAudit:
        out = BudgetAudit()
        for (region, cls, dest), used in sorted(self.used_match.items()):
            out.match_cap[(region, cls, dest)] = self.match_cap(region, cls, dest)
            out.match_used[(region, cls, dest)] = used
        for (region, cls, dest), used in sorted(self.used_charge.items()):
            out.charge_cap[(region, cls, dest)] = self.charge_cap(region, cls, dest)
            out.charge_used[(region, cls, dest)] = used
        return out


@dataclass
class PeriodResult:
    rewards: list[float]
    ledger: PeriodLedger
    audit: BudgetAudit | None
    stranded: list[int]


# --------------------------------------------------------------------- scores

def score_match(request, vehicle, omega: float, now: int, cfg: SimConfig,
                graph) -> float:
    """Composite matching utility: economics plus the agent incentive."""
    hops = graph.hop_distance(request.origin, request.dest)
    waited = request.waited_since_arrival(now)
    base = request.revenue - hops * cfg.travel_cost - cfg.wait_cost * waited ** 2
    return base + omega


def match_omega(cfg: SimConfig, threshold: float, pending_to_dest: int,
                remaining_intervals: int) -> float:
    return (
        cfg.omega_scale * threshold * pending_to_dest
        / max(1, remaining_intervals)
    )


def charge_score(
    vehicle, dest: int, threshold: float, world: WorldState
) -> float:
    """Charging utility: incentive scaled by the energy recovery ratio minus
    travel, expected session energy spend and expected queue delay."""
    cfg = world.cfg
    graph = world.graph
    hops = graph.hop_distance(vehicle.region, dest)
    arrival_soc = vehicle.soc - hops * graph.eps
    session = cfg.charge_intervals(arrival_soc, voluntary_target(cfg))
    queue_len = len(world.stations[dest].queue) if dest in world.stations else 0
    ratio = recovery_rate(vehicle.soc, cfg) / cfg.rate_fast
    omega = cfg.omega_scale_charge * threshold * ratio
    return (
        omega
        - hops * cfg.travel_cost
        - cfg.charge_cost_rate * session
        - cfg.queue_cost * queue_len * session
    )


def voluntary_target(cfg: SimConfig) -> float:
    """Dispatcher-initiated sessions stop at the fast/slow knee."""
    return cfg.xi_knee


# --------------------------------------------------------------------- phases

def nearest_station_hops(world: WorldState, region: int) -> int | None:
    best = None
    for j in world.layout.stations:
        d = world.graph.hop_distance(region, j)
        if best is None or d < best:
            best = d
    return best


def phase_safety(world: WorldState, taken: set[int]) -> list[Assignment]:
    """Route every energy-critical idle vehicle to the nearest usable station."""
    cfg = world.cfg
    graph = world.graph
    out = []
    eq4_left = {
        j: world.station_capacity(j) - world.period.charge_dispatch[j]
        for j in range(world.n)
    }
    for v in world.vehicles:
        if not v.dispatchable() or v.id in taken:
            continue
        near = nearest_station_hops(world, v.region)
        if near is None:
            world.note_stranded(v.id)
            continue
        if v.soc >= near * graph.eps + cfg.xi_safety:
            continue
        reachable = [
            j for j in world.layout.stations
            if graph.hop_distance(v.region, j) * graph.eps <= v.soc + 1e-9
        ]
        if not reachable:
            world.note_stranded(v.id)
            continue
        usable = [j for j in reachable if eq4_left[j] > 0]
        if not usable:
            # Every reachable station already hit its dispatch cap for this
            # period. Holding in place is safe: idle vehicles spend no energy
            # and the caps reset at the next period boundary.
            world.emit("safety_hold", v.id, v.region)
            taken.add(v.id)
            continue
        usable.sort(key=lambda j: (graph.hop_distance(v.region, j), j))
        dest = usable[0]
        eq4_left[dest] -= 1
        taken.add(v.id)
        out.append(
            Assignment(CHARGE, v.id, dest, charge_target=cfg.xi_max, safety=True)
        )
    return out


def _trip_feasible(world: WorldState, vehicle, dest: int) -> bool:
    need = world.graph.hop_distance(vehicle.region, dest) * world.graph.eps
    return need <= vehicle.soc - world.cfg.xi_safety + 1e-9


def _best_serve(world, vehicle, pool, budgets, soc_class, remaining):
    """Highest-scoring feasible request in the vehicle's region, or None."""
    cfg = world.cfg
    best = None
    pending_by_dest = {}
    for r in pool:
        pending_by_dest[r.dest] = pending_by_dest.get(r.dest, 0) + 1
    for r in pool:
        if r.origin != vehicle.region:
            continue
        if not _trip_feasible(world, vehicle, r.dest):
            continue
        if budgets is not None:
            if budgets.match_remaining(vehicle.region, soc_class, r.dest) <= 0:
                continue
            omega = match_omega(
                cfg,
                budgets._u(vehicle.region, soc_class)[r.dest],
                pending_by_dest.get(r.dest, 0),
                remaining,
            )
        else:
            omega = 0.0
        s = score_match(r, vehicle, omega, world.clock, cfg, world.graph)
        if best is None or s > best[0] or (s == best[0] and r.id < best[1].id):
            best = (s, r)
    return best


def _best_charge(world, vehicle, budgets, soc_class, eq4_left):
    best = None
    for dest in world.layout.stations:
        if eq4_left[dest] <= 0:
            continue
        if not _trip_feasible(world, vehicle, dest):
            continue
        if budgets is not None:
            if budgets.charge_remaining(vehicle.region, soc_class, dest) <= 0:
                continue
            thr = budgets._w(vehicle.region, soc_class)[dest]
        else:
            thr = 0.0
        s = charge_score(vehicle, dest, thr, world)
        if best is None or s > best[0] or (s == best[0] and dest < best[1]):
            best = (s, dest)
    return best


def plan_interval(
    world: WorldState,
    budgets: PeriodBudgets | None,
    relocate_now: bool = False,
    central: CentralSignals | None = None,
) -> list[Assignment]:
    """Phases I-IV for one interval, plus Phase V when relocate_now."""
    cfg = world.cfg
    world.begin_interval()
    taken: set[int] = set()
    assignments = phase_safety(world, taken)
    eq4_left = {
        j: world.station_capacity(j) - world.period.charge_dispatch[j]
        for j in range(world.n)
    }
    for a in assignments:
        eq4_left[a.dest] -= 1
    pool = list(world.pending_requests())
    remaining = world.grid.remaining_in_period(world.clock)
    threshold = cfg.high_soc_threshold
    idle = [
        v for v in world.vehicles
        if v.dispatchable() and v.id not in taken
    ]

    # Phase II: high-SOC matching.
    for v in idle:
        if v.soc < threshold:
            continue
        best = _best_serve(world, v, pool, budgets, "hi", remaining)
        if best is not None and best[0] > 0:
            _, r = best
            taken.add(v.id)
            pool.remove(r)
            if budgets is not None:
                budgets.consume_match(v.region, "hi", r.dest, r.id)
            assignments.append(Assignment(SERVE, v.id, r.dest, request_id=r.id))

    # Phase III: low-SOC serve-or-charge.
    for v in idle:
        if v.soc >= threshold or v.id in taken:
            continue
        serve = _best_serve(world, v, pool, budgets, "lo", remaining)
        charge = (
            _best_charge(world, v, budgets, "lo", eq4_left)
            if budgets is not None else None
        )
        serve_score = serve[0] if serve else None
        charge_score_v = charge[0] if charge else None
        pick = None
        if serve_score is not None and serve_score > 0:
            pick = "serve"
        if charge_score_v is not None and charge_score_v > 0:
            if pick is None or charge_score_v > serve_score:
                pick = "charge"
        if pick is None:
            continue
        if pick == "serve":
            _, r = serve
            taken.add(v.id)
            pool.remove(r)
            if budgets is not None:
                budgets.consume_match(v.region, "lo", r.dest, r.id)
            assignments.append(Assignment(SERVE, v.id, r.dest, request_id=r.id))
        else:
            _, dest = charge
            taken.add(v.id)
            eq4_left[dest] -= 1
            budgets.consume_charge(v.region, "lo", dest)
            assignments.append(
                Assignment(
                    CHARGE, v.id, dest,
                    charge_target=voluntary_target(cfg),
                )
            )

    # Phase IV: opportunistic high-SOC charging.
    if budgets is not None:
        for v in idle:
            if v.id in taken or v.soc < threshold:
                continue
            charge = _best_charge(world, v, budgets, "hi", eq4_left)
            if charge is not None and charge[0] > 0:
                _, dest = charge
                taken.add(v.id)
                eq4_left[dest] -= 1
                budgets.consume_charge(v.region, "hi", dest)
                assignments.append(
                    Assignment(
                        CHARGE, v.id, dest,
                        charge_target=voluntary_target(cfg),
                    )
                )

    if relocate_now and budgets is not None:
        assignments.extend(
            _phase_five(world, budgets, central, taken)
        )
    return assignments


# ------------------------------------------------------------------ phase V

def relocation_targets(
    free_count: int, fractions: list[float], self_region: int
) -> dict[int, int]:
    """Desired per-destination counts from decoded ratios."""
    desired = {}
    for k, frac in enumerate(fractions):
        if k == self_region or frac <= 0:
            continue
        d = int(round(frac * free_count))
        if d > 0:
            desired[k] = d
    return desired


def phase_relocation(idle_count: int, desired: dict[int, int]) -> dict[int, int]:
    """Scale desired counts to the available supply.

    Uses largest-remainder rounding after proportional scaling. Tied
    remainders are never split: if the leftover slots cannot cover a whole
    tie group, the group is skipped, which keeps the assignment monotone in
    the desired counts.
    """
    total = sum(desired.values())
    if total <= idle_count:
        return dict(desired)
    scale = idle_count / total
    base = {k: int(math.floor(d * scale)) for k, d in desired.items()}
    leftover = idle_count - sum(base.values())
    rema = sorted(
        desired,
        key=lambda k: (-(desired[k] * scale - base[k]), k),
    )
    i = 0
    while leftover > 0 and i < len(rema):
        frac_i = desired[rema[i]] * scale - base[rema[i]]
        group = [k for k in rema[i:] if abs(
            (desired[k] * scale - base[k]) - frac_i) < 1e-12]
        if len(group) > leftover:
            break
        for k in group:
            base[k] += 1
            leftover -= 1
        i += len(group)
    return base


def _phase_five(world, budgets, central, taken):
    """Relocation assignments for the final interval of the period."""
    cfg = world.cfg
    out = []
    f_max = central.f_max if central is not None else 0.3
    for j in range(world.n):
        sig = budgets.areas[j]
        pools = {
            "hi": [], "lo": [],
        }
        for v in world.vehicles:
            if v.region != j or not v.dispatchable() or v.id in taken:
                continue
            pools["hi" if v.soc >= cfg.high_soc_threshold else "lo"].append(v)
        for cls, pool in pools.items():
            if not pool:
                continue
            ratios = sig.v_hi if cls == "hi" else sig.v_lo
            fractions = list(ratios)
            if cfg.relocation_use_central_flow and central is not None:
                for k in range(world.n):
                    gate = (central.f[k] + f_max) / (2 * f_max) if f_max > 0 else 1.0
                    fractions[k] = fractions[k] * min(1.0, max(0.0, gate))
            desired = relocation_targets(len(pool), fractions, j)
            assigned = phase_relocation(len(pool), desired)
            pool_iter = sorted(pool, key=lambda v: v.id)
            for k in sorted(assigned):
                need = assigned[k]
                for v in list(pool_iter):
                    if need == 0:
                        break
                    if not _trip_feasible(world, v, k):
                        continue
                    pool_iter.remove(v)
                    taken.add(v.id)
                    out.append(Assignment(RELOCATE, v.id, k))
                    need -= 1
    return out


# ----------------------------------------------------------------- run period

def run_period(
    world: WorldState,
    central: CentralSignals | None = None,
    areas: dict[int, AreaSignals] | None = None,
) -> PeriodResult:
    """Execute one strategic period of D intervals against the world."""
    grid = world.grid
    if not grid.is_period_start(world.clock):
        raise ValueError(f"clock {world.clock} is not a period boundary")
    world.start_period()
    n = world.n
    greedy = central is None and areas is None
    if central is None:
        central = CentralSignals.neutral(n)
    if areas is None and not greedy:
        areas = {j: AreaSignals.neutral(n) for j in range(n)}
    budgets = (
        None if greedy else PeriodBudgets(world, areas, central.q)
    )
    for eta in range(grid.intervals_per_period):
        assignments = plan_interval(
            world,
            budgets,
            relocate_now=(eta == grid.intervals_per_period - 1),
            central=central,
        )
        world.step_interval(assignments)
    rewards = [
        period_reward(world.period, j, central.p[j], world.cfg)
        for j in range(n)
    ]
    return PeriodResult(
        rewards=rewards,
        ledger=world.period,
        audit=budgets.audit() if budgets is not None else None,
        stranded=sorted(v.id for v in world.vehicles if v.stranded),
    )
