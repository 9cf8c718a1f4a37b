"""Passenger demand: request lifecycle, synthetic arrival process, CSV ingestion.

The arrival process is an inhomogeneous Poisson stream at the interval level.
An origin weight vector and a row-stochastic destination matrix factor the
spatial pattern; everything is a pure function of an explicit seed.
"""
from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field

from .hexgrid import RegionGraph
from .timegrid import TimeGrid

PENDING = "pending"
MATCHED = "matched"
SERVED = "served"
ABANDONED = "abandoned"


class DemandError(ValueError):
    pass


@dataclass
class Request:
    id: int
    origin: int
    dest: int
    arrival: int          # b_r, absolute interval
    latest_pickup: int    # a_r, absolute interval
    max_extra_wait: int   # intervals of slack beyond latest_pickup
    revenue: float
    abandon_penalty: float
    status: str = PENDING
    wait_accrued: int = 0  # intervals waited beyond latest_pickup

    @property
    def abandon_deadline(self) -> int:
        return self.latest_pickup + self.max_extra_wait

    def waited_since_arrival(self, now: int) -> int:
        return max(0, now - self.arrival)


@dataclass(frozen=True)
class DemandModel:
    """Arrival intensities plus spatial OD factorization.

    intensity[i] is the expected total arrival count in absolute interval i
    (before the scale multiplier). origin_probs sums to 1. od[o] is the
    destination distribution conditioned on origin o and sums to 1 wherever
    origin_probs[o] > 0.
    """

    intensity: tuple[float, ...]
    origin_probs: tuple[float, ...]
    od: tuple[tuple[float, ...], ...]
    revenue_rate: float = 4.0
    abandon_penalty: float = 10.0
    max_extra_wait_minutes: int = 15
    pickup_window: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.scale < 0:
            raise DemandError("scale must be >= 0")
        if any(x < 0 for x in self.intensity):
            raise DemandError("negative intensity")
        if abs(sum(self.origin_probs) - 1.0) > 1e-9:
            raise DemandError("origin probabilities must sum to 1")

    def validate_rows(self) -> None:
        for o, p in enumerate(self.origin_probs):
            if p > 0:
                row = self.od[o]
                if any(x < 0 for x in row):
                    raise DemandError(f"negative OD entry in row {o}")
                if abs(sum(row) - 1.0) > 1e-9:
                    raise DemandError(
                        f"origin {o} has positive weight but OD row sums to "
                        f"{sum(row):.6f}"
                    )

    def expected_od(self, grid: TimeGrid, period: int, n_regions: int):
        """Expected request counts per (origin, dest) over one period.

        This is the oracle forecast source: the exact mean of the sampling
        process, no estimation involved.
        """
        d = grid.intervals_per_period
        lo = period * d
        lam = sum(self.intensity[i] for i in range(lo, lo + d)) * self.scale
        out = [[0.0] * n_regions for _ in range(n_regions)]
        for o in range(n_regions):
            if self.origin_probs[o] <= 0:
                continue
            for j in range(n_regions):
                out[o][j] = lam * self.origin_probs[o] * self.od[o][j]
        return out


def double_peak_intensity(grid: TimeGrid, base: float, peak: float) -> tuple[float, ...]:
    """Flat base with an elevated plateau over the final third of the horizon."""
    horizon = grid.horizon
    peak_start = horizon - max(1, horizon // 3)
    return tuple(
        base + (peak if i >= peak_start else 0.0) for i in range(horizon)
    )


def synthetic_model(
    graph: RegionGraph,
    grid: TimeGrid,
    base_rate: float = 1.0,
    peak_rate: float = 1.0,
    origin_weights: tuple[float, ...] | None = None,
    dest_weights: tuple[float, ...] | None = None,
    scale: float = 1.0,
    revenue_rate: float = 4.0,
    abandon_penalty: float = 10.0,
    max_extra_wait_minutes: int = 15,
    pickup_window: int = 0,
) -> DemandModel:
    """Synthetic demand with a double-peak temporal profile.

    Destination rows renormalize dest_weights with the origin excluded, so
    trips always leave their origin region.
    """
    n = graph.n
    ow = list(origin_weights) if origin_weights is not None else [1.0] * n
    if len(ow) != n:
        raise DemandError("origin_weights length mismatch")
    total = sum(ow)
    if total <= 0:
        raise DemandError("origin_weights must have positive mass")
    ow = [w / total for w in ow]
    dw = list(dest_weights) if dest_weights is not None else [1.0] * n
    if len(dw) != n:
        raise DemandError("dest_weights length mismatch")
    od = []
    for o in range(n):
        row = [dw[j] if j != o else 0.0 for j in range(n)]
        mass = sum(row)
        if mass <= 0:
            # lone positive-weight destination is the origin itself; spread
            # uniformly over the other regions instead.
            row = [1.0 if j != o else 0.0 for j in range(n)]
            mass = float(n - 1)
        od.append(tuple(x / mass for x in row))
    return DemandModel(
        intensity=double_peak_intensity(grid, base_rate, peak_rate),
        origin_probs=tuple(ow),
        od=tuple(od),
        revenue_rate=revenue_rate,
        abandon_penalty=abandon_penalty,
        max_extra_wait_minutes=max_extra_wait_minutes,
        pickup_window=pickup_window,
        scale=scale,
    )


def _poisson(rng: random.Random, lam: float) -> int:
    """Knuth's method; lam stays small (per-interval counts) in this artifact."""
    if lam <= 0:
        return 0
    limit = 2.718281828459045 ** (-lam)
    k = 0
    p = 1.0
    while True:
        p *= rng.random()
        if p <= limit:
            return k
        k += 1


def generate_demand(
    model: DemandModel, grid: TimeGrid, graph: RegionGraph, seed: int
) -> list[Request]:
    model.validate_rows()
    rng = random.Random(seed)
    n = graph.n
    origins = list(range(n))
    requests: list[Request] = []
    max_wait_iv = grid.minute_to_interval(model.max_extra_wait_minutes)
    for i in range(grid.horizon):
        count = _poisson(rng, model.intensity[i] * model.scale)
        for _ in range(count):
            o = rng.choices(origins, weights=model.origin_probs)[0]
            d = rng.choices(origins, weights=model.od[o])[0]
            t_max = rng.randint(0, max_wait_iv)
            requests.append(
                Request(
                    id=len(requests),
                    origin=o,
                    dest=d,
                    arrival=i,
                    latest_pickup=i + model.pickup_window,
                    max_extra_wait=t_max,
                    revenue=model.revenue_rate * graph.hop_distance(o, d),
                    abandon_penalty=model.abandon_penalty,
                )
            )
    return requests


def load_demand_csv(path) -> list[tuple[int, int, int, int]]:
    """Read (minute, origin_region, dest_region, count) rows."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"minute", "origin_region", "dest_region", "count"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DemandError(
                f"demand CSV must have columns {sorted(required)}, "
                f"got {reader.fieldnames}"
            )
        for rec in reader:
            rows.append(
                (
                    int(rec["minute"]),
                    int(rec["origin_region"]),
                    int(rec["dest_region"]),
                    int(rec["count"]),
                )
            )
    return rows


def requests_from_counts(
    rows: list[tuple[int, int, int, int]],
    grid: TimeGrid,
    graph: RegionGraph,
    seed: int,
    revenue_rate: float = 4.0,
    abandon_penalty: float = 10.0,
    max_extra_wait_minutes: int = 15,
    pickup_window: int = 0,
    scale: float = 1.0,
) -> list[Request]:
    """Deterministic ingestion of recorded OD counts.

    Counts are scaled then rounded half-up; only the wait tolerance draw is
    random. Rows outside the horizon or region range are rejected.
    """
    rng = random.Random(seed)
    n = graph.n
    max_wait_iv = grid.minute_to_interval(max_extra_wait_minutes)
    requests: list[Request] = []
    for minute, o, d, count in sorted(rows):
        if not (0 <= o < n and 0 <= d < n):
            raise DemandError(f"region out of range in row {(minute, o, d, count)}")
        interval = grid.minute_to_interval(minute)
        if interval >= grid.horizon:
            raise DemandError(f"minute {minute} beyond horizon")
        eff = int(count * scale + 0.5)
        for _ in range(eff):
            requests.append(
                Request(
                    id=len(requests),
                    origin=o,
                    dest=d,
                    arrival=interval,
                    latest_pickup=interval + pickup_window,
                    max_extra_wait=rng.randint(0, max_wait_iv),
                    revenue=revenue_rate * graph.hop_distance(o, d),
                    abandon_penalty=abandon_penalty,
                )
            )
    return requests


def od_matrix(pending: list[Request], n_regions: int) -> list[list[int]]:
    """Count matrix of unserved requests: entry (i, j) counts origin i, dest j."""
    q = [[0] * n_regions for _ in range(n_regions)]
    for r in pending:
        if r.status == PENDING:
            q[r.origin][r.dest] += 1
    return q


def pending_by_origin(pending: list[Request], n_regions: int) -> list[int]:
    counts = [0] * n_regions
    for r in pending:
        if r.status == PENDING:
            counts[r.origin] += 1
    return counts
