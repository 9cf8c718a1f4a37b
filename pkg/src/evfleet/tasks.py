"""Charging-layout tasks: enumeration and train/validation/test splits.

A task is a subset of regions that host charging stations, all with the same
pile count. Layout ids index the lexicographic enumeration of region subsets,
so id 0 is the lexicographically first subset.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from itertools import combinations
from math import comb

from .hexgrid import RegionGraph


@dataclass(frozen=True)
class ChargingLayout:
    id: int
    bits: tuple[int, ...]      # availability per region, 0 or 1
    piles_per_station: int

    @property
    def stations(self) -> tuple[int, ...]:
        return tuple(j for j, b in enumerate(self.bits) if b)

    def capacity(self, j: int) -> int:
        return self.piles_per_station if self.bits[j] else 0

    @property
    def n_stations(self) -> int:
        return sum(self.bits)


@dataclass(frozen=True)
class TaskSplit:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]

    def all_ids(self) -> tuple[int, ...]:
        return self.train + self.validation + self.test


def enumerate_layouts(
    graph: RegionGraph, n_stations: int, piles: int
) -> list[ChargingLayout]:
    if not 1 <= n_stations <= graph.n:
        raise ValueError(
            f"n_stations must be in [1, {graph.n}], got {n_stations}"
        )
    if piles < 1:
        raise ValueError("piles must be >= 1")
    layouts = []
    for i, chosen in enumerate(combinations(range(graph.n), n_stations)):
        bits = tuple(1 if j in chosen else 0 for j in range(graph.n))
        layouts.append(ChargingLayout(id=i, bits=bits, piles_per_station=piles))
    assert len(layouts) == comb(graph.n, n_stations)
    return layouts


def layout_rank(bits) -> int:
    """Lexicographic index of a station subset in the enumeration."""
    n = len(bits)
    chosen = [j for j, b in enumerate(bits) if b]
    k = len(chosen)
    rank = 0
    prev = 0
    for i, c in enumerate(chosen):
        for j in range(prev, c):
            rank += comb(n - 1 - j, k - 1 - i)
        prev = c + 1
    return rank


def spread_layout(n_regions: int, n_stations: int, piles: int) -> ChargingLayout:
    """Default layout for direct runs: stations evenly spaced by index.

    The id is the lexicographic rank, so it names the same task as the
    full enumeration would.
    """
    if not 1 <= n_stations <= n_regions:
        raise ValueError(
            f"n_stations must be in [1, {n_regions}], got {n_stations}"
        )
    if piles < 1:
        raise ValueError("piles must be >= 1")
    chosen = {(i * n_regions) // n_stations for i in range(n_stations)}
    bits = tuple(1 if j in chosen else 0 for j in range(n_regions))
    return ChargingLayout(id=layout_rank(bits), bits=bits,
                          piles_per_station=piles)


def split_tasks(layouts: list[ChargingLayout], seed: int) -> TaskSplit:
    """Deterministic 8:1:1 split: train floor(8n/10), validation floor(n/10),
    test takes the remainder."""
    n = len(layouts)
    if n < 10:
        raise ValueError("need at least 10 layouts to split 8:1:1")
    ids = [lay.id for lay in layouts]
    rng = random.Random(seed)
    rng.shuffle(ids)
    n_train = (8 * n) // 10
    n_val = n // 10
    return TaskSplit(
        train=tuple(ids[:n_train]),
        validation=tuple(ids[n_train:n_train + n_val]),
        test=tuple(ids[n_train + n_val:]),
    )
