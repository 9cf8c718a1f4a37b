"""Result rows: the stable CSV schema and cross-policy comparison.

Every evaluation writes the same ten columns in the same order, one row
per (run, task, seed, episode). Floats are serialized with repr so
files round-trip exactly; the overhead ratio of a zero-revenue episode
is the nan sentinel. Comparison insists on identical (task, seed,
episode) grids across policies and reports mean, spread, a trailing
moving average of reward, and paired per-cell deltas.
"""
from __future__ import annotations

import copy
import csv
import io
import math
import time
from dataclasses import dataclass

import numpy as np
from numpy.random import default_rng

from .meta import FixedZPolicy, posterior_mean, state_hash
from .rollout import GreedyPolicy, episode_from_scenario
from .seeding import child_seed
from .tasks import spread_layout

RESULT_COLUMNS = ("run", "policy", "task", "seed", "episode", "reward",
                  "fulfillment", "charge_wait", "overhead", "wall_s")
SCHEMA_VERSION = 1

SWEEP_AXES = {
    "piles": (30, 40, 50, 60, 70),
    "stations": (3, 4, 5, 6, 7),
    "demand_scale": (0.8, 1.0, 1.2),
}


class ResultError(ValueError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class ResultRow:
    run: str
    policy: str
    task: int
    seed: int
    episode: int
    reward: float
    fulfillment: float
    charge_wait: float
    overhead: float
    wall_s: float

    @classmethod
    def from_metrics(cls, run, policy, task, seed, episode, metrics,
                     wall_s):
        return cls(run=run, policy=policy, task=task, seed=seed,
                   episode=episode, reward=metrics.cumulative_reward,
                   fulfillment=metrics.fulfillment,
                   charge_wait=metrics.mean_charge_wait,
                   overhead=metrics.overhead_ratio, wall_s=wall_s)

    def values(self):
        return [self.run, self.policy, str(self.task), str(self.seed),
                str(self.episode), _fmt(self.reward),
                _fmt(self.fulfillment), _fmt(self.charge_wait),
                _fmt(self.overhead), _fmt(self.wall_s)]


def result_csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for row in rows:
        writer.writerow(row.values())
    return buf.getvalue()


def write_result_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(result_csv_text(rows))


def read_result_rows(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ResultError(f"{path}: empty result file") from None
        if tuple(header) != RESULT_COLUMNS:
            raise ResultError(
                f"{path}: unexpected header {header!r}, expected "
                f"{list(RESULT_COLUMNS)}")
        rows = []
        for lineno, vals in enumerate(reader, start=2):
            if not vals:
                continue
            if len(vals) != len(RESULT_COLUMNS):
                raise ResultError(
                    f"{path}:{lineno}: expected "
                    f"{len(RESULT_COLUMNS)} fields, got {len(vals)}")
            try:
                rows.append(ResultRow(
                    run=vals[0], policy=vals[1], task=int(vals[2]),
                    seed=int(vals[3]), episode=int(vals[4]),
                    reward=float(vals[5]), fulfillment=float(vals[6]),
                    charge_wait=float(vals[7]), overhead=float(vals[8]),
                    wall_s=float(vals[9])))
            except ValueError as exc:
                raise ResultError(f"{path}:{lineno}: {exc}") from exc
    return rows


def check_result_file(path) -> int:
    """Schema check; returns the row count of a valid file."""
    return len(read_result_rows(path))


# ------------------------------------------------------------ execution


def scenario_layout(scenario, graph):
    """Evenly spread stations, the documented default task for direct
    simulation runs."""
    return spread_layout(graph.n, scenario.n_stations, scenario.piles)


def run_greedy(scenario, seed, *, layout=None, run_id="greedy",
               graph=None, grid=None, timer=time.perf_counter):
    """One heuristic-only episode as result rows.

    The policy consults no learned parameters; ``timer`` is injectable
    so golden tests can pin the wall-clock column.
    """
    graph = graph or scenario.build_graph()
    grid = grid or scenario.build_grid()
    if layout is None:
        layout = scenario_layout(scenario, graph)
    t0 = timer()
    _, rec = episode_from_scenario(
        scenario, layout, seed, GreedyPolicy(),
        default_rng(child_seed(seed, "policy")), mean=True,
        collect=False, graph=graph, grid=grid)
    wall = timer() - t0
    return [ResultRow.from_metrics(run_id, "greedy", layout.id, seed, 0,
                                   rec.metrics, wall)]


def evaluate_policy(policy, scenario, layout, seed, episodes, *,
                    run_id="eval", name=None, graph=None, grid=None,
                    timer=time.perf_counter):
    """Frozen mean-mode evaluation: one row per episode.

    Hierarchical policies first run one probe episode under the prior
    latent, then evaluate with the posterior-mean latent, so context
    inference happens without touching any buffer. Each episode draws
    its own demand realization from the seed stream. Evaluation must
    not train; a state-hash check enforces that.
    """
    graph = graph or scenario.build_graph()
    grid = grid or scenario.build_grid()
    name = name or policy.name
    before = state_hash(policy)
    if hasattr(policy, "areas"):
        probe = FixedZPolicy(policy, {
            j: np.zeros(ag.latent) for j, ag in enumerate(policy.areas)
        })
        rng0 = default_rng(child_seed(seed, "probe:policy"))
        _, rec = episode_from_scenario(
            scenario, layout, child_seed(seed, "probe"), probe, rng0,
            mean=True, collect=True, graph=graph, grid=grid)
        z = {}
        for j, ag in enumerate(policy.areas):
            ctx = [ag.context_row(st, t, a, r)
                   for st, t, a, r, *_ in rec.areas[j]]
            z[j] = posterior_mean(ag, ctx, scenario.nets)
        runner = FixedZPolicy(policy, z)
    else:
        runner = policy
    rows = []
    for ep in range(episodes):
        t0 = timer()
        rng = default_rng(child_seed(seed, f"eval:{ep}:policy"))
        _, rec = episode_from_scenario(
            scenario, layout, child_seed(seed, f"eval:{ep}"), runner, rng,
            mean=True, collect=False, graph=graph, grid=grid)
        rows.append(ResultRow.from_metrics(run_id, name, layout.id, seed,
                                           ep, rec.metrics, timer() - t0))
    if state_hash(policy) != before:
        raise ResultError("evaluation mutated policy state")
    return rows


def apply_axis(scenario, axis, value):
    """Copy of the scenario with one sweep knob turned.

    Both the axis name and the value are validated against the
    documented grids.
    """
    if axis not in SWEEP_AXES:
        raise ResultError(
            f"unknown sweep axis {axis!r}, expected one of "
            f"{sorted(SWEEP_AXES)}")
    allowed = SWEEP_AXES[axis]
    if not any(math.isclose(value, v) for v in allowed):
        raise ResultError(
            f"axis {axis}: value {value!r} not in {list(allowed)}")
    out = copy.deepcopy(scenario)
    if axis == "piles":
        out.piles = int(value)
    elif axis == "stations":
        out.n_stations = int(value)
    else:
        out.demand_scale = float(value)
    return out


# ------------------------------------------------------------ comparison

_METRICS = ("reward", "fulfillment", "charge_wait", "overhead")


def moving_average(series, window):
    """Trailing mean over the last ``window`` points, shorter at the
    start."""
    if window < 1:
        raise ResultError("window must be positive")
    out = []
    for i in range(len(series)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(series[lo:i + 1])))
    return out


def compare_policies(rows, window=10):
    """Cross-policy summary over an identical evaluation grid.

    Returns per-policy mean and standard deviation of each metric, a
    moving-average reward series per policy, and paired per-cell deltas
    for every policy pair. Rows must cover the same (task, seed,
    episode) cells for every policy; anything missing is an error that
    lists the holes. The nan overhead sentinel is excluded from means.
    """
    by_pol = {}
    for r in rows:
        by_pol.setdefault(r.policy, []).append(r)
    if len(by_pol) < 2:
        raise ResultError("need rows from at least two policies")

    cell_maps = {}
    for pol, rs in by_pol.items():
        cells = {(r.task, r.seed, r.episode): r for r in rs}
        if len(cells) != len(rs):
            raise ResultError(f"duplicate result cells for policy {pol}")
        cell_maps[pol] = cells
    union = set()
    for cells in cell_maps.values():
        union |= set(cells)
    problems = []
    for pol in sorted(cell_maps):
        missing = sorted(union - set(cell_maps[pol]))
        if missing:
            problems.append(f"{pol} missing {missing}")
    if problems:
        raise ResultError("misaligned result grids: "
                          + "; ".join(problems))

    summary = {}
    for pol in sorted(by_pol):
        vals = {m: np.array([getattr(r, m) for r in by_pol[pol]])
                for m in _METRICS}
        summary[pol] = {m: (float(np.nanmean(v)), float(np.nanstd(v)))
                        for m, v in vals.items()}

    episodes = sorted({c[2] for c in union})
    series = {}
    for pol in sorted(by_pol):
        per_ep = []
        for e in episodes:
            rewards = [r.reward for r in by_pol[pol] if r.episode == e]
            per_ep.append(float(np.mean(rewards)))
        series[pol] = moving_average(per_ep, window)

    cells_sorted = sorted(union)
    deltas = {}
    pols = sorted(by_pol)
    for i, a in enumerate(pols):
        for b in pols[i + 1:]:
            deltas[(a, b)] = {}
            for m in _METRICS:
                d = np.array([getattr(cell_maps[b][c], m)
                              - getattr(cell_maps[a][c], m)
                              for c in cells_sorted])
                deltas[(a, b)][m] = (float(np.nanmean(d)),
                                     float(np.nanstd(d)))

    return {"policies": summary, "episodes": episodes,
            "moving_average": series, "deltas": deltas,
            "cells": cells_sorted}


def format_comparison(cmp) -> str:
    """Plain-text table of a compare_policies result."""
    lines = []
    head = f"{'policy':<16}" + "".join(f"{m:>22}" for m in _METRICS)
    lines.append(head)
    for pol, stats in cmp["policies"].items():
        cells = []
        for m in _METRICS:
            mean, std = stats[m]
            cells.append(f"{mean:.4g} +/- {std:.4g}")
        lines.append(f"{pol:<16}" + "".join(f"{c:>22}" for c in cells))
    for (a, b), stats in cmp["deltas"].items():
        lines.append("")
        lines.append(f"delta {b} - {a} (paired per cell)")
        for m in _METRICS:
            mean, std = stats[m]
            lines.append(f"  {m:<14}{mean:+.4g} +/- {std:.4g}")
    return "\n".join(lines)
