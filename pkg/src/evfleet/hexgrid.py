"""Hexagonal region graph with axial coordinates.

Regions live on an axial (q, r) hex lattice. Adjacency comes from the six
axial offsets, travel time and energy cost are uniform per hop, and all
shortest-path quantities are precomputed at construction time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from collections import deque

# The six axial neighbor offsets, counterclockwise starting east.
AXIAL_OFFSETS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class RegionGraph:
    """Immutable spatial graph over hexagonal regions.

    coords[j] is the axial coordinate of region j. neighbors[j] lists
    adjacent region ids in ascending order. tau is travel time per hop in
    intervals, eps the energy cost per hop in SOC units. hop[i][j] is the
    shortest-path hop count and next_hop[i][j] the first region on a
    deterministic shortest path (lowest-id tie break).
    """

    coords: tuple[tuple[int, int], ...]
    neighbors: tuple[tuple[int, ...], ...]
    tau: int
    eps: float
    hop: tuple[tuple[int, ...], ...] = field(repr=False)
    next_hop: tuple[tuple[int, ...], ...] = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.coords)

    def degree(self, j: int) -> int:
        return len(self.neighbors[j])

    def hop_distance(self, i: int, j: int) -> int:
        return self.hop[i][j]

    def travel_intervals(self, i: int, j: int) -> int:
        return self.hop[i][j] * self.tau

    def travel_energy(self, i: int, j: int) -> float:
        return self.hop[i][j] * self.eps

    def path(self, i: int, j: int) -> list[int]:
        """Region sequence from i to j inclusive along the canonical path."""
        seq = [i]
        cur = i
        while cur != j:
            cur = self.next_hop[cur][j]
            seq.append(cur)
        return seq

    @property
    def diameter(self) -> int:
        return max(max(row) for row in self.hop)


def spiral_coords(n: int) -> list[tuple[int, int]]:
    """First n axial coordinates of the standard hex spiral around (0, 0)."""
    out = [(0, 0)]
    radius = 1
    while len(out) < n:
        q = AXIAL_OFFSETS[4][0] * radius
        r = AXIAL_OFFSETS[4][1] * radius
        for side in range(6):
            dq, dr = AXIAL_OFFSETS[side]
            for _ in range(radius):
                if len(out) >= n:
                    return out
                out.append((q, r))
                q += dq
                r += dr
        radius += 1
    return out


def _preset_coords(name: str, n: int) -> list[tuple[int, int]]:
    if name == "line":
        return [(i, 0) for i in range(n)]
    if name in ("compact", "flower", "ring"):
        return spiral_coords(n)
    raise GraphError(f"unknown layout preset {name!r}")


def parse_layout_descriptor(descriptor: str, n: int) -> list[tuple[int, int]]:
    """Descriptor is either 'preset:<name>' or 'coords:q,r;q,r;...'."""
    kind, _, rest = descriptor.partition(":")
    if kind == "preset":
        return _preset_coords(rest.strip(), n)
    if kind == "coords":
        coords = []
        for chunk in rest.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            q_s, r_s = chunk.split(",")
            coords.append((int(q_s), int(r_s)))
        if len(coords) != n:
            raise GraphError(
                f"descriptor lists {len(coords)} coordinates for {n} regions"
            )
        if len(set(coords)) != len(coords):
            raise GraphError("duplicate axial coordinates in descriptor")
        return coords
    raise GraphError(f"unparseable layout descriptor {descriptor!r}")


def build_hex_graph(
    region_count: int,
    layout_descriptor: str = "preset:compact",
    tau: int = 1,
    eps: float = 1.0,
) -> RegionGraph:
    if region_count < 2:
        raise GraphError("need at least 2 regions")
    if tau < 1 or int(tau) != tau:
        raise GraphError("tau must be a positive integer interval count")
    if eps <= 0:
        raise GraphError("eps must be positive")
    coords = parse_layout_descriptor(layout_descriptor, region_count)
    index = {c: i for i, c in enumerate(coords)}
    neighbors = []
    for q, r in coords:
        adj = sorted(
            index[(q + dq, r + dr)]
            for dq, dr in AXIAL_OFFSETS
            if (q + dq, r + dr) in index
        )
        neighbors.append(tuple(adj))

    hop, next_hop = _all_pairs_bfs(neighbors)
    for j in range(region_count):
        if hop[0][j] < 0:
            raise GraphError(f"region {j} at {coords[j]} is unreachable from region 0")

    return RegionGraph(
        coords=tuple(coords),
        neighbors=tuple(neighbors),
        tau=int(tau),
        eps=float(eps),
        hop=tuple(tuple(row) for row in hop),
        next_hop=tuple(tuple(row) for row in next_hop),
    )


def _all_pairs_bfs(neighbors):
    n = len(neighbors)
    hop = [[-1] * n for _ in range(n)]
    for src in range(n):
        dist = hop[src]
        dist[src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in neighbors[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
    # Canonical first hop: the lowest-id neighbor that strictly decreases the
    # remaining distance. Makes multi-hop movement reproducible.
    nxt = [[-1] * n for _ in range(n)]
    for src in range(n):
        nxt[src][src] = src
        for dst in range(n):
            if dst == src or hop[src][dst] < 0:
                continue
            for v in neighbors[src]:
                if hop[v][dst] == hop[src][dst] - 1:
                    nxt[src][dst] = v
                    break
    return hop, nxt
