"""Independent recomputation of simulator reference values.

Each section derives an expected value by a route that does not share code
with the package (fine-step integration instead of closed forms, coordinate
arithmetic instead of BFS, explicit arithmetic instead of ledger plumbing).
Run it once, copy the printed numbers into the test files, leave them frozen.

    python3 tests/oracles/sim_oracle.py
"""

import math
from fractions import Fraction as F


# ---- charging curve, exact rational arithmetic -----------------------------
# Continuous two-rate model: 3/5 per interval below the knee at 24,
# 1/5 per interval above it, hard stop at 30. Advancing one interval at a
# time with Fractions keeps every boundary case exact; the fine-step float
# integration earlier drifted on them.

FAST, SLOW, KNEE, FULL = F(3, 5), F(1, 5), F(24), F(30)


def advance_one(soc):
    if soc >= FULL:
        return FULL
    if soc < KNEE:
        to_knee = (KNEE - soc) / FAST
        if to_knee >= 1:
            return soc + FAST
        soc = KNEE + (1 - to_knee) * SLOW
    else:
        soc = soc + SLOW
    return min(soc, FULL)


def exact(soc, intervals):
    s = F(soc).limit_denominator(10 ** 6)
    for _ in range(intervals):
        s = advance_one(s)
    return s


def charging_refs():
    print("# charge_soc references (soc, intervals) -> value")
    cases = [
        (3.0, 1), (3.0, 10), (20.0, 10), (23.9, 1), (24.0, 5),
        (29.9, 3), (0.0, 40), (3.0, 65), (12.5, 7),
    ]
    for soc, k in cases:
        print(f"    ({soc}, {k}): {float(exact(soc, k)):.9f},")


# ---- session length: intervals to finish charging --------------------------

def session_refs():
    print("# charge_intervals references (soc, target) -> intervals")
    for soc, target in [(3.0, 30.0), (3.0, 24.0), (20.0, 24.0),
                        (24.0, 30.0), (26.0, 30.0), (29.99, 30.0)]:
        k = 0
        s = F(soc).limit_denominator(10 ** 6)
        goal = F(target).limit_denominator(10 ** 6)
        while s < goal:
            s = advance_one(s)
            k += 1
        print(f"    ({soc}, {target}): {k},")


# ---- hex distances via cube-coordinate arithmetic --------------------------
# Flower preset: center plus one full ring. Axial distance formula
# (|dq| + |dr| + |dq + dr|) / 2 is an independent route to hop counts on a
# convex patch; the package uses BFS on the adjacency lists.

FLOWER = [(0, 0), (1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)]


def hexdist(a, b):
    dq = a[0] - b[0]
    dr = a[1] - b[1]
    return (abs(dq) + abs(dr) + abs(dq + dr)) // 2


def hex_refs():
    print("# flower hop-distance matrix rows")
    for i, a in enumerate(FLOWER):
        row = [hexdist(a, b) for b in FLOWER]
        print(f"    {i}: {row},")
    print("# flower degrees")
    degs = []
    for i, a in enumerate(FLOWER):
        degs.append(sum(1 for b in FLOWER if hexdist(a, b) == 1))
    print(f"    {degs}")


# ---- layout family and split sizes -----------------------------------------

def split_refs():
    n = math.comb(11, 5)
    train = (8 * n) // 10
    val = n // 10
    print(f"# C(11,5) = {n}, split = ({train}, {val}, {n - train - val})")


# ---- per-region reward arithmetic ------------------------------------------

def reward_refs():
    # revenue 12 at surge 0.2, relocation spend 2, charging spend 8
    print("# reward example A:", 12 * (1 + 0.2) - 2 - 8)
    # no revenue, surge irrelevant, relocation 2
    print("# reward example B:", 0 * (1 + 0.5) - 2 - 0)


# ---- waiting cost growth ---------------------------------------------------

def wait_refs():
    # one request waiting 3 intervals past its pickup time at 0.05/interval
    print("# wait cost 3 intervals:", 0.05 * 3)
    # quadratic lateness penalty inside the matching score at wait=3
    print("# score lateness term w=3:", 0.05 * 3 ** 2)


if __name__ == "__main__":
    charging_refs()
    session_refs()
    hex_refs()
    split_refs()
    reward_refs()
    wait_refs()
