"""Translation between normalized policy actions and operating signals.

Policy heads emit tanh-squashed vectors in (-1, 1). This module maps the
coordinator's 3n-vector onto per-region (f, q, p) ranges, the 6n area
vector onto [0, 1] threshold blocks, and a finished period ledger back
into the same normalized coordinates so the coordinator's tracking
penalty compares commanded and realized behaviour like with like.
"""
from __future__ import annotations

import numpy as np

from .dispatch import AreaSignals, CentralSignals

AREA_BLOCKS = ("u_hi", "u_lo", "v_hi", "v_lo", "w_hi", "w_lo")


class CodecError(ValueError):
    pass


def central_dim(n: int) -> int:
    return 3 * n


def area_dim(n: int) -> int:
    return 6 * n


def _affine(a, lo, hi):
    return lo + (np.asarray(a, dtype=float) + 1.0) * 0.5 * (hi - lo)


def _inverse(x, lo, hi):
    a = (np.asarray(x, dtype=float) - lo) * 2.0 / (hi - lo) - 1.0
    return np.clip(a, -1.0, 1.0)


def decode_central(action, n, net) -> CentralSignals:
    a = np.asarray(action, dtype=float).reshape(-1)
    if a.shape[0] != 3 * n:
        raise CodecError(f"central action needs {3 * n} entries, "
                         f"got {a.shape[0]}")
    f = _affine(a[:n], -net.f_max, net.f_max)
    # re-center so commanded inflows and outflows cancel fleet-wide;
    # entries may land outside +-f_max after the shift, the dispatcher
    # treats the magnitude as a preference rather than a hard bound
    f = f - f.mean()
    q = _affine(a[n:2 * n], net.q_min, 1.0)
    p = _affine(a[2 * n:], -net.p_max, net.p_max)
    return CentralSignals(f.tolist(), q.tolist(), p.tolist(), net.f_max)


def encode_central(sig: CentralSignals, net) -> np.ndarray:
    return np.concatenate([
        _inverse(sig.f, -net.f_max, net.f_max),
        _inverse(sig.q, net.q_min, 1.0),
        _inverse(sig.p, -net.p_max, net.p_max),
    ])


def decode_area(action, n: int) -> AreaSignals:
    a = np.asarray(action, dtype=float).reshape(-1)
    if a.shape[0] != 6 * n:
        raise CodecError(f"area action needs {6 * n} entries, "
                         f"got {a.shape[0]}")
    blocks = [((a[k * n:(k + 1) * n] + 1.0) * 0.5).tolist() for k in range(6)]
    return AreaSignals(*blocks)


def encode_area(sig: AreaSignals) -> np.ndarray:
    blocks = [getattr(sig, name) for name in AREA_BLOCKS]
    return np.concatenate([
        np.clip(np.asarray(b, dtype=float) * 2.0 - 1.0, -1.0, 1.0)
        for b in blocks
    ])


def realized_central(period, capacities, net) -> CentralSignals:
    """Read (f, q, p) the fleet actually delivered off a period ledger.

    Net relocation flow is measured against the idle pool at the period
    start, charging uptake against station capacity, and the price term
    against each region's revenue share. All three are clamped to the
    commanded ranges so the tracking penalty stays bounded.
    """
    n = period.n
    rev = np.asarray(period.revenue_raw, dtype=float)
    mean_rev = rev.mean() if n else 0.0
    f = np.zeros(n)
    q = np.full(n, net.q_min)
    p = np.zeros(n)
    for j in range(n):
        flow = ((period.reloc_arr[j] - period.reloc_dep[j])
                / max(1, period.idle_at_start[j]))
        f[j] = min(net.f_max, max(-net.f_max, flow))
        cap = capacities[j]
        if cap > 0:
            used = min(1.0, period.charge_dispatch[j] / cap)
            q[j] = net.q_min + (1.0 - net.q_min) * used
        if mean_rev > 0:
            lift = net.p_max * (rev[j] / mean_rev - 1.0)
            p[j] = min(net.p_max, max(-net.p_max, lift))
    return CentralSignals(f.tolist(), q.tolist(), p.tolist(), net.f_max)


def tracking_penalty(action, realized: CentralSignals, net, lam: float) -> float:
    a = np.asarray(action, dtype=float).reshape(-1)
    abar = encode_central(realized, net)
    if a.shape != abar.shape:
        raise CodecError(f"action shape {a.shape} vs realized {abar.shape}")
    return float(lam * ((a - abar) ** 2).sum())
