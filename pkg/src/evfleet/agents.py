"""State builders, actor-critic losses, and the agent containers.

The coordinator works from a flat global snapshot; regional agents work
from per-region feature rows passed through graph attention, with a
learned per-period embedding appended at forward time. All networks are
explicit parameter dictionaries so training code can substitute fast
weights without touching module state.
"""
from __future__ import annotations

from collections import deque

import numpy as np
import torch

from .context import encoder_params
from .demand import od_matrix
from .nets import (
    dense_forward,
    dense_params,
    gat_forward,
    gat_params,
    policy_forward,
    policy_params,
    subset,
    tanh_gaussian_sample,
    temporal_params,
    temporal_row,
    tensor,
)
from .world import CHARGING, IDLE, OFFLINE, RELOCATING, SERVING, TO_CHARGE

NODE_FEATURES = 14
_STATUS_GROUP = {IDLE: 0, SERVING: 1, RELOCATING: 2, TO_CHARGE: 3, CHARGING: 3}


def central_state_dim(n: int) -> int:
    # pending OD + forecast OD + hop matrix, then ten per-region columns
    return 3 * n * n + 10 * n


def build_central_state(world, model, net) -> np.ndarray:
    """Global snapshot in a documented block order.

    Blocks: pending OD matrix, expected OD over the next
    ``net.forecast_periods`` periods, four status columns, mean SOC,
    inbound vehicles, pile occupancy, free piles, station bits, pile
    counts, hop distances. Counts are scaled by fleet size, SOC by pack
    capacity, distances by graph diameter.
    """
    n = world.n
    fleet = max(1, len(world.vehicles))
    grid = world.grid

    pend = np.asarray(od_matrix(world.pending_requests(), n), dtype=float)

    fcast = np.zeros((n, n))
    if world.clock < grid.horizon:
        per = grid.period_of(world.clock)
        for k in range(net.forecast_periods):
            if per + k < grid.periods:
                fcast += np.asarray(model.expected_od(grid, per + k, n))

    status = np.zeros((n, 4))
    soc_sum = np.zeros(n)
    soc_cnt = np.zeros(n)
    inflow = np.zeros(n)
    for v in world.vehicles:
        if v.status == OFFLINE:
            continue
        status[v.region, _STATUS_GROUP[v.status]] += 1
        soc_sum[v.region] += v.soc
        soc_cnt[v.region] += 1
        if v.status in (SERVING, RELOCATING, TO_CHARGE) and v.dest is not None:
            inflow[v.dest] += 1
    soc_mean = np.divide(soc_sum, soc_cnt, out=np.zeros(n),
                         where=soc_cnt > 0) / world.cfg.xi_max

    occupancy = np.zeros(n)
    free = np.zeros(n)
    for j, st in world.stations.items():
        occupancy[j] = st.occupied / max(1, st.capacity)
        free[j] = st.free / fleet

    bits = np.asarray(world.layout.bits, dtype=float)
    piles = np.array([world.layout.capacity(j) for j in range(n)]) / fleet
    hops = np.asarray(world.graph.hop, dtype=float) / max(1, world.graph.diameter)

    return np.concatenate([
        pend.reshape(-1) / fleet,
        fcast.reshape(-1) / fleet,
        status.reshape(-1) / fleet,
        soc_mean,
        inflow / fleet,
        occupancy,
        free,
        bits,
        piles,
        hops.reshape(-1),
    ])


def build_node_features(world, central, net) -> np.ndarray:
    """Per-region rows: status mix, SOC, demand pressure, commands, layout.

    ``central`` carries the decoded coordinator signals for the current
    period; its columns are mapped back to [0, 1]-ish scales so they sit
    beside the count features.
    """
    n = world.n
    fleet = max(1, len(world.vehicles))
    rows = np.zeros((n, NODE_FEATURES))

    soc_sum = np.zeros(n)
    soc_cnt = np.zeros(n)
    for v in world.vehicles:
        if v.status == OFFLINE:
            continue
        rows[v.region, _STATUS_GROUP[v.status]] += 1.0 / fleet
        soc_sum[v.region] += v.soc
        soc_cnt[v.region] += 1
        if v.status in (SERVING, RELOCATING, TO_CHARGE) and v.dest is not None:
            rows[v.dest, 7] += 1.0 / fleet
    rows[:, 4] = np.divide(soc_sum, soc_cnt, out=np.zeros(n),
                           where=soc_cnt > 0) / world.cfg.xi_max

    pend = np.asarray(od_matrix(world.pending_requests(), n), dtype=float)
    rows[:, 5] = pend.sum(axis=1) / fleet   # requests waiting here
    rows[:, 6] = pend.sum(axis=0) / fleet   # requests headed here

    rows[:, 8] = np.asarray(central.f) / net.f_max
    rows[:, 9] = (np.asarray(central.q) - net.q_min) / (1.0 - net.q_min)
    rows[:, 10] = np.asarray(central.p) / net.p_max

    rows[:, 11] = world.layout.bits
    rows[:, 12] = [world.layout.capacity(j) / fleet for j in range(n)]
    max_deg = max(1, max(world.graph.degree(j) for j in range(n)))
    rows[:, 13] = [world.graph.degree(j) / max_deg for j in range(n)]
    return rows


def assemble_nodes(static, t, params, name, live):
    """Node matrix with the period embedding appended to every row.

    ``live`` keeps the embedding on the autograd graph (actor path);
    the critic and context paths read it detached.
    """
    nodes = tensor(static)
    row = temporal_row(params, name, int(t))
    if not live:
        row = row.detach()
    return torch.cat([nodes, row.unsqueeze(0).expand(nodes.shape[0], -1)],
                     dim=1)


def critic_state(static, t, params, name) -> torch.Tensor:
    """Flat critic view: raw rows concatenated, embedding detached."""
    row = temporal_row(params, name, int(t)).detach()
    return torch.cat([tensor(static).reshape(-1), row])


# --------------------------------------------------------------------- losses


def central_losses(params, targets, log_alpha, batch, noise, *,
                   gamma, target_entropy, prefix="central"):
    """Soft actor-critic losses for the coordinator, one batch.

    ``batch`` holds tensors s, a, r, s2, d; ``noise`` the Gaussian draws
    for the next-state and current-state samples. Targets are frozen
    copies of the critic parameters.
    """
    s, a = tensor(batch["s"]), tensor(batch["a"])
    r, d = tensor(batch["r"]), tensor(batch["d"])
    s2 = tensor(batch["s2"])
    alpha = log_alpha.exp()

    mu2, ls2 = policy_forward(params, f"{prefix}.pi", s2)
    a2, lp2 = tanh_gaussian_sample(mu2, ls2, noise["next"])
    qin2 = torch.cat([s2, a2], dim=-1)
    t1 = dense_forward(targets, f"{prefix}.q1", qin2).squeeze(-1)
    t2 = dense_forward(targets, f"{prefix}.q2", qin2).squeeze(-1)
    y = (r + gamma * (1.0 - d) * (torch.min(t1, t2) - alpha * lp2)).detach()

    qin = torch.cat([s, a], dim=-1)
    q1 = dense_forward(params, f"{prefix}.q1", qin).squeeze(-1)
    q2 = dense_forward(params, f"{prefix}.q2", qin).squeeze(-1)

    mu, ls = policy_forward(params, f"{prefix}.pi", s)
    a_cur, lp = tanh_gaussian_sample(mu, ls, noise["cur"])
    qc = torch.cat([s, a_cur], dim=-1)
    q_pi = torch.min(dense_forward(params, f"{prefix}.q1", qc),
                     dense_forward(params, f"{prefix}.q2", qc)).squeeze(-1)

    return {
        "q1": 0.5 * ((q1 - y) ** 2).mean(),
        "q2": 0.5 * ((q2 - y) ** 2).mean(),
        "actor": (alpha.detach() * lp - q_pi).mean(),
        "alpha": (-log_alpha.exp() * (lp.detach() + target_entropy)).mean(),
        "y": y,
        "action": a_cur,
        "logp": lp,
        "next_action": a2,
        "next_logp": lp2,
    }


def area_losses(params, targets, log_alpha, batch, noise, z, neighbors,
                region, *, gamma, target_entropy, prefix):
    """Soft actor-critic losses for one regional agent.

    The actor reads its GAT row plus a detached copy of z; the critics
    read the flat raw state plus z as given, so a differentiable z
    carries inference gradients through the critic loss only. The target
    side is cut from the graph wholesale via y.detach().
    """
    B = batch["static"].shape[0]
    z = tensor(z)
    zB = z if z.ndim == 2 else z.unsqueeze(0).expand(B, -1)
    r, d = tensor(batch["r"]), tensor(batch["d"])
    alpha = log_alpha.exp()

    def embed(statics, ts):
        rows = []
        for b in range(B):
            nodes = assemble_nodes(statics[b], ts[b], params,
                                   f"{prefix}.temp", live=True)
            rows.append(gat_forward(params, f"{prefix}.gat", nodes,
                                    neighbors)[region])
        return torch.stack(rows)

    def flat(statics, ts):
        return torch.stack([
            critic_state(statics[b], ts[b], params, f"{prefix}.temp")
            for b in range(B)
        ])

    emb2 = embed(batch["static2"], batch["t2"])
    mu2, ls2 = policy_forward(params, f"{prefix}.pi",
                              torch.cat([emb2, zB.detach()], dim=-1))
    a2, lp2 = tanh_gaussian_sample(mu2, ls2, noise["next"])
    flat2 = flat(batch["static2"], batch["t2"])
    tin2 = torch.cat([flat2, a2, zB], dim=-1)
    t1 = dense_forward(targets, f"{prefix}.q1", tin2).squeeze(-1)
    t2 = dense_forward(targets, f"{prefix}.q2", tin2).squeeze(-1)
    y = (r + gamma * (1.0 - d) * (torch.min(t1, t2) - alpha * lp2)).detach()

    flat1 = flat(batch["static"], batch["t"])
    a = tensor(batch["a"])
    qin = torch.cat([flat1, a, zB], dim=-1)
    q1 = dense_forward(params, f"{prefix}.q1", qin).squeeze(-1)
    q2 = dense_forward(params, f"{prefix}.q2", qin).squeeze(-1)

    emb = embed(batch["static"], batch["t"])
    mu, ls = policy_forward(params, f"{prefix}.pi",
                            torch.cat([emb, zB.detach()], dim=-1))
    a_cur, lp = tanh_gaussian_sample(mu, ls, noise["cur"])
    qc = torch.cat([flat1.detach(), a_cur, zB.detach()], dim=-1)
    q_pi = torch.min(dense_forward(params, f"{prefix}.q1", qc),
                     dense_forward(params, f"{prefix}.q2", qc)).squeeze(-1)

    return {
        "q1": 0.5 * ((q1 - y) ** 2).mean(),
        "q2": 0.5 * ((q2 - y) ** 2).mean(),
        "actor": (alpha.detach() * lp - q_pi).mean(),
        "alpha": (-log_alpha.exp() * (lp.detach() + target_entropy)).mean(),
        "y": y,
        "action": a_cur,
        "logp": lp,
    }


def polyak_update(params, targets, beta):
    """Slow-moving copy: target <- (1 - beta) target + beta source."""
    with torch.no_grad():
        for k, tgt in targets.items():
            tgt.mul_(1.0 - beta).add_(params[k].detach(), alpha=beta)


# --------------------------------------------------------------------- agents


class Replay:
    """FIFO transition store with caller-seeded uniform sampling."""

    def __init__(self, maxlen: int):
        self.items = deque(maxlen=maxlen)

    def add(self, item):
        self.items.append(item)

    def __len__(self):
        return len(self.items)

    def sample(self, rng, k: int):
        idx = rng.integers(0, len(self.items), size=k)
        return [self.items[i] for i in idx]


def _frozen_copy(params):
    return {k: v.detach().clone() for k, v in params.items()}


class CentralAgent:
    """Coordinator: flat state in, 3n-vector of (f, q, p) commands out."""

    def __init__(self, n, state_dim, net, rng, buffer=50_000, act_dim=None):
        self.n = n
        self.name = "central"
        self.state_dim = state_dim
        self.act_dim = 3 * n if act_dim is None else act_dim
        self.params = {}
        self.params.update(policy_params(
            "central.pi", state_dim, net.central_actor_hidden,
            net.central_actor_layers, self.act_dim, rng))
        widths = ([state_dim + self.act_dim]
                  + [net.central_critic_hidden] * net.central_critic_layers
                  + [1])
        self.params.update(dense_params("central.q1", widths, rng))
        self.params.update(dense_params("central.q2", widths, rng))
        self.targets = _frozen_copy(subset(self.params,
                                           "central.q1", "central.q2"))
        self.log_alpha = torch.zeros((), dtype=torch.float64,
                                     requires_grad=True)
        self.target_entropy = -float(self.act_dim)
        self.replay = Replay(buffer)

    def actor_prefixes(self):
        return ("central.pi",)

    def critic_prefixes(self):
        return ("central.q1", "central.q2")

    def act(self, state, rng=None, mean=False) -> np.ndarray:
        mu, ls = policy_forward(self.params, "central.pi", tensor(state))
        if mean:
            eps = np.zeros(self.act_dim)
        else:
            eps = rng.standard_normal(self.act_dim)
        a, _ = tanh_gaussian_sample(mu, ls, eps)
        return a.detach().numpy()


class AreaAgent:
    """Regional agent: GAT over node rows for the actor, raw state for
    the critics, plus a task posterior from its own context encoder."""

    def __init__(self, region, n, periods, net, rng,
                 buffer=50_000, context_buffer=10_000, with_encoder=True):
        self.region = region
        self.n = n
        self.name = f"area{region}"
        self.act_dim = 6 * n
        self.latent = net.latent_dim
        self.gat_in = NODE_FEATURES + net.temporal_dim
        self.flat_dim = n * NODE_FEATURES + net.temporal_dim
        self.with_encoder = with_encoder
        p = self.name

        self.params = {}
        self.params.update(gat_params(f"{p}.gat", self.gat_in, net.gat_dim,
                                      net.gat_heads, net.gat_out, rng))
        self.params.update(temporal_params(f"{p}.temp", periods,
                                           net.temporal_dim, rng))
        self.params.update(policy_params(
            f"{p}.pi", net.gat_out + self.latent, net.area_hidden,
            net.area_layers, self.act_dim, rng))
        widths = ([self.flat_dim + self.act_dim + self.latent]
                  + [net.area_hidden] * net.area_layers + [1])
        self.params.update(dense_params(f"{p}.q1", widths, rng))
        self.params.update(dense_params(f"{p}.q2", widths, rng))
        if with_encoder:
            enc_in = self.flat_dim + self.act_dim + 1
            self.params.update(encoder_params(
                f"{p}.enc", enc_in, net.encoder_hidden, net.encoder_layers,
                self.latent, rng))
        self.targets = _frozen_copy(subset(self.params, f"{p}.q1", f"{p}.q2"))
        self.log_alpha = torch.zeros((), dtype=torch.float64,
                                     requires_grad=True)
        self.target_entropy = -0.5 * self.act_dim
        self.replay = Replay(buffer)
        self.context = Replay(context_buffer)

    def actor_prefixes(self):
        p = self.name
        return (f"{p}.pi", f"{p}.gat", f"{p}.temp")

    def critic_prefixes(self):
        return (f"{self.name}.q1", f"{self.name}.q2")

    def encoder_prefixes(self):
        return (f"{self.name}.enc",)

    def act(self, static, t, z, neighbors, rng=None, mean=False) -> np.ndarray:
        nodes = assemble_nodes(static, t, self.params,
                               f"{self.name}.temp", live=False)
        emb = gat_forward(self.params, f"{self.name}.gat", nodes,
                          neighbors)[self.region]
        x = torch.cat([emb, tensor(z)])
        mu, ls = policy_forward(self.params, f"{self.name}.pi", x)
        if mean:
            eps = np.zeros(self.act_dim)
        else:
            eps = rng.standard_normal(self.act_dim)
        a, _ = tanh_gaussian_sample(mu, ls, eps)
        return a.detach().numpy()

    def context_row(self, static, t, action, reward) -> np.ndarray:
        flat = critic_state(static, t, self.params,
                            f"{self.name}.temp").detach().numpy()
        return np.concatenate([flat, np.asarray(action, dtype=float),
                               [float(reward)]])
