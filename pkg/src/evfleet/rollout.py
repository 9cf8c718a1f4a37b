"""Episode execution: a policy plans each period, the dispatcher runs it.

Policies share a small planning interface. The runner links consecutive
period snapshots into transitions, applies the coordinator's tracking
penalty, and returns everything a trainer or evaluator needs from one
episode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .agents import (
    AreaAgent,
    CentralAgent,
    build_central_state,
    build_node_features,
    central_state_dim,
)
from .codec import decode_area, decode_central, realized_central, tracking_penalty
from .context import posterior_from_context, sample_z
from .dispatch import CentralSignals, run_period
from .nets import load_params, save_params
from .world import episode_metrics, init_world

POLICY_KINDS = ("greedy", "central_sac", "hier_sac", "gat_pearl")


class GreedyPolicy:
    """Pure heuristic: no commands, no thresholds, no learning."""

    name = "greedy"
    emits_central = False

    def begin_episode(self, rng, mean=False):
        pass

    def central_action(self, state, rng, mean=False):
        return None

    def area_actions(self, static, t, rng, mean=False):
        return None


class HierPolicy:
    """Coordinator plus one regional agent per region.

    With ``use_posterior`` the latent task variable is drawn from each
    agent's context posterior at episode start (its mean in mean mode);
    otherwise z stays at zero, which is the task-blind baseline.
    """

    emits_central = True

    def __init__(self, central, areas, neighbors, net, use_posterior, name):
        self.central = central
        self.areas = areas
        self.neighbors = neighbors
        self.net = net
        self.use_posterior = use_posterior
        self.name = name
        self.z = {j: np.zeros(ag.latent) for j, ag in enumerate(areas)}

    def begin_episode(self, rng, mean=False):
        for j, ag in enumerate(self.areas):
            if not (self.use_posterior and ag.with_encoder):
                self.z[j] = np.zeros(ag.latent)
                continue
            rows = None
            if len(ag.context):
                take = min(len(ag.context), self.net.context_batch)
                rows = np.stack(list(ag.context.items)[-take:])
            mu, sigma = posterior_from_context(
                ag.params, f"{ag.name}.enc", rows, ag.latent,
                self.net.sigma_floor)
            if mean:
                z = mu
            else:
                z = sample_z(mu, sigma, rng.standard_normal(ag.latent))
            self.z[j] = z.detach().numpy().copy()

    def central_action(self, state, rng, mean=False):
        return self.central.act(state, rng=rng, mean=mean)

    def area_actions(self, static, t, rng, mean=False):
        return {
            j: ag.act(static, t, self.z[j], self.neighbors, rng=rng,
                      mean=mean)
            for j, ag in enumerate(self.areas)
        }


class CentralOnlyPolicy:
    """Flat baseline: one agent emits every region's threshold block.

    The coordinator channel stays neutral, so this measures what a
    single monolithic controller can do with the same information.
    """

    name = "central_sac"
    emits_central = False

    def __init__(self, agent, n):
        self.agent = agent
        self.n = n
        self._stacked = None

    def begin_episode(self, rng, mean=False):
        self._stacked = None

    def central_action(self, state, rng, mean=False):
        self._stacked = self.agent.act(state, rng=rng, mean=mean)
        return self._stacked

    def area_actions(self, static, t, rng, mean=False):
        k = 6 * self.n
        return {j: self._stacked[j * k:(j + 1) * k] for j in range(self.n)}


def make_policy(kind, scenario, graph, rng):
    """Fresh randomly initialized policy of the named family."""
    n = graph.n
    net = scenario.nets
    if kind == "greedy":
        return GreedyPolicy()
    if kind == "central_sac":
        agent = CentralAgent(n, central_state_dim(n), net, rng,
                             buffer=scenario.train.buffer_transitions,
                             act_dim=6 * n * n)
        return CentralOnlyPolicy(agent, n)
    if kind in ("hier_sac", "gat_pearl"):
        central = CentralAgent(n, central_state_dim(n), net, rng,
                               buffer=scenario.train.buffer_transitions)
        areas = [
            AreaAgent(j, n, scenario.periods, net, rng,
                      buffer=scenario.train.buffer_transitions,
                      context_buffer=scenario.train.buffer_context,
                      with_encoder=(kind == "gat_pearl"))
            for j in range(n)
        ]
        return HierPolicy(central, areas, graph.neighbors, net,
                          use_posterior=(kind == "gat_pearl"), name=kind)
    raise ValueError(f"unknown policy kind {kind!r}, "
                     f"expected one of {POLICY_KINDS}")


@dataclass
class EpisodeRecord:
    """One episode's transitions, rewards and summary metrics."""

    metrics: object = None
    central: list = field(default_factory=list)
    areas: dict = field(default_factory=dict)
    central_rewards: list = field(default_factory=list)
    area_rewards: list = field(default_factory=list)
    stranded: list = field(default_factory=list)


def run_episode(world, model, policy, rng, net, lam, mean=False,
                collect=True) -> EpisodeRecord:
    """Drive one full episode of ``world.grid.periods`` periods.

    Transitions link each period's pre-decision snapshot to the next;
    the final pair is flushed against the terminal snapshot with the
    done flag set. ``mean`` switches every sampled action to its mode.
    """
    n = world.n
    T = world.grid.periods
    rec = EpisodeRecord(areas={j: [] for j in range(n)})
    policy.begin_episode(rng, mean=mean)

    pend_central = None
    pend_area = None
    sig = CentralSignals.neutral(n, net.f_max)

    for per in range(T):
        state = build_central_state(world, model, net)
        action = policy.central_action(state, rng, mean=mean)
        if action is not None and policy.emits_central:
            sig = decode_central(action, n, net)
        else:
            sig = CentralSignals.neutral(n, net.f_max)
        static = build_node_features(world, sig, net)

        if collect and pend_central is not None:
            s0, a0, r0 = pend_central
            rec.central.append((s0, a0, r0, state, 0.0))
            pend_central = None
        if collect and pend_area is not None:
            for j, (st0, t0, a0, r0) in pend_area.items():
                rec.areas[j].append((st0, t0, a0, r0, static, per, 0.0))
            pend_area = None

        area_acts = policy.area_actions(static, per, rng, mean=mean)
        areas = None
        if area_acts is not None:
            areas = {j: decode_area(v, n) for j, v in sorted(area_acts.items())}
        result = run_period(world, sig if policy.emits_central else None,
                            areas)
        rec.area_rewards.append(list(result.rewards))
        rec.stranded = result.stranded

        if action is not None:
            if policy.emits_central:
                caps = [world.station_capacity(j) for j in range(n)]
                realized = realized_central(result.ledger, caps, net)
                r_c = float(sum(result.rewards)
                            - tracking_penalty(action, realized, net, lam))
            else:
                r_c = float(sum(result.rewards))
            rec.central_rewards.append(r_c)
            if collect:
                pend_central = (state, action, r_c)
        if collect and area_acts is not None:
            pend_area = {
                j: (static, per, area_acts[j], result.rewards[j])
                for j in area_acts
            }

    if collect and (pend_central is not None or pend_area is not None):
        state_end = build_central_state(world, model, net)
        static_end = build_node_features(world, sig, net)
        if pend_central is not None:
            s0, a0, r0 = pend_central
            rec.central.append((s0, a0, r0, state_end, 1.0))
        if pend_area is not None:
            for j, (st0, t0, a0, r0) in pend_area.items():
                rec.areas[j].append((st0, t0, a0, r0, static_end, T - 1, 1.0))

    rec.metrics = episode_metrics(world)
    return rec


def episode_from_scenario(scenario, layout, seed, policy, rng, mean=False,
                          collect=True, graph=None, grid=None):
    """Build a fresh world for (scenario, layout, seed) and run it."""
    graph = graph or scenario.build_graph()
    grid = grid or scenario.build_grid()
    world = init_world(scenario, layout, seed, graph=graph, grid=grid)
    model = scenario.build_demand_model(graph, grid)
    return world, run_episode(world, model, policy, rng, scenario.nets,
                              scenario.train.lambda_penalty, mean=mean,
                              collect=collect)


# ------------------------------------------------------------ checkpoints


class CheckpointError(ValueError):
    """Checkpoint content does not fit the requested policy."""


def policy_agents(policy):
    """All learners a policy owns, coordinator first. Empty for greedy."""
    if hasattr(policy, "areas"):
        return [policy.central, *policy.areas]
    if hasattr(policy, "agent"):
        return [policy.agent]
    return []


def save_policy(path, policy, opts=None, extra=None) -> None:
    """Bundle every agent's weights, targets and temperature into one
    container, plus optimizer moments when ``opts`` is given.

    Buffer contents are not persisted, only their lengths; a resumed
    run refills replay from fresh episodes.
    """
    agents = policy_agents(policy)
    if not agents:
        raise CheckpointError(
            f"policy {policy.name!r} has no parameters to save")
    tree = {}
    meta = {"policy": policy.name, "buffers": {}}
    for ag in agents:
        tree[f"{ag.name}.params"] = {**ag.params, "log_alpha": ag.log_alpha}
        tree[f"{ag.name}.targets"] = dict(ag.targets)
        meta["buffers"][ag.name] = {
            "replay": len(ag.replay),
            "context": len(ag.context) if hasattr(ag, "context") else 0,
        }
    if opts:
        steps = {}
        for aname in sorted(opts):
            for gname in sorted(opts[aname]):
                opt = opts[aname][gname]
                tree[f"opt.{aname}.{gname}.m"] = opt.m
                tree[f"opt.{aname}.{gname}.v"] = opt.v
                steps[f"{aname}.{gname}"] = opt.steps
        meta["opt_steps"] = steps
    meta.update(extra or {})
    save_params(path, tree, extra=meta)


def _copy_group(dst, src, label):
    for k in sorted(dst):
        if k not in src:
            raise CheckpointError(f"checkpoint is missing {label} {k!r}")
        if tuple(src[k].shape) != tuple(dst[k].shape):
            raise CheckpointError(
                f"checkpoint {label} {k!r} has shape "
                f"{tuple(src[k].shape)}, this scenario needs "
                f"{tuple(dst[k].shape)}; the checkpoint was built for a "
                f"different scenario geometry")
        with torch.no_grad():
            dst[k].copy_(src[k])


def load_policy(path, scenario, graph=None, expect=None):
    """Rebuild a policy for ``scenario`` and load stored weights into it.

    Returns ``(policy, meta)`` where meta is the manifest extra dict
    (policy kind, buffer lengths, training split when saved by the
    trainer). ``expect`` pins the stored kind.
    """
    graph = graph or scenario.build_graph()
    tree, meta = load_params(path)
    kind = meta.get("policy")
    if kind not in POLICY_KINDS:
        raise CheckpointError(f"checkpoint names unknown policy {kind!r}")
    if expect is not None and kind != expect:
        raise CheckpointError(
            f"checkpoint holds a {kind!r} policy, expected {expect!r}")
    policy = make_policy(kind, scenario, graph, np.random.default_rng(0))
    agents = policy_agents(policy)
    if not agents:
        raise CheckpointError(f"policy {kind!r} has nothing to load")
    for ag in agents:
        stored = tree.get(f"{ag.name}.params")
        targets = tree.get(f"{ag.name}.targets")
        if stored is None or targets is None:
            raise CheckpointError(
                f"checkpoint is missing agent {ag.name!r}; it was saved "
                f"from a smaller scenario")
        _copy_group(ag.params, stored, f"{ag.name} parameter")
        _copy_group(ag.targets, targets, f"{ag.name} target")
        with torch.no_grad():
            ag.log_alpha.copy_(stored["log_alpha"])
    return policy, meta


def restore_opts(path, opts) -> bool:
    """Fill trainer optimizer state in place from a checkpoint.

    Returns False when the checkpoint carries no optimizer state (it
    was saved for evaluation only); raises when state is present but
    does not cover ``opts``.
    """
    tree, meta = load_params(path)
    steps = meta.get("opt_steps")
    if not steps:
        return False
    for aname in sorted(opts):
        for gname in sorted(opts[aname]):
            key = f"{aname}.{gname}"
            m = tree.get(f"opt.{key}.m")
            v = tree.get(f"opt.{key}.v")
            if m is None or v is None or key not in steps:
                raise CheckpointError(
                    f"checkpoint has no optimizer state for {key!r}")
            opt = opts[aname][gname]
            opt.m = {k: t.detach().clone() for k, t in m.items()}
            opt.v = {k: t.detach().clone() for k, t in v.items()}
            opt.steps = {k: int(c) for k, c in steps[key].items()}
    return True
