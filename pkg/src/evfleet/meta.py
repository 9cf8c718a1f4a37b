"""Meta-training, validation and few-shot adaptation.

The trainable policies share one collection schedule; what differs is
the update. The latent-conditioned hierarchy adapts fast weights per
task with the inference network held fixed, then backs query losses
through the unrolled inner loop into the slow weights, while the
encoder receives a combined adapted-plus-representation gradient. The
plain hierarchy and the flat coordinator take pooled one-step updates.

Few-shot adaptation works on a single target task in place: warmup
episodes collect experience under the prior latent, later episodes pin
the posterior mean and run clipped gradient rounds, with the
coordinator stepped once every few rounds at a reduced rate.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import time

import numpy as np
import torch
from numpy.random import default_rng

from .agents import area_losses, central_losses, polyak_update, Replay
from .context import kl_to_prior, posterior_from_context, sample_z
from .nets import flat_values, subset
from .rollout import episode_from_scenario, make_policy
from .seeding import child_seed

log = logging.getLogger(__name__)


class MetaError(RuntimeError):
    pass


# ------------------------------------------------------------ optimization


class Adam(object):
    """Minimal Adam over a named parameter dict, updating in place.

    Moments are keyed by parameter name and bias correction counts per
    key, so a parameter that sits out a step keeps its own clock.
    """

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.steps = {}

    def step(self, params, grads):
        with torch.no_grad():
            for k in sorted(params):
                g = grads.get(k)
                if g is None:
                    continue
                g = g.detach()
                if k not in self.m:
                    self.m[k] = torch.zeros_like(params[k])
                    self.v[k] = torch.zeros_like(params[k])
                t = self.steps[k] = self.steps.get(k, 0) + 1
                self.m[k].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                self.v[k].mul_(self.beta2).addcmul_(g, g,
                                                    value=1.0 - self.beta2)
                m_hat = self.m[k] / (1.0 - self.beta1 ** t)
                v_hat = self.v[k] / (1.0 - self.beta2 ** t)
                params[k].sub_(self.lr * m_hat / (v_hat.sqrt() + self.eps))


def clip_grads(grads, clip):
    """Scale a gradient tuple so its joint norm is at most ``clip``."""
    total = math.sqrt(sum(float((g.detach() ** 2).sum())
                          for g in grads if g is not None))
    if total <= clip or total == 0.0:
        return grads
    scale = clip / total
    return tuple(None if g is None else g * scale for g in grads)


def inner_gd(loss_fn, params, lr, steps, create_graph=True):
    """Plain descent producing fast weights, graph kept for unrolling.

    ``loss_fn(params, k)`` returns the step-k scalar loss. Every
    parameter moves with the same step size; for the grouped update the
    agents use, see :func:`grouped_gd_step`.
    """
    fast = dict(params)
    trace = []
    for k in range(steps):
        loss = loss_fn(fast, k)
        if not torch.isfinite(loss):
            raise MetaError(f"non-finite inner loss at step {k}")
        names = sorted(fast)
        grads = torch.autograd.grad(loss, [fast[n] for n in names],
                                    create_graph=create_graph,
                                    allow_unused=True)
        fast = {n: (fast[n] if g is None else fast[n] - lr * g)
                for n, g in zip(names, grads)}
        trace.append(loss.item())
    return fast, trace


def _group_grads(losses, groups, view, *, create_graph=False, clip=None):
    """Per-group gradients of possibly graph-sharing losses.

    All gradients are evaluated before any caller applies an update, so
    a simultaneous step falls out for free.
    """
    order = sorted(losses)
    out = {}
    for i, gname in enumerate(order):
        keys = groups[gname]
        retain = create_graph or i < len(order) - 1
        grads = torch.autograd.grad(losses[gname], [view[k] for k in keys],
                                    create_graph=create_graph,
                                    retain_graph=retain, allow_unused=True)
        if clip is not None:
            grads = clip_grads(grads, clip)
        out[gname] = dict(zip(keys, grads))
    return out


def _all_finite(grad_groups):
    for named in grad_groups.values():
        for g in named.values():
            if g is not None and not torch.isfinite(g).all():
                return False
    return True


def grouped_gd_step(losses, groups, fast, lrs, *, create_graph=False,
                    clip=None):
    """One simultaneous descent step with per-group step sizes."""
    grads = _group_grads(losses, groups, fast, create_graph=create_graph,
                         clip=clip)
    new = dict(fast)
    for gname, named in grads.items():
        for k, g in named.items():
            if g is not None:
                new[k] = fast[k] - lrs[gname] * g
    return new


# ------------------------------------------------------------ batch plumbing


def stack_area_batch(items):
    """Regional transitions (static, t, a, r, static2, t2, d) to arrays."""
    return {
        "static": np.stack([it[0] for it in items]),
        "t": np.array([int(it[1]) for it in items]),
        "a": np.stack([np.asarray(it[2], dtype=float) for it in items]),
        "r": np.array([float(it[3]) for it in items]),
        "static2": np.stack([it[4] for it in items]),
        "t2": np.array([int(it[5]) for it in items]),
        "d": np.array([float(it[6]) for it in items]),
    }


def stack_central_batch(items):
    return {
        "s": np.stack([np.asarray(it[0], dtype=float) for it in items]),
        "a": np.stack([np.asarray(it[1], dtype=float) for it in items]),
        "r": np.array([float(it[2]) for it in items]),
        "s2": np.stack([np.asarray(it[3], dtype=float) for it in items]),
        "d": np.array([float(it[4]) for it in items]),
    }


def _noise(rng, count, act_dim):
    return {"next": rng.standard_normal((count, act_dim)),
            "cur": rng.standard_normal((count, act_dim))}


def support_query_split(rng, size, batch):
    """Index pools for the inner-loop and query batches.

    Disjoint when the buffer affords it; otherwise both draw from the
    whole buffer and the caller logs the overlap.
    """
    if size >= 2 * batch:
        perm = rng.permutation(size)
        return perm[batch:], perm[:batch], False
    return np.arange(size), rng.integers(0, size, size=batch), True


def _agent_groups(agent, view):
    def keys_for(prefixes):
        pref = tuple(q + "." for q in prefixes)
        return sorted(k for k in view if k.startswith(pref))

    return {"actor": keys_for(agent.actor_prefixes()),
            "critic": keys_for(agent.critic_prefixes()),
            "alpha": ["log_alpha"]}


# ------------------------------------------------------------ latent helpers


def support_z(agent, context, rng, net):
    """Posterior sample for collection and adaptation, cut from the
    graph so inner-loop gradients cannot reach the encoder."""
    if not agent.with_encoder or len(context) == 0:
        return np.zeros(agent.latent)
    rows = context.sample(rng, min(len(context), net.context_batch))
    with torch.no_grad():
        mu, sg = posterior_from_context(
            agent.params, f"{agent.name}.enc", np.stack(rows),
            agent.latent, net.sigma_floor)
    z = sample_z(mu, sg, rng.standard_normal(agent.latent))
    return z.detach().numpy()


def posterior_mean(agent, rows, net):
    """Deterministic latent from the most recent context rows."""
    if not agent.with_encoder or not rows:
        return np.zeros(agent.latent)
    take = list(rows)[-net.context_batch:]
    with torch.no_grad():
        mu, _ = posterior_from_context(
            agent.params, f"{agent.name}.enc", np.stack(take),
            agent.latent, net.sigma_floor)
    return mu.numpy().copy()


class FixedZPolicy:
    """View over a hierarchical policy with the latent pinned.

    Used wherever the caller owns the inference step: collection with a
    task-specific posterior, frozen validation, few-shot adaptation.
    """

    emits_central = True

    def __init__(self, base, z):
        self.base = base
        self.z = {j: np.asarray(v, dtype=float) for j, v in z.items()}

    def begin_episode(self, rng, mean=False):
        pass

    def central_action(self, state, rng, mean=False):
        return self.base.central.act(state, rng=rng, mean=mean)

    def area_actions(self, static, t, rng, mean=False):
        return {
            j: ag.act(static, t, self.z[j], self.base.neighbors, rng=rng,
                      mean=mean)
            for j, ag in enumerate(self.base.areas)
        }


# ------------------------------------------------------------ adaptation


def adapt_area_task(agent, steps_data, z_s, neighbors, train, *,
                    create_graph=True, check_encoder=True):
    """Inner-loop adaptation of one regional agent to one task.

    Plain simultaneous descent on fast weights (actor, critics,
    temperature) with the encoder held fixed; ``steps_data`` is a list
    of (batch, noise) pairs, one per step, and ``z_s`` must already be
    detached. A structural check at the first step asserts no gradient
    path back to the encoder exists.
    """
    p = agent.name
    fast = dict(subset(agent.params, *agent.actor_prefixes(),
                       *agent.critic_prefixes()))
    fast["log_alpha"] = agent.log_alpha
    groups = _agent_groups(agent, fast)
    lrs = {"actor": train.area_lr_actor, "critic": train.area_lr_critic,
           "alpha": train.area_lr_temp}

    logs = []
    for k, (batch, noise) in enumerate(steps_data):
        out = area_losses(fast, agent.targets, fast["log_alpha"], batch,
                          noise, z_s, neighbors, agent.region,
                          gamma=train.gamma,
                          target_entropy=agent.target_entropy, prefix=p)
        losses = {"actor": out["actor"], "critic": out["q1"] + out["q2"],
                  "alpha": out["alpha"]}
        for v in losses.values():
            if not torch.isfinite(v):
                raise MetaError(f"{p}: non-finite inner loss at step {k}")
        if k == 0 and check_encoder and agent.with_encoder:
            enc = [agent.params[name] for name in sorted(agent.params)
                   if name.startswith(f"{p}.enc.")]
            for v in losses.values():
                leaks = torch.autograd.grad(v, enc, retain_graph=True,
                                            allow_unused=True)
                if any(g is not None for g in leaks):
                    raise MetaError(
                        f"{p}: encoder gradient leaked into the inner loop")
        logs.append({name: v.item() for name, v in losses.items()})
        fast = grouped_gd_step(losses, groups, fast, lrs,
                               create_graph=create_graph)
    return fast, logs


def meta_update_area(agent, slices, neighbors, train, net, rng, opts,
                     epoch, *, inner_steps=None):
    """One meta step for a single regional agent over a task batch.

    ``slices`` holds (task_id, replay, context) triples. Per task the
    fast weights adapt on support batches under a detached support
    latent; the query losses at the adapted weights then flow through
    the unrolled graph into the slow weights. The encoder objective
    combines the adapted critic loss with the pre-adaptation critic
    loss and the annealed prior term, all through one shared query
    latent sample. Nothing is applied if any meta gradient is
    non-finite.
    """
    L = train.inner_steps if inner_steps is None else inner_steps
    if L < 1:
        raise MetaError("inner_steps must be at least 1")
    B = train.area_batch
    p = agent.name
    acc = {"actor": 0.0, "critic": 0.0, "alpha": 0.0, "enc": 0.0}
    rows = []
    used = 0

    for tid, replay, context in slices:
        if len(replay) == 0 or len(context) == 0:
            continue
        sup_pool, qry_idx, overlapped = support_query_split(
            rng, len(replay), B)
        if overlapped:
            log.warning("%s task %s: replay too small for disjoint "
                        "support/query batches", p, tid)
        steps_data = []
        for _ in range(L):
            idx = sup_pool[rng.integers(0, len(sup_pool), size=B)]
            steps_data.append(
                (stack_area_batch([replay.items[i] for i in idx]),
                 _noise(rng, B, agent.act_dim)))
        z_s = support_z(agent, context, rng, net)
        fast, inner = adapt_area_task(agent, steps_data, z_s, neighbors,
                                      train, create_graph=True)

        qbatch = stack_area_batch([replay.items[i] for i in qry_idx])
        qnoise = _noise(rng, B, agent.act_dim)
        ctx_rows = context.sample(rng, min(len(context), net.context_batch))
        mu_q, sg_q = posterior_from_context(
            agent.params, f"{p}.enc", np.stack(ctx_rows), agent.latent,
            net.sigma_floor)
        z_q = sample_z(mu_q, sg_q, rng.standard_normal(agent.latent))

        out_l = area_losses(fast, agent.targets, fast["log_alpha"], qbatch,
                            qnoise, z_q, neighbors, agent.region,
                            gamma=train.gamma,
                            target_entropy=agent.target_entropy, prefix=p)
        out_0 = area_losses(agent.params, agent.targets, agent.log_alpha,
                            qbatch, qnoise, z_q, neighbors, agent.region,
                            gamma=train.gamma,
                            target_entropy=agent.target_entropy, prefix=p)
        kl = kl_to_prior(mu_q, sg_q)

        q_l = out_l["q1"] + out_l["q2"]
        q_0 = out_0["q1"] + out_0["q2"]
        acc["actor"] = acc["actor"] + out_l["actor"]
        acc["critic"] = acc["critic"] + q_l
        acc["alpha"] = acc["alpha"] + out_l["alpha"]
        acc["enc"] = acc["enc"] + q_l + train.beta_r * (
            q_0 + train.kl_weight(epoch) * kl)
        rows.append({
            "task": tid,
            "sup_first": inner[0],
            "sup_last": inner[-1],
            "qry": {"actor": out_l["actor"].item(), "critic": q_l.item(),
                    "alpha": out_l["alpha"].item()},
            "kl": kl.item(),
        })
        used += 1

    if used == 0:
        return rows
    count = float(used)
    objs = {name: v / count for name, v in acc.items()}

    actor_keys = sorted(subset(agent.params, *agent.actor_prefixes()))
    critic_keys = sorted(subset(agent.params, *agent.critic_prefixes()))
    enc_keys = sorted(subset(agent.params, *agent.encoder_prefixes()))
    g_actor = torch.autograd.grad(
        objs["actor"], [agent.params[k] for k in actor_keys],
        retain_graph=True, allow_unused=True)
    g_critic = torch.autograd.grad(
        objs["critic"], [agent.params[k] for k in critic_keys],
        retain_graph=True, allow_unused=True)
    g_alpha = torch.autograd.grad(objs["alpha"], [agent.log_alpha],
                                  retain_graph=True, allow_unused=True)
    g_enc = torch.autograd.grad(
        objs["enc"], [agent.params[k] for k in enc_keys],
        allow_unused=True)

    flat = [g for gs in (g_actor, g_critic, g_alpha, g_enc) for g in gs]
    if any(g is not None and not torch.isfinite(g).all() for g in flat):
        log.warning("%s: non-finite meta gradient, skipping update", p)
        for row in rows:
            row["skipped"] = True
        return rows

    opts["actor"].step({k: agent.params[k] for k in actor_keys},
                       dict(zip(actor_keys, g_actor)))
    opts["critic"].step({k: agent.params[k] for k in critic_keys},
                        dict(zip(critic_keys, g_critic)))
    opts["alpha"].step({"log_alpha": agent.log_alpha},
                       {"log_alpha": g_alpha[0]})
    opts["enc"].step({k: agent.params[k] for k in enc_keys},
                     dict(zip(enc_keys, g_enc)))
    polyak_update(agent.params, agent.targets, train.polyak)
    return rows


# ------------------------------------------------------------ plain updates


def central_update(agent, train, rng, opts):
    """Pooled one-step update for the coordinator."""
    if len(agent.replay) == 0:
        return None
    B = train.central_batch
    batch = stack_central_batch(agent.replay.sample(rng, B))
    noise = _noise(rng, B, agent.act_dim)
    out = central_losses(agent.params, agent.targets, agent.log_alpha,
                         batch, noise, gamma=train.gamma,
                         target_entropy=agent.target_entropy)
    losses = {"actor": out["actor"], "critic": out["q1"] + out["q2"],
              "alpha": out["alpha"]}
    if not all(torch.isfinite(v) for v in losses.values()):
        log.warning("%s: non-finite losses, skipping update", agent.name)
        return None
    view = {**agent.params, "log_alpha": agent.log_alpha}
    groups = _agent_groups(agent, view)
    grads = _group_grads(losses, groups, view)
    if not _all_finite(grads):
        log.warning("%s: non-finite gradients, skipping update", agent.name)
        return None
    opts["actor"].step({k: view[k] for k in groups["actor"]},
                       grads["actor"])
    opts["critic"].step({k: view[k] for k in groups["critic"]},
                        grads["critic"])
    opts["alpha"].step({"log_alpha": agent.log_alpha}, grads["alpha"])
    polyak_update(agent.params, agent.targets, train.polyak)
    return {name: v.item() for name, v in losses.items()}


def area_sac_update(agent, z, neighbors, train, rng, opts):
    """Pooled one-step update for a regional agent at a fixed latent."""
    if len(agent.replay) == 0:
        return None
    B = train.area_batch
    batch = stack_area_batch(agent.replay.sample(rng, B))
    noise = _noise(rng, B, agent.act_dim)
    out = area_losses(agent.params, agent.targets, agent.log_alpha, batch,
                      noise, np.asarray(z, dtype=float), neighbors,
                      agent.region, gamma=train.gamma,
                      target_entropy=agent.target_entropy,
                      prefix=agent.name)
    losses = {"actor": out["actor"], "critic": out["q1"] + out["q2"],
              "alpha": out["alpha"]}
    if not all(torch.isfinite(v) for v in losses.values()):
        log.warning("%s: non-finite losses, skipping update", agent.name)
        return None
    view = {**agent.params, "log_alpha": agent.log_alpha}
    groups = _agent_groups(agent, view)
    grads = _group_grads(losses, groups, view)
    if not _all_finite(grads):
        log.warning("%s: non-finite gradients, skipping update", agent.name)
        return None
    opts["actor"].step({k: view[k] for k in groups["actor"]},
                       grads["actor"])
    opts["critic"].step({k: view[k] for k in groups["critic"]},
                        grads["critic"])
    opts["alpha"].step({"log_alpha": agent.log_alpha}, grads["alpha"])
    polyak_update(agent.params, agent.targets, train.polyak)
    return {name: v.item() for name, v in losses.items()}


# ------------------------------------------------------------ validation


def episode_reward(rec) -> float:
    """System objective of one episode: the plain sum of area rewards."""
    return float(sum(sum(row) for row in rec.area_rewards))


def state_hash(policy) -> str:
    """Digest of every trainable tensor and buffer size reachable from
    a policy; a frozen evaluation must leave it unchanged."""
    h = hashlib.sha256()
    agents = []
    if hasattr(policy, "central"):
        agents.append(policy.central)
    if hasattr(policy, "agent"):
        agents.append(policy.agent)
    if hasattr(policy, "areas"):
        agents.extend(policy.areas)
    for ag in agents:
        h.update(flat_values(ag.params).tobytes())
        h.update(flat_values(ag.targets).tobytes())
        h.update(np.array([ag.log_alpha.item()]).tobytes())
        h.update(np.array([len(ag.replay)]).tobytes())
        if hasattr(ag, "context"):
            h.update(np.array([len(ag.context)]).tobytes())
    return h.hexdigest()


def meta_validate(policy, scenario, layouts, val_ids, seed, *, graph=None,
                  grid=None, episodes=3):
    """Frozen evaluation pass; returns the mean episode reward.

    Latent-bearing policies first probe each task once under the prior
    to build context, then evaluate with the posterior-mean latent.
    Every task is repeated ``episodes`` times in mean mode; identical
    repeats and an unchanged state hash are asserted, so any training
    side effect fails loudly.
    """
    graph = graph or scenario.build_graph()
    grid = grid or scenario.build_grid()
    before = state_hash(policy)
    totals = []
    for tid in val_ids:
        lay = layouts[tid]
        env_seed = child_seed(seed, f"val:{tid}")
        if hasattr(policy, "areas"):
            probe = FixedZPolicy(policy, {
                j: np.zeros(ag.latent)
                for j, ag in enumerate(policy.areas)
            })
            rng0 = default_rng(child_seed(seed, f"val:{tid}:ctx"))
            _, rec = episode_from_scenario(
                scenario, lay, env_seed, probe, rng0, mean=True,
                collect=True, graph=graph, grid=grid)
            z = {}
            for j, ag in enumerate(policy.areas):
                ctx = [ag.context_row(st, t, a, r)
                       for st, t, a, r, *_ in rec.areas[j]]
                z[j] = posterior_mean(ag, ctx, scenario.nets)
            runner = FixedZPolicy(policy, z)
        else:
            runner = policy
        runs = []
        for rep in range(episodes):
            rng = default_rng(child_seed(seed, f"val:{tid}:{rep}"))
            _, rec = episode_from_scenario(
                scenario, lay, env_seed, runner, rng, mean=True,
                collect=False, graph=graph, grid=grid)
            runs.append(episode_reward(rec))
        if len(set(runs)) != 1:
            raise MetaError(f"validation runs diverged on task {tid}: "
                            f"{runs}")
        totals.append(runs[0])
    if state_hash(policy) != before:
        raise MetaError("validation mutated agent state")
    return float(np.mean(totals)) if totals else 0.0


# ------------------------------------------------------------ few-shot


def push_record(policy, rec):
    """File one episode's transitions into the owning agents' buffers."""
    if hasattr(policy, "central"):
        for tr in rec.central:
            policy.central.replay.add(tr)
    elif hasattr(policy, "agent"):
        for tr in rec.central:
            policy.agent.replay.add(tr)
    if hasattr(policy, "areas"):
        for j, ag in enumerate(policy.areas):
            for tr in rec.areas.get(j, []):
                ag.replay.add(tr)
                if ag.with_encoder:
                    ag.context.add(ag.context_row(tr[0], tr[1], tr[2],
                                                  tr[3]))


def few_shot_area_step(agent, z, neighbors, train, rng):
    """One clipped descent round on a regional agent, in place."""
    if len(agent.replay) == 0:
        return False
    B = train.area_batch
    batch = stack_area_batch(agent.replay.sample(rng, B))
    noise = _noise(rng, B, agent.act_dim)
    out = area_losses(agent.params, agent.targets, agent.log_alpha, batch,
                      noise, np.asarray(z, dtype=float), neighbors,
                      agent.region, gamma=train.gamma,
                      target_entropy=agent.target_entropy,
                      prefix=agent.name)
    losses = {"actor": out["actor"], "critic": out["q1"] + out["q2"],
              "alpha": out["alpha"]}
    if not all(torch.isfinite(v) for v in losses.values()):
        log.warning("%s: non-finite losses, skipping step", agent.name)
        return False
    view = {**agent.params, "log_alpha": agent.log_alpha}
    groups = _agent_groups(agent, view)
    lrs = {"actor": train.area_lr_actor, "critic": train.area_lr_critic,
           "alpha": train.area_lr_temp}
    grads = _group_grads(losses, groups, view, clip=train.fs_clip)
    if not _all_finite(grads):
        log.warning("%s: non-finite gradients, skipping step", agent.name)
        return False
    with torch.no_grad():
        for gname, named in grads.items():
            for k, g in named.items():
                if g is not None:
                    view[k].sub_(lrs[gname] * g)
    polyak_update(agent.params, agent.targets, train.polyak)
    return True


def few_shot_central_step(agent, train, rng):
    """One clipped descent round on the coordinator at a reduced rate."""
    if len(agent.replay) == 0:
        return False
    B = train.central_batch
    batch = stack_central_batch(agent.replay.sample(rng, B))
    noise = _noise(rng, B, agent.act_dim)
    out = central_losses(agent.params, agent.targets, agent.log_alpha,
                         batch, noise, gamma=train.gamma,
                         target_entropy=agent.target_entropy)
    losses = {"actor": out["actor"], "critic": out["q1"] + out["q2"],
              "alpha": out["alpha"]}
    if not all(torch.isfinite(v) for v in losses.values()):
        log.warning("%s: non-finite losses, skipping step", agent.name)
        return False
    scale = train.fs_central_lr_factor
    lrs = {"actor": train.central_lr_actor * scale,
           "critic": train.central_lr_critic * scale,
           "alpha": train.central_lr_temp * scale}
    view = {**agent.params, "log_alpha": agent.log_alpha}
    groups = _agent_groups(agent, view)
    grads = _group_grads(losses, groups, view, clip=train.fs_clip)
    if not _all_finite(grads):
        log.warning("%s: non-finite gradients, skipping step", agent.name)
        return False
    with torch.no_grad():
        for gname, named in grads.items():
            for k, g in named.items():
                if g is not None:
                    view[k].sub_(lrs[gname] * g)
    polyak_update(agent.params, agent.targets, train.polyak)
    return True


def few_shot_adapt(policy, scenario, layout, seed, episodes, *,
                   graph=None, grid=None):
    """Adapt a hierarchical policy to one target task in place.

    Warmup episodes only collect experience under the prior latent;
    afterwards each episode refreshes the posterior-mean latent and is
    followed by ``fs_steps`` clipped gradient rounds over all regional
    agents, with the coordinator stepped once per ``fs_central_every``
    rounds. All actions run in mean mode. Returns the step counters and
    a per-episode history.
    """
    if not hasattr(policy, "areas"):
        raise MetaError("few-shot adaptation needs a hierarchical policy")
    graph = graph or scenario.build_graph()
    grid = grid or scenario.build_grid()
    train, net = scenario.train, scenario.nets
    counts = {"area": 0, "central": 0}
    history = []
    for ep in range(episodes):
        t0 = time.perf_counter()
        if ep < train.fs_warmup_episodes:
            z = {j: np.zeros(ag.latent)
                 for j, ag in enumerate(policy.areas)}
        else:
            z = {j: posterior_mean(ag, list(ag.context.items), net)
                 for j, ag in enumerate(policy.areas)}
        runner = FixedZPolicy(policy, z)
        rng = default_rng(child_seed(seed, f"fs:{ep}"))
        _, rec = episode_from_scenario(
            scenario, layout, child_seed(seed, f"fs:{ep}:env"), runner,
            rng, mean=True, collect=True, graph=graph, grid=grid)
        push_record(policy, rec)
        if ep >= train.fs_warmup_episodes:
            urng = default_rng(child_seed(seed, f"fs:{ep}:upd"))
            for _ in range(train.fs_steps):
                for j, ag in enumerate(policy.areas):
                    few_shot_area_step(ag, z[j], policy.neighbors, train,
                                       urng)
                counts["area"] += 1
                if counts["area"] % train.fs_central_every == 0:
                    few_shot_central_step(policy.central, train, urng)
                    counts["central"] += 1
        history.append({
            "episode": ep,
            "reward": episode_reward(rec),
            "realized": rec.metrics.cumulative_reward,
            "area_steps": counts["area"],
            "central_steps": counts["central"],
            "wall_s": time.perf_counter() - t0,
        })
    return counts, history


# ------------------------------------------------------------ trainer

_LOG_COLS = [
    "epoch", "iter", "agent", "task",
    "sup_first_critic", "sup_first_actor", "sup_first_alpha",
    "sup_last_critic", "sup_last_actor", "sup_last_alpha",
    "qry_critic", "qry_actor", "qry_alpha", "kl",
    "val_reward", "wall_s",
]

TRAINABLE_KINDS = ("gat_pearl", "hier_sac", "central_sac")


class MetaTrainer:
    """Multi-task trainer driving collection, updates and validation.

    ``gat_pearl`` runs the full meta loop; ``hier_sac`` and
    ``central_sac`` share the schedule but take pooled plain updates.
    Per-task experience lives in trainer-owned stores so the agents'
    own buffers stay clean for few-shot adaptation later.
    """

    def __init__(self, scenario, split, layouts, seed, kind="gat_pearl",
                 policy=None, log_path=None):
        if kind not in TRAINABLE_KINDS:
            raise MetaError(f"cannot train policy kind {kind!r}")
        self.scenario = scenario
        self.split = split
        self.seed = seed
        self.kind = kind
        self.graph = scenario.build_graph()
        self.grid = scenario.build_grid()
        self.layouts = {lay.id: lay for lay in layouts}
        self.policy = policy or make_policy(
            kind, scenario, self.graph, default_rng(child_seed(seed,
                                                               "init")))
        self.log_path = log_path
        self.stores = {}
        self.history = []
        self.epoch = 0
        self.opts = self._build_opts()

    def _build_opts(self):
        t = self.scenario.train
        opts = {"central": {"actor": Adam(t.central_lr_actor),
                            "critic": Adam(t.central_lr_critic),
                            "alpha": Adam(t.central_lr_temp)}}
        if hasattr(self.policy, "areas"):
            for j in range(len(self.policy.areas)):
                opts[f"area{j}"] = {"actor": Adam(t.area_lr_actor),
                                    "critic": Adam(t.area_lr_critic),
                                    "alpha": Adam(t.area_lr_temp),
                                    "enc": Adam(t.lr_encoder)}
        return opts

    def _store(self, tid):
        if tid not in self.stores:
            t = self.scenario.train
            self.stores[tid] = [
                (Replay(t.buffer_transitions), Replay(t.buffer_context))
                for _ in range(self.graph.n)
            ]
        return self.stores[tid]

    def _central_agent(self):
        if hasattr(self.policy, "central"):
            return self.policy.central
        return self.policy.agent

    def _collect(self, tid, epoch, rng):
        lay = self.layouts[tid]
        pol = self.policy
        arng = default_rng(child_seed(self.seed,
                                      f"collect:{epoch}:{tid}"))
        if self.kind == "gat_pearl":
            store = self._store(tid)
            z = {j: support_z(ag, store[j][1], arng, self.scenario.nets)
                 for j, ag in enumerate(pol.areas)}
            runner = FixedZPolicy(pol, z)
        else:
            runner = pol
        env_seed = child_seed(self.seed, f"env:{epoch}:{tid}")
        _, rec = episode_from_scenario(
            self.scenario, lay, env_seed, runner, arng, mean=False,
            collect=True, graph=self.graph, grid=self.grid)
        for tr in rec.central:
            self._central_agent().replay.add(tr)
        if hasattr(pol, "areas"):
            if self.kind == "gat_pearl":
                store = self._store(tid)
                for j, ag in enumerate(pol.areas):
                    rep, ctx = store[j]
                    for tr in rec.areas[j]:
                        rep.add(tr)
                        ctx.add(ag.context_row(tr[0], tr[1], tr[2],
                                               tr[3]))
            else:
                for j, ag in enumerate(pol.areas):
                    for tr in rec.areas[j]:
                        ag.replay.add(tr)
        return episode_reward(rec)

    def _update_iteration(self, train_ids, it, rng, epoch):
        pol = self.policy
        t, net = self.scenario.train, self.scenario.nets
        rows = []
        if self.kind == "gat_pearl":
            for j, ag in enumerate(pol.areas):
                slices = [(tid,) + tuple(self._store(tid)[j])
                          for tid in train_ids]
                out = meta_update_area(ag, slices, self.graph.neighbors,
                                       t, net, rng, self.opts[f"area{j}"],
                                       epoch)
                for row in out:
                    row.update({"agent": ag.name, "iter": it})
                    rows.append(row)
            central_update(self._central_agent(), t, rng,
                           self.opts["central"])
        elif self.kind == "hier_sac":
            for j, ag in enumerate(pol.areas):
                out = area_sac_update(ag, np.zeros(ag.latent),
                                      self.graph.neighbors, t, rng,
                                      self.opts[f"area{j}"])
                if out is not None:
                    rows.append({"agent": ag.name, "iter": it, **out})
            central_update(self._central_agent(), t, rng,
                           self.opts["central"])
        else:
            out = central_update(self._central_agent(), t, rng,
                                 self.opts["central"])
            if out is not None:
                rows.append({"agent": "central", "iter": it, **out})
        return rows

    def run_epoch(self):
        e = self.epoch
        t = self.scenario.train
        rng = default_rng(child_seed(self.seed, f"epoch:{e}"))
        t0 = time.perf_counter()
        k_tr = min(t.train_tasks_per_epoch, len(self.split.train))
        k_va = min(t.val_tasks_per_epoch, len(self.split.validation))
        train_ids = [int(x) for x in rng.choice(self.split.train,
                                                size=k_tr, replace=False)]
        val_ids = [int(x) for x in rng.choice(self.split.validation,
                                              size=k_va, replace=False)]
        for tid in train_ids:
            self._collect(tid, e, rng)
        rows = []
        for it in range(t.meta_iters):
            rows.extend(self._update_iteration(train_ids, it, rng, e))
        val = meta_validate(self.policy, self.scenario, self.layouts,
                            val_ids, child_seed(self.seed, "validation"),
                            graph=self.graph, grid=self.grid)
        summary = {"epoch": e, "val_reward": val,
                   "wall_s": time.perf_counter() - t0,
                   "tasks": train_ids}
        self.history.append(summary)
        self._write_log(e, rows, summary)
        self.epoch += 1
        return summary

    def run(self, epochs, progress=None):
        for _ in range(epochs):
            summary = self.run_epoch()
            if progress is not None:
                progress(summary)
        return self.history

    def _flat_row(self, epoch, row):
        out = {c: "" for c in _LOG_COLS}
        out["epoch"] = epoch
        out["iter"] = row.get("iter", "")
        out["agent"] = row.get("agent", "")
        out["task"] = row.get("task", "")
        for tag in ("sup_first", "sup_last", "qry"):
            part = row.get(tag)
            if part:
                for name in ("critic", "actor", "alpha"):
                    out[f"{tag}_{name}"] = part.get(name, "")
        if "kl" in row:
            out["kl"] = row["kl"]
        for name in ("critic", "actor", "alpha"):
            if name in row:
                out[f"qry_{name}"] = row[name]
        return out

    def _write_log(self, epoch, rows, summary):
        if self.log_path is None:
            return
        fresh = not os.path.exists(self.log_path)
        with open(self.log_path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_LOG_COLS)
            if fresh:
                writer.writeheader()
            for row in rows:
                writer.writerow(self._flat_row(epoch, row))
            tail = {c: "" for c in _LOG_COLS}
            tail.update({"epoch": epoch,
                         "val_reward": summary["val_reward"],
                         "wall_s": summary["wall_s"]})
            writer.writerow(tail)
