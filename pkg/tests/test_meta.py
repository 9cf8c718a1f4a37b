"""Inner-loop adaptation, unrolled meta gradients, few-shot updates.

The quadratic cases pin the unrolled-descent machinery against the
closed form in oracles/meta_oracle.py; the frozen literals below were
produced by that oracle and must not drift. The agent-level tests run
on deliberately tiny networks.
"""
import logging
import math

import numpy as np
import pytest
import torch
from numpy.random import default_rng

import evfleet.meta as meta
from evfleet.agents import AreaAgent, CentralAgent, NODE_FEATURES, Replay
from evfleet.config import NetConfig, Scenario, TrainConfig
from evfleet.context import posterior_from_context, sample_z
from evfleet.meta import (
    Adam,
    FixedZPolicy,
    MetaError,
    MetaTrainer,
    adapt_area_task,
    area_sac_update,
    central_update,
    clip_grads,
    few_shot_adapt,
    grouped_gd_step,
    inner_gd,
    meta_update_area,
    meta_validate,
    state_hash,
    support_query_split,
)
from evfleet.nets import flat_values
from evfleet.rollout import make_policy
from evfleet.tasks import ChargingLayout, enumerate_layouts, split_tasks
from oracles.meta_oracle import descend, meta_gradient

SMALL = NetConfig(gat_dim=3, gat_heads=2, gat_out=4, temporal_dim=2,
                  latent_dim=3, context_batch=4, area_hidden=8,
                  area_layers=1, encoder_hidden=8, encoder_layers=1,
                  central_actor_hidden=8, central_actor_layers=1,
                  central_critic_hidden=8, central_critic_layers=1)

TINY = TrainConfig(inner_steps=2, area_batch=2, central_batch=2,
                   train_tasks_per_epoch=2, val_tasks_per_epoch=1,
                   meta_iters=1, buffer_transitions=200,
                   buffer_context=100, fs_steps=2, fs_central_every=2,
                   fs_warmup_episodes=1)

NBRS = ((1,), (0,))


def tiny_area_agent(seed=7):
    return AreaAgent(0, 2, 3, SMALL, default_rng(seed))


def fake_area_items(rng, count, n=2, periods=3, act_dim=12):
    items = []
    for _ in range(count):
        items.append((
            rng.normal(size=(n, NODE_FEATURES)),
            int(rng.integers(0, periods)),
            rng.uniform(-0.9, 0.9, size=act_dim),
            float(rng.normal()),
            rng.normal(size=(n, NODE_FEATURES)),
            int(rng.integers(0, periods)),
            float(rng.integers(0, 2)),
        ))
    return items


def fake_context_rows(rng, count, dim):
    return [rng.normal(size=dim) for _ in range(count)]


def area_steps_data(agent, rng, steps, batch=2):
    pool = fake_area_items(rng, 8, n=agent.n, act_dim=agent.act_dim)
    out = []
    for _ in range(steps):
        idx = rng.integers(0, len(pool), size=batch)
        out.append((meta.stack_area_batch([pool[i] for i in idx]),
                    {"next": rng.standard_normal((batch, agent.act_dim)),
                     "cur": rng.standard_normal((batch, agent.act_dim))}))
    return out


def toy_scenario():
    sc = Scenario(region_count=3, layout_descriptor="preset:line",
                  periods=3, intervals_per_period=4, fleet_size=6,
                  base_rate=2.0, peak_rate=2.0, n_stations=2, piles=2)
    sc.nets = SMALL
    sc.train = TINY
    return sc


def trainer_scenario():
    sc = Scenario(region_count=5, periods=2, intervals_per_period=3,
                  fleet_size=5, base_rate=1.5, peak_rate=1.5,
                  n_stations=2, piles=2)
    sc.nets = SMALL
    sc.train = TINY
    return sc


# ------------------------------------------------- unrolled descent


@pytest.mark.parametrize("steps,w_frozen,g_frozen", [
    (1, 1.137, 3.349302000000001),
    (2, 1.07841, 3.003366979800001),
])
def test_quadratic_meta_gradient(steps, w_frozen, g_frozen):
    a, b, c, d, eta, w0v = 0.7, 0.3, 1.1, -0.5, 0.05, 1.2
    w0 = torch.tensor(w0v, dtype=torch.float64, requires_grad=True)
    fast, trace = inner_gd(lambda p, k: a * (p["w"] - b) ** 2,
                           {"w": w0}, eta, steps)
    outer = c * (fast["w"] - d) ** 2
    (g,) = torch.autograd.grad(outer, [w0])
    assert math.isclose(fast["w"].item(), w_frozen, abs_tol=1e-12)
    assert math.isclose(g.item(), g_frozen, abs_tol=1e-12)
    assert math.isclose(descend(a, b, eta, w0v, steps), w_frozen,
                        abs_tol=1e-12)
    assert math.isclose(meta_gradient(a, b, c, d, eta, w0v, steps),
                        g_frozen, abs_tol=1e-12)
    assert len(trace) == steps


def test_inner_gd_nonfinite_names_the_step():
    w0 = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)

    def fn(p, k):
        if k == 1:
            return p["w"] * float("inf")
        return (p["w"] - 1.0) ** 2

    with pytest.raises(MetaError, match="step 1"):
        inner_gd(fn, {"w": w0}, 0.1, 3)


def test_grouped_step_is_simultaneous():
    x = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
    y = torch.tensor(5.0, dtype=torch.float64, requires_grad=True)
    losses = {"gx": x * y, "gy": 0.5 * (y - 1.0) ** 2}
    new = grouped_gd_step(losses, {"gx": ["x"], "gy": ["y"]},
                          {"x": x, "y": y}, {"gx": 0.1, "gy": 0.1})
    # x's gradient must see the pre-update y
    assert math.isclose(new["x"].item(), 2.0 - 0.1 * 5.0, abs_tol=1e-12)
    assert math.isclose(new["y"].item(), 5.0 - 0.1 * 4.0, abs_tol=1e-12)


def test_clip_grads():
    big = (torch.tensor([3.0], dtype=torch.float64),
           torch.tensor([4.0], dtype=torch.float64), None)
    out = clip_grads(big, 1.0)
    norm = math.sqrt(sum(float((g ** 2).sum())
                         for g in out if g is not None))
    assert math.isclose(norm, 1.0, abs_tol=1e-12)
    assert out[2] is None
    small = (torch.tensor([0.3], dtype=torch.float64),)
    assert clip_grads(small, 1.0) is small


def test_all_finite_flags_bad_grads():
    good = {"g": {"k": torch.tensor([1.0]), "m": None}}
    bad = {"g": {"k": torch.tensor([float("nan")])}}
    assert meta._all_finite(good)
    assert not meta._all_finite(bad)


def test_adam_matches_torch():
    target = torch.tensor([0.5, -1.0], dtype=torch.float64)
    mine = {"p": torch.tensor([1.5, -2.0], dtype=torch.float64,
                              requires_grad=True)}
    ref = torch.tensor([1.5, -2.0], dtype=torch.float64,
                       requires_grad=True)
    opt_ref = torch.optim.Adam([ref], lr=0.01)
    opt = Adam(0.01)
    for _ in range(6):
        opt.step(mine, {"p": 2.0 * (mine["p"].detach() - target)})
        opt_ref.zero_grad()
        ((ref - target) ** 2).sum().backward()
        opt_ref.step()
    assert torch.allclose(mine["p"].detach(), ref.detach(), atol=1e-12)


def test_support_query_split():
    rng = default_rng(0)
    sup, qry, overlapped = support_query_split(rng, 10, 3)
    assert not overlapped
    assert len(qry) == 3 and len(sup) == 7
    assert not set(sup.tolist()) & set(qry.tolist())
    assert set(sup.tolist()) | set(qry.tolist()) == set(range(10))
    sup2, qry2, overlapped2 = support_query_split(rng, 4, 3)
    assert overlapped2
    assert set(sup2.tolist()) == set(range(4)) and len(qry2) == 3


# ------------------------------------------------- agent adaptation


def test_adapt_moves_fast_leaves_slow():
    agent = tiny_area_agent()
    rng = default_rng(1)
    before = flat_values(agent.params).copy()
    fast, logs = adapt_area_task(agent, area_steps_data(agent, rng, 2),
                                 np.zeros(3), NBRS, TINY)
    assert np.array_equal(flat_values(agent.params), before)
    assert not torch.equal(fast["area0.pi.w0"],
                           agent.params["area0.pi.w0"])
    assert not torch.equal(fast["area0.q1.w0"],
                           agent.params["area0.q1.w0"])
    assert fast["area0.pi.w0"].grad_fn is not None
    assert all(not k.startswith("area0.enc") for k in fast)
    assert len(logs) == 2
    assert all(math.isfinite(v) for row in logs for v in row.values())


def test_adapt_rejects_live_latent():
    agent = tiny_area_agent()
    rng = default_rng(2)
    dim = agent.flat_dim + agent.act_dim + 1
    rows = np.stack(fake_context_rows(rng, 4, dim))
    mu, sg = posterior_from_context(agent.params, "area0.enc", rows,
                                    agent.latent, SMALL.sigma_floor)
    z_live = sample_z(mu, sg, rng.standard_normal(agent.latent))
    with pytest.raises(MetaError, match="leaked"):
        adapt_area_task(agent, area_steps_data(agent, rng, 1), z_live,
                        NBRS, TINY)


def test_adapt_nonfinite_batch_raises():
    agent = tiny_area_agent()
    rng = default_rng(3)
    steps = area_steps_data(agent, rng, 1)
    steps[0][0]["r"][:] = float("inf")
    with pytest.raises(MetaError, match="step 0"):
        adapt_area_task(agent, steps, np.zeros(3), NBRS, TINY)


def test_adapt_meta_gradients_reach_slow_weights():
    agent = tiny_area_agent()
    rng = default_rng(4)
    fast, _ = adapt_area_task(agent, area_steps_data(agent, rng, 2),
                              np.zeros(3), NBRS, TINY)
    (qbatch, qnoise), = area_steps_data(agent, rng, 1)
    from evfleet.agents import area_losses
    out = area_losses(fast, agent.targets, fast["log_alpha"], qbatch,
                      qnoise, np.zeros(3), NBRS, 0, gamma=TINY.gamma,
                      target_entropy=agent.target_entropy,
                      prefix="area0")
    (g_pi,) = torch.autograd.grad(out["actor"],
                                  [agent.params["area0.pi.w0"]],
                                  retain_graph=True, allow_unused=True)
    (g_q,) = torch.autograd.grad(out["q1"],
                                 [agent.params["area0.q1.w0"]],
                                 allow_unused=True)
    assert g_pi is not None and float(g_pi.abs().sum()) > 0
    assert g_q is not None and float(g_q.abs().sum()) > 0


def make_slices(agent, seed, tasks=2, transitions=8, ctx_rows=6):
    rng = default_rng(seed)
    dim = agent.flat_dim + agent.act_dim + 1
    slices = []
    for tid in range(tasks):
        rep = Replay(100)
        for it in fake_area_items(rng, transitions, n=agent.n,
                                  act_dim=agent.act_dim):
            rep.add(it)
        ctx = Replay(50)
        for row in fake_context_rows(rng, ctx_rows, dim):
            ctx.add(row)
        slices.append((tid, rep, ctx))
    return slices


def fresh_opts(lr=1e-3):
    return {"actor": Adam(lr), "critic": Adam(lr), "alpha": Adam(lr),
            "enc": Adam(lr)}


def test_meta_update_moves_every_group():
    agent = tiny_area_agent()
    slices = make_slices(agent, seed=5)
    before = {k: v.detach().clone() for k, v in agent.params.items()}
    alpha0 = agent.log_alpha.item()
    targets0 = flat_values(agent.targets).copy()
    rows = meta_update_area(agent, slices, NBRS, TINY, SMALL,
                            default_rng(6), fresh_opts(), epoch=5)
    assert len(rows) == 2
    for row in rows:
        assert set(row) >= {"task", "sup_first", "sup_last", "qry", "kl"}
        assert "skipped" not in row
    for prefix in ("area0.pi", "area0.gat", "area0.temp", "area0.q1",
                   "area0.q2", "area0.enc"):
        moved = any(not torch.equal(v, before[k])
                    for k, v in agent.params.items()
                    if k.startswith(prefix))
        assert moved, prefix
    assert agent.log_alpha.item() != alpha0
    assert not np.array_equal(flat_values(agent.targets), targets0)


def test_meta_update_is_deterministic():
    results = []
    for _ in range(2):
        agent = tiny_area_agent(seed=7)
        slices = make_slices(agent, seed=5)
        meta_update_area(agent, slices, NBRS, TINY, SMALL,
                         default_rng(6), fresh_opts(), epoch=3)
        results.append(np.concatenate([flat_values(agent.params),
                                       [agent.log_alpha.item()]]))
    assert np.array_equal(results[0], results[1])


def test_meta_update_warns_on_small_replay(caplog):
    agent = tiny_area_agent()
    slices = make_slices(agent, seed=8, transitions=3)
    with caplog.at_level(logging.WARNING, logger="evfleet.meta"):
        rows = meta_update_area(agent, slices, NBRS, TINY, SMALL,
                                default_rng(9), fresh_opts(), epoch=0)
    assert len(rows) == 2
    assert any("support/query" in r.message for r in caplog.records)


def test_meta_update_skips_empty_tasks():
    agent = tiny_area_agent()
    empty = [(0, Replay(10), Replay(10))]
    rows = meta_update_area(agent, empty, NBRS, TINY, SMALL,
                            default_rng(1), fresh_opts(), epoch=0)
    assert rows == []


# ------------------------------------------------- plain updates


def central_items(rng, count, state_dim, act_dim, reward=None):
    items = []
    for _ in range(count):
        r = float(rng.normal()) if reward is None else reward
        items.append((rng.normal(size=state_dim),
                      rng.uniform(-0.9, 0.9, size=act_dim), r,
                      rng.normal(size=state_dim),
                      float(rng.integers(0, 2))))
    return items


def test_central_update_moves_and_guards(caplog):
    agent = CentralAgent(2, 7, SMALL, default_rng(11))
    opts = fresh_opts()
    assert central_update(agent, TINY, default_rng(0), opts) is None

    rng = default_rng(12)
    for it in central_items(rng, 6, 7, agent.act_dim):
        agent.replay.add(it)
    before = flat_values(agent.params).copy()
    targets0 = flat_values(agent.targets).copy()
    out = central_update(agent, TINY, default_rng(1), opts)
    assert set(out) == {"actor", "critic", "alpha"}
    assert not np.array_equal(flat_values(agent.params), before)
    assert not np.array_equal(flat_values(agent.targets), targets0)

    poisoned = CentralAgent(2, 7, SMALL, default_rng(11))
    for it in central_items(rng, 4, 7, poisoned.act_dim,
                            reward=float("inf")):
        poisoned.replay.add(it)
    snap = flat_values(poisoned.params).copy()
    with caplog.at_level(logging.WARNING, logger="evfleet.meta"):
        assert central_update(poisoned, TINY, default_rng(2),
                              fresh_opts()) is None
    assert any("non-finite" in r.message for r in caplog.records)
    assert np.array_equal(flat_values(poisoned.params), snap)


def test_area_sac_update_moves():
    agent = tiny_area_agent()
    rng = default_rng(13)
    for it in fake_area_items(rng, 6, n=2, act_dim=agent.act_dim):
        agent.replay.add(it)
    before = flat_values(agent.params).copy()
    out = area_sac_update(agent, np.zeros(3), NBRS, TINY,
                          default_rng(1), fresh_opts())
    assert set(out) == {"actor", "critic", "alpha"}
    assert not np.array_equal(flat_values(agent.params), before)


# ------------------------------------------------- few-shot


def test_few_shot_counts_and_updates():
    sc = toy_scenario()
    graph = sc.build_graph()
    policy = make_policy("gat_pearl", sc, graph, default_rng(11))
    before = state_hash(policy)
    lay = ChargingLayout(0, (1, 0, 1), 2)
    counts, hist = few_shot_adapt(policy, sc, lay, seed=21, episodes=3,
                                  graph=graph, grid=sc.build_grid())
    assert counts == {"area": 4, "central": 2}
    assert counts["central"] == counts["area"] // sc.train.fs_central_every
    assert len(hist) == 3
    assert all(math.isfinite(row["reward"]) for row in hist)
    assert hist[0]["area_steps"] == 0  # warmup episode collects only
    assert state_hash(policy) != before
    assert all(len(ag.context) > 0 for ag in policy.areas)
    assert len(policy.central.replay) > 0


def test_few_shot_is_deterministic():
    runs = []
    for _ in range(2):
        sc = toy_scenario()
        graph = sc.build_graph()
        policy = make_policy("gat_pearl", sc, graph, default_rng(11))
        _, hist = few_shot_adapt(policy, sc, ChargingLayout(0, (1, 0, 1), 2),
                                 seed=21, episodes=3, graph=graph,
                                 grid=sc.build_grid())
        runs.append(([row["reward"] for row in hist],
                     state_hash(policy)))
    assert runs[0] == runs[1]


def test_few_shot_rejects_flat_policy():
    sc = toy_scenario()
    policy = make_policy("greedy", sc, sc.build_graph(), default_rng(0))
    with pytest.raises(MetaError, match="hierarchical"):
        few_shot_adapt(policy, sc, ChargingLayout(0, (1, 0, 1), 2),
                       seed=1, episodes=1)


# ------------------------------------------------- validation


def test_meta_validate_pure_and_repeatable():
    sc = toy_scenario()
    graph = sc.build_graph()
    policy = make_policy("gat_pearl", sc, graph, default_rng(2))
    layouts = {0: ChargingLayout(0, (1, 0, 1), 2),
               1: ChargingLayout(1, (0, 1, 1), 2)}
    h0 = state_hash(policy)
    val = meta_validate(policy, sc, layouts, [0, 1], seed=5, graph=graph,
                        grid=sc.build_grid())
    assert isinstance(val, float) and math.isfinite(val)
    assert state_hash(policy) == h0
    again = meta_validate(policy, sc, layouts, [0, 1], seed=5,
                          graph=graph, grid=sc.build_grid())
    assert again == val


def test_meta_validate_handles_flat_policies():
    sc = toy_scenario()
    graph = sc.build_graph()
    layouts = {0: ChargingLayout(0, (1, 0, 1), 2)}
    greedy = make_policy("greedy", sc, graph, default_rng(0))
    val = meta_validate(greedy, sc, layouts, [0], seed=3, graph=graph,
                        grid=sc.build_grid())
    assert math.isfinite(val)
    flat = make_policy("central_sac", sc, graph, default_rng(1))
    val2 = meta_validate(flat, sc, layouts, [0], seed=3, graph=graph,
                         grid=sc.build_grid())
    assert math.isfinite(val2)


def test_state_hash_sensitivity():
    sc = toy_scenario()
    graph = sc.build_graph()
    policy = make_policy("gat_pearl", sc, graph, default_rng(4))
    h0 = state_hash(policy)
    with torch.no_grad():
        policy.areas[0].params["area0.pi.w0"][0, 0] += 1e-3
    h1 = state_hash(policy)
    assert h1 != h0
    policy.central.replay.add(("x",))
    assert state_hash(policy) != h1


# ------------------------------------------------- trainer


def test_trainer_epoch_full_meta(tmp_path):
    sc = trainer_scenario()
    graph = sc.build_graph()
    layouts = enumerate_layouts(graph, 2, 2)
    split = split_tasks(layouts, seed=4)
    log_path = tmp_path / "train_log.csv"
    tr = MetaTrainer(sc, split, layouts, seed=9, kind="gat_pearl",
                     log_path=str(log_path))
    snap = flat_values(tr.policy.areas[0].params).copy()
    summary = tr.run_epoch()
    assert summary["epoch"] == 0
    assert math.isfinite(summary["val_reward"])
    assert len(summary["tasks"]) == 2
    assert all(t in split.train for t in summary["tasks"])
    assert not np.array_equal(flat_values(tr.policy.areas[0].params),
                              snap)
    assert tr.epoch == 1 and len(tr.history) == 1

    lines = log_path.read_text().strip().splitlines()
    assert lines[0].split(",") == meta._LOG_COLS
    assert len(lines) >= 2  # at least the epoch summary row
    assert lines[-1].split(",")[0] == "0"


@pytest.mark.parametrize("kind", ["hier_sac", "central_sac"])
def test_trainer_epoch_plain(kind):
    sc = trainer_scenario()
    graph = sc.build_graph()
    layouts = enumerate_layouts(graph, 2, 2)
    split = split_tasks(layouts, seed=4)
    tr = MetaTrainer(sc, split, layouts, seed=3, kind=kind)
    if kind == "hier_sac":
        snap = flat_values(tr.policy.areas[0].params).copy()
    else:
        snap = flat_values(tr.policy.agent.params).copy()
    summary = tr.run_epoch()
    assert math.isfinite(summary["val_reward"])
    if kind == "hier_sac":
        assert not np.array_equal(
            flat_values(tr.policy.areas[0].params), snap)
    else:
        assert not np.array_equal(flat_values(tr.policy.agent.params),
                                  snap)


def test_trainer_is_deterministic():
    hashes = []
    for _ in range(2):
        sc = trainer_scenario()
        layouts = enumerate_layouts(sc.build_graph(), 2, 2)
        split = split_tasks(layouts, seed=4)
        tr = MetaTrainer(sc, split, layouts, seed=9, kind="gat_pearl")
        summary = tr.run_epoch()
        hashes.append((state_hash(tr.policy), summary["val_reward"]))
    assert hashes[0] == hashes[1]


def test_trainer_rejects_untrainable_kind():
    with pytest.raises(MetaError, match="greedy"):
        MetaTrainer(trainer_scenario(), None, [], seed=0, kind="greedy")


def test_fixed_z_policy_pins_latent():
    sc = toy_scenario()
    graph = sc.build_graph()
    policy = make_policy("gat_pearl", sc, graph, default_rng(6))
    z = {j: np.full(3, 0.5) for j in range(3)}
    pinned = FixedZPolicy(policy, z)
    pinned.begin_episode(default_rng(0), mean=True)
    assert np.array_equal(pinned.z[1], np.full(3, 0.5))
    assert pinned.emits_central
