"""Command line front end.

Subcommands: simulate, meta-train, few-shot, evaluate, sweep, compare.
Every run is reproducible from (scenario, seed); learned policies load
from checkpoint containers written by meta-train. Exit codes: 0 ok,
1 user error (bad arguments, files, or configuration), 2 internal
error.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor

from numpy.random import default_rng

from .codec import CodecError
from .config import ScenarioError, load_scenario
from .demand import DemandError
from .hexgrid import GraphError
from .meta import MetaError, MetaTrainer, TRAINABLE_KINDS, few_shot_adapt
from .nets import NetError
from .results import (
    SWEEP_AXES,
    ResultError,
    ResultRow,
    apply_axis,
    compare_policies,
    evaluate_policy,
    format_comparison,
    read_result_rows,
    run_greedy,
    scenario_layout,
    write_result_rows,
)
from .rollout import (
    CheckpointError,
    episode_from_scenario,
    load_policy,
    make_policy,
    restore_opts,
    save_policy,
)
from .seeding import child_seed
from .tasks import enumerate_layouts, split_tasks
from .world import write_trace

CLI_POLICIES = ("greedy", "central_sac", "hier_sac", "hier_sac_fewshot",
                "gat_pearl")

# hier_sac_fewshot is the transfer protocol around a hier_sac container
_STORED_KIND = {"hier_sac_fewshot": "hier_sac"}

USER_ERRORS = (ScenarioError, GraphError, NetError, CodecError,
               DemandError, MetaError, ResultError, CheckpointError,
               FileNotFoundError, IsADirectoryError, NotADirectoryError)

FEW_SHOT_COLS = ("episode", "reward", "realized", "area_steps",
                 "central_steps", "wall_s")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed_list(raw: str):
    try:
        return [int(part) for part in raw.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"seeds must be comma-separated integers, got {raw!r}")


def _workers() -> int:
    raw = os.environ.get("EVFLEET_WORKERS", "1")
    try:
        count = int(raw)
    except ValueError:
        raise UsageError(f"EVFLEET_WORKERS must be an integer, got {raw!r}")
    if count < 1:
        raise UsageError(f"EVFLEET_WORKERS must be >= 1, got {count}")
    return count


def _out_path(args, filename: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, filename)


def _pick_layout(scenario, graph, task):
    if task is None:
        return scenario_layout(scenario, graph)
    layouts = enumerate_layouts(graph, scenario.n_stations, scenario.piles)
    if not 0 <= task < len(layouts):
        raise UsageError(
            f"task {task} out of range; this scenario has "
            f"{len(layouts)} layouts (0..{len(layouts) - 1})")
    return layouts[task]


def _need_checkpoint(args):
    if not args.checkpoint:
        raise UsageError(
            f"policy {args.policy!r} needs --checkpoint; train one with "
            f"'evfleet meta-train --scenario {args.scenario} "
            f"--policy {_STORED_KIND.get(args.policy, args.policy)}'")
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    return args.checkpoint


def _load_for(args, scenario, graph):
    path = _need_checkpoint(args)
    expect = _STORED_KIND.get(args.policy, args.policy)
    return load_policy(path, scenario, graph=graph, expect=expect)


def _adapt_episodes(args) -> int:
    if args.adapt_episodes is not None:
        return args.adapt_episodes
    return 10 if args.policy == "hier_sac_fewshot" else 0


# ------------------------------------------------------------ subcommands


def cmd_simulate(args):
    scenario = load_scenario(args.scenario)
    graph = scenario.build_graph()
    grid = scenario.build_grid()
    layout = _pick_layout(scenario, graph, args.task)
    if args.policy == "greedy":
        policy = make_policy("greedy", scenario, graph, default_rng(0))
    else:
        policy, _ = _load_for(args, scenario, graph)
    rng = default_rng(child_seed(args.seed, "policy"))
    world, rec = episode_from_scenario(
        scenario, layout, args.seed, policy, rng, mean=True,
        collect=False, graph=graph, grid=grid)
    if args.trace:
        parent = os.path.dirname(args.trace)
        if parent:
            os.makedirs(parent, exist_ok=True)
        write_trace(world, args.trace)
        print(f"trace written to {args.trace}")
    m = rec.metrics
    path = _out_path(args, "simulate.csv")
    write_result_rows(path, [ResultRow.from_metrics(
        "simulate", args.policy, layout.id, args.seed, 0, m, 0.0)])
    print(f"reward={m.cumulative_reward:.3f} "
          f"fulfillment={m.fulfillment:.3f} "
          f"charge_wait={m.mean_charge_wait:.3f} "
          f"overhead={m.overhead_ratio:.3f}")
    print(f"wrote 1 row to {path}")


def cmd_meta_train(args):
    scenario = load_scenario(args.scenario)
    graph = scenario.build_graph()
    layouts = enumerate_layouts(graph, scenario.n_stations, scenario.piles)
    split = split_tasks(layouts, args.seed)
    log_path = _out_path(args, "train_log.csv")
    policy = None
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        policy, _ = load_policy(args.checkpoint, scenario, graph=graph,
                                expect=args.policy)
    trainer = MetaTrainer(scenario, split, layouts, args.seed,
                          kind=args.policy, policy=policy,
                          log_path=log_path)
    if args.checkpoint:
        restore_opts(args.checkpoint, trainer.opts)
    print(f"{args.policy}: {len(split.train)} train / "
          f"{len(split.validation)} validation / {len(split.test)} test "
          f"tasks")

    def progress(summary):
        print(f"epoch {summary['epoch']}: "
              f"val_reward={summary['val_reward']:.3f} "
              f"wall={summary['wall_s']:.1f}s")

    trainer.run(args.epochs, progress=progress)
    ckpt = _out_path(args, f"{args.policy}.ckpt")
    save_policy(ckpt, trainer.policy, opts=trainer.opts, extra={
        "train_tasks": [int(t) for t in split.train],
        "val_tasks": [int(t) for t in split.validation],
        "test_tasks": [int(t) for t in split.test],
        "epochs": trainer.epoch,
        "seed": args.seed,
    })
    print(f"checkpoint written to {ckpt}")
    print(f"training log written to {log_path}")


def cmd_few_shot(args):
    scenario = load_scenario(args.scenario)
    graph = scenario.build_graph()
    grid = scenario.build_grid()
    policy, meta = _load_for(args, scenario, graph)
    if not hasattr(policy, "areas"):
        raise UsageError(
            f"policy {args.policy!r} has no few-shot protocol; use "
            f"gat_pearl or hier_sac_fewshot")
    layout = _pick_layout(scenario, graph, args.task)
    trained_on = meta.get("train_tasks", [])
    if layout.id in trained_on:
        raise UsageError(
            f"task {layout.id} was in the training split of "
            f"{args.checkpoint}; few-shot targets unseen tasks "
            f"(held out: {sorted(set(meta.get('test_tasks', [])))})")
    counts, history = few_shot_adapt(policy, scenario, layout, args.seed,
                                     args.episodes, graph=graph, grid=grid)
    curve = _out_path(args, "few_shot_curve.csv")
    with open(curve, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FEW_SHOT_COLS)
        for row in history:
            writer.writerow([row[c] for c in FEW_SHOT_COLS])
    ckpt = _out_path(args, "adapted.ckpt")
    save_policy(ckpt, policy, extra={"adapted_task": int(layout.id),
                                     "source": args.checkpoint})
    last = history[-1]["reward"] if history else 0.0
    print(f"adapted on task {layout.id}: {counts['area']} area steps, "
          f"{counts['central']} central steps, last reward {last:.3f}")
    print(f"curve written to {curve}")
    print(f"adapted checkpoint written to {ckpt}")


def cmd_evaluate(args):
    scenario = load_scenario(args.scenario)
    graph = scenario.build_graph()
    grid = scenario.build_grid()
    layout = _pick_layout(scenario, graph, args.task)
    adapt = _adapt_episodes(args)
    rows = []
    for seed in args.seeds:
        if args.policy == "greedy":
            policy = make_policy("greedy", scenario, graph, default_rng(0))
        else:
            policy, _ = _load_for(args, scenario, graph)
        if adapt > 0:
            if not hasattr(policy, "areas"):
                raise UsageError(
                    f"policy {args.policy!r} cannot few-shot adapt")
            few_shot_adapt(policy, scenario, layout,
                           child_seed(seed, "adapt"), adapt, graph=graph,
                           grid=grid)
        rows.extend(evaluate_policy(
            policy, scenario, layout, seed, args.episodes,
            run_id=args.run_id, name=args.policy, graph=graph, grid=grid))
    path = _out_path(args, "evaluate.csv")
    write_result_rows(path, rows)
    print(f"wrote {len(rows)} rows to {path}")


def _sweep_cell(payload):
    (scenario_path, axis, value, seed, policy_name, checkpoint, adapt,
     episodes) = payload
    scenario = apply_axis(load_scenario(scenario_path), axis, value)
    graph = scenario.build_graph()
    grid = scenario.build_grid()
    layout = scenario_layout(scenario, graph)
    run_id = f"{axis}={value}"
    if policy_name == "greedy":
        return run_greedy(scenario, seed, layout=layout, run_id=run_id,
                          graph=graph, grid=grid)
    expect = _STORED_KIND.get(policy_name, policy_name)
    policy, _ = load_policy(checkpoint, scenario, graph=graph,
                            expect=expect)
    if adapt > 0 and hasattr(policy, "areas"):
        few_shot_adapt(policy, scenario, layout, child_seed(seed, "adapt"),
                       adapt, graph=graph, grid=grid)
    return evaluate_policy(policy, scenario, layout, seed, episodes,
                           run_id=run_id, name=policy_name, graph=graph,
                           grid=grid)


def cmd_sweep(args):
    load_scenario(args.scenario)  # fail early on scenario problems
    if args.policy != "greedy":
        _need_checkpoint(args)
    if args.adapt_episodes is not None:
        adapt = args.adapt_episodes
    elif args.policy in ("greedy", "central_sac"):
        adapt = 0
    else:
        adapt = 10
    values = SWEEP_AXES[args.axis]
    cells = [
        (args.scenario, args.axis, value, seed, args.policy,
         args.checkpoint, adapt, args.episodes)
        for value in values for seed in args.seeds
    ]
    workers = _workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_sweep_cell, cells))
    else:
        batches = [_sweep_cell(cell) for cell in cells]
    # map() preserves submission order, so the file is grid-ordered
    # for any worker count
    rows = [row for batch in batches for row in batch]
    path = _out_path(args, f"sweep_{args.axis}.csv")
    write_result_rows(path, rows)
    print(f"swept {args.axis} over {values} x seeds {args.seeds} "
          f"({workers} worker{'s' if workers > 1 else ''})")
    print(f"wrote {len(rows)} rows to {path}")


def cmd_compare(args):
    rows = []
    for path in args.results:
        rows.extend(read_result_rows(path))
    summary = compare_policies(rows, window=args.window)
    print(format_comparison(summary))


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evfleet",
                     description="EV fleet simulator and dispatch agents")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=False):
        p.add_argument("--scenario", required=True,
                       help="scenario INI file")
        p.add_argument("--out", default=".",
                       help="output directory (default: current)")
        if seeds:
            p.add_argument("--seeds", type=_seed_list, default=[0],
                           help="comma-separated seeds (default: 0)")
        else:
            p.add_argument("--seed", type=int, default=0)

    sim = sub.add_parser("simulate",
                         help="run one episode and export its trace")
    common(sim)
    sim.add_argument("--policy", choices=CLI_POLICIES, default="greedy")
    sim.add_argument("--checkpoint", help="policy container to load")
    sim.add_argument("--task", type=int,
                     help="layout id from the enumeration "
                          "(default: evenly spread stations)")
    sim.add_argument("--trace", help="write the event trace here")
    sim.set_defaults(func=cmd_simulate)

    train = sub.add_parser("meta-train",
                           help="train a policy across the task family")
    common(train)
    train.add_argument("--policy", choices=TRAINABLE_KINDS,
                       default="gat_pearl")
    train.add_argument("--epochs", type=int, default=10)
    train.add_argument("--checkpoint",
                       help="resume from this container")
    train.set_defaults(func=cmd_meta_train)

    few = sub.add_parser("few-shot",
                         help="adapt a trained policy to an unseen task")
    common(few)
    few.add_argument("--policy", choices=("gat_pearl", "hier_sac_fewshot"),
                     default="gat_pearl")
    few.add_argument("--checkpoint", required=False)
    few.add_argument("--task", type=int, required=True,
                     help="target layout id")
    few.add_argument("--episodes", type=int, default=10,
                     help="adaptation episodes, one per epoch")
    few.set_defaults(func=cmd_few_shot)

    ev = sub.add_parser("evaluate",
                        help="frozen evaluation over seeds and episodes")
    common(ev, seeds=True)
    ev.add_argument("--policy", choices=CLI_POLICIES, default="greedy")
    ev.add_argument("--checkpoint")
    ev.add_argument("--task", type=int)
    ev.add_argument("--episodes", type=int, default=1)
    ev.add_argument("--adapt-episodes", type=int,
                    help="few-shot episodes before evaluating "
                         "(default: 10 for hier_sac_fewshot, else 0)")
    ev.add_argument("--run-id", default="eval")
    ev.set_defaults(func=cmd_evaluate)

    sw = sub.add_parser("sweep",
                        help="sensitivity sweep along one axis")
    common(sw, seeds=True)
    sw.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    sw.add_argument("--policy", choices=CLI_POLICIES, default="greedy")
    sw.add_argument("--checkpoint")
    sw.add_argument("--episodes", type=int, default=1)
    sw.add_argument("--adapt-episodes", type=int,
                    help="few-shot episodes per cell for learned "
                         "policies (default: 10)")
    sw.set_defaults(func=cmd_sweep)

    cmp_ = sub.add_parser("compare",
                          help="summarize result files against each other")
    cmp_.add_argument("results", nargs="+",
                      help="two or more result CSV files")
    cmp_.add_argument("--window", type=int, default=10,
                      help="moving-average window for the reward curve")
    cmp_.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
