"""Command line entry point: gen-pool, train, search, bench, inspect.

Exit codes: 0 ok, 1 synthesis failed, 2 usage, 3 unreadable input/output,
4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, seeding
from .machine import MachineState, SpaceConfig, format_program
from .mcts import HeuristicValue, NetPolicy, NetValue, SearchConfig, synthesize
from .nn.checkpoint import MAGIC, CheckpointError, load_params, read_header, save_params
from .nn.nets import PolicyNet
from .taskgen import (
    POOL_FORMAT,
    PilotConfig,
    TaskGenError,
    build_pool,
    load_pool,
    read_records,
    save_pool,
    task_from_record,
)
from .trainer import ConfigError, load_config, pretrain_imitation, run_training

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_MISSING = 0, 1, 2, 3, 4
BASELINE_NAMES = {
    "imitation": "Imitation",
    "reinforce": "Reinforce",
    "mctsprior": "MctsPrior",
    "mcts-prior": "MctsPrior",
    "autoassemblet": "AutoAssemblet",
}

log = logging.getLogger("autoasm")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _seed(args) -> int:
    seed = seeding.seed_from_env(args.seed)
    if seed is None:
        raise CliError(f"--seed is required (or set {seeding.SEED_ENV})", EXIT_USAGE)
    return seed


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", EXIT_MISSING)
    return p


def _load_net(path, kind: str):
    p = _existing(path, f"{kind} checkpoint")
    try:
        return load_params(p, kind=kind)
    except (OSError, CheckpointError) as exc:
        raise CliError(str(exc), EXIT_IO) from exc


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_IO) from exc
    return out


# --- commands ---------------------------------------------------------------------

def cmd_gen_pool(args) -> int:
    config = PilotConfig(program_length=args.lines, num_registers=args.regs, ram_enabled=args.ram,
                         pairs_per_task=args.pairs)
    seed = _seed(args)
    pool, dropped = build_pool(args.n, config, seeding.derive_rng(seed, seeding.POOL), w_max=args.w_max)
    try:
        save_pool(pool, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    print(f"wrote {len(pool)} tasks to {args.out} ({dropped} duplicates dropped)")
    return EXIT_OK


def _parse_temperatures(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad temperature list {text!r}") from exc


def cmd_train(args) -> int:
    seed = _seed(args)
    pool_path = _existing(args.pool, "pool file")
    try:
        config = load_config(args.config, seed=seed, epochs=args.epochs, temperatures=args.temperatures,
                             pretrain_epochs=args.pretrain_epochs, deterministic=True if args.deterministic else None)
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {exc.filename}", EXIT_MISSING) from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_IO) from exc
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    try:
        pool = load_pool(pool_path)
    except (OSError, TaskGenError) as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    out = _out_dir(args.out)
    net_cfg = config.net_config(pool)
    policy = PolicyNet.init(net_cfg, seeding.derive_rng(seed, seeding.INIT_POLICY))
    t0 = time.perf_counter()
    rep = pretrain_imitation(policy, pool, config)
    save_params(policy, out / "imitation.ckpt")
    summary = {"train_loss": rep.train_loss, "holdout_loss": rep.holdout_loss, "n_train": rep.n_train,
               "n_holdout": rep.n_holdout, "holdout_exact": rep.holdout.exact,
               "holdout_effect": rep.holdout.effect, "holdout_consistent": rep.holdout.consistent,
               "wall_s": time.perf_counter() - t0}
    (out / "pretrain.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"imitation: hold-out next-line accuracy {rep.holdout.consistent:.3f} "
          f"(exact {rep.holdout.exact:.3f}) -> {out / 'imitation.ckpt'}")
    if args.pretrain_only:
        return EXIT_OK
    learner = run_training(config, pool, out, policy=policy)
    print(f"trained {learner.epoch} epochs -> {out / 'policy.ckpt'}, {out / 'value.ckpt'}")
    return EXIT_OK


def _parse_state(text: str, space: SpaceConfig) -> MachineState:
    try:
        cells = [int(x) for x in text.split(",")]
    except ValueError as exc:
        raise CliError(f"state {text!r} is not a comma-separated list of integers", EXIT_USAGE) from exc
    if len(cells) != space.cells:
        raise CliError(f"state {text!r} has {len(cells)} values, expected {space.cells} "
                       f"({space.num_registers} registers{' + 4 RAM slots' if space.ram else ''})", EXIT_USAGE)
    return MachineState.from_cells(cells, space.num_registers, space.ram)


def _task_from_file(path, index: int, space: SpaceConfig):
    p = _existing(path, "task file")
    try:
        with open(p, encoding="utf-8") as fh:
            fmt = json.loads(fh.readline()).get("format")
        _, records = read_records(p, fmt if fmt in (POOL_FORMAT, bench.SUITE_FORMAT) else POOL_FORMAT)
        return task_from_record(records[index], space)
    except IndexError as exc:
        raise CliError(f"{p} has no task #{index}", EXIT_USAGE) from exc
    except (OSError, ValueError, KeyError, AttributeError, TaskGenError) as exc:
        raise CliError(f"cannot read tasks from {p}: {exc}", EXIT_IO) from exc


def cmd_search(args) -> int:
    policy = _load_net(args.policy, "policy")
    space = policy.config.space
    if args.ram != space.ram:
        raise CliError(f"--ram {'set' if args.ram else 'unset'} but the policy was trained "
                       f"{'with' if space.ram else 'without'} RAM", EXIT_USAGE)
    if args.task_file:
        task = _task_from_file(args.task_file, args.task_index, space)
        inputs, outputs = task.inputs, task.outputs
    else:
        if not args.input or len(args.input) != len(args.output or []):
            raise CliError("give --task-file or matching --input/--output pairs", EXIT_USAGE)
        inputs = tuple(_parse_state(s, space) for s in args.input)
        outputs = tuple(_parse_state(s, space) for s in args.output)
    if len(inputs) != policy.config.pairs:
        raise CliError(f"the policy expects {policy.config.pairs} pairs, got {len(inputs)}", EXIT_USAGE)
    value = NetValue(_load_net(args.value, "value")) if args.value else HeuristicValue()
    seed = seeding.seed_from_env(args.seed) or 0
    cfg = SearchConfig(epsilon=args.epsilon, max_depth=args.max_depth, simulations_per_move=args.sims,
                       expansion_width=args.width, seed=seed)
    trace = None
    try:
        if args.trace:
            trace = open(args.trace, "w", encoding="utf-8")
        result = synthesize(inputs, outputs, NetPolicy(policy), value, cfg,
                            rng=seeding.derive_rng(seed, seeding.SEARCH), trace=trace)
    except OSError as exc:
        raise CliError(f"cannot write trace: {exc}", EXIT_IO) from exc
    finally:
        if trace is not None:
            trace.close()
    if result.program:
        print(format_program(result.program))
    print("OK" if result.solved else "FAIL")
    log.info("%d simulator calls, %d simulations", result.simulator_calls, result.simulations)
    return EXIT_OK if result.solved else EXIT_FAIL


def cmd_bench(args) -> int:
    names = [n.strip().lower() for n in args.baselines.split(",") if n.strip()]
    unknown = [n for n in names if n not in BASELINE_NAMES]
    if unknown or not names:
        raise CliError(f"unknown baseline(s): {', '.join(unknown) or '(none)'}; "
                       f"choose from {', '.join(sorted(set(BASELINE_NAMES)))}", EXIT_USAGE)
    kinds = list(dict.fromkeys(BASELINE_NAMES[n] for n in names))
    seed = _seed(args)
    policy = _load_net(args.policy, "policy") if args.policy else None
    imitation = _load_net(args.imitation_policy, "policy") if args.imitation_policy else policy
    value = _load_net(args.value, "value") if args.value else None
    nets = bench.Nets(imitation=imitation, policy=policy, value=value)
    try:
        suites = bench.load_suite(args.suite) if args.suite else bench.load_suite()
    except FileNotFoundError as exc:
        raise CliError(f"suite file not found: {exc.filename}", EXIT_MISSING) from exc
    except (OSError, TaskGenError, bench.WitnessError) as exc:
        raise CliError(f"cannot read suite: {exc}", EXIT_IO) from exc
    if args.limit:
        suites = {c: v[:args.limit] for c, v in suites.items()}
    tasks = bench.flatten(suites)
    out = _out_dir(args.out)
    search = SearchConfig(epsilon=args.epsilon, max_depth=args.max_depth, simulations_per_move=args.sims,
                          expansion_width=args.width)
    if args.jobs > 1:
        log.info("--jobs %d requested; tasks run sequentially in this build", args.jobs)
    outcomes, budgets = [], {}
    for kind in kinds:
        budget = args.samples if kind in ("Imitation", "Reinforce") else args.sims
        budgets[kind] = budget
        t0 = time.perf_counter()
        try:
            outcomes += bench.run_baseline(kind, nets, tasks, budget, search, seed)
        except bench.MissingCheckpoint as exc:
            raise CliError(str(exc), EXIT_MISSING) from exc
        log.info("%s done in %.1fs", kind, time.perf_counter() - t0)
    rows = bench.report(outcomes, budgets)
    try:
        (out / "report.csv").write_text(bench.report_csv(rows))
        (out / "report.txt").write_text(bench.report_text(rows))
        with open(out / "outcomes.jsonl", "w", encoding="utf-8") as fh:
            for o in outcomes:
                fh.write(json.dumps(o.__dict__) + "\n")
    except OSError as exc:
        raise CliError(f"cannot write reports: {exc}", EXIT_IO) from exc
    print(bench.report_text(rows), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(len(MAGIC))
        if head == MAGIC:
            header, payload = read_header(path)
            for key in ("kind", "d_emb", "hidden", "K", "cells", "vocab", "num_registers", "ram", "layers",
                        "d_dec", "version"):
                print(f"{key}: {header.get(key)}")
            print(f"parameters: {len(payload) // 8}")
            return EXIT_OK
        pool = load_pool(path)
    except (OSError, CheckpointError, TaskGenError, UnicodeDecodeError) as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc
    cfg = pool.config
    print(f"tasks: {len(pool)}")
    print(f"pairs per task: {cfg.pairs_per_task}, registers: {cfg.num_registers}, ram: {cfg.ram_enabled}, "
          f"program length: {cfg.program_length}")
    counts, edges = np.histogram(pool.weights, bins=np.arange(-pool.w_max, pool.w_max + 2) - 0.5)
    print("weight histogram:")
    for c, lo in zip(counts, edges):
        if c:
            print(f"  {lo + 0.5:+5.0f}  {c}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------

def _search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sims", type=int, default=200, help="simulations per committed line")
    p.add_argument("--width", type=int, default=8, help="children expanded per node")
    p.add_argument("--epsilon", type=float, default=1.0, help="UCT exploration weight")
    p.add_argument("--max-depth", type=int, default=12)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autoasm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-pool", help="generate a task pool from random pilot programs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--lines", type=int, default=3)
    p.add_argument("--regs", type=int, default=4, choices=range(1, 5), metavar="{1..4}")
    p.add_argument("--ram", action="store_true")
    p.add_argument("--pairs", type=int, default=2)
    p.add_argument("--w-max", type=float, default=10.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_pool)

    p = sub.add_parser("train", help="imitation pretraining followed by policy/value training")
    p.add_argument("--pool", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--temperatures", type=_parse_temperatures)
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--pretrain-only", action="store_true")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="synthesize a program for one task")
    p.add_argument("--policy", required=True)
    p.add_argument("--value", help="value checkpoint; the L2 heuristic is used without one")
    p.add_argument("--task-file")
    p.add_argument("--task-index", type=int, default=0)
    p.add_argument("--input", action="append", help="comma-separated registers (then RAM)")
    p.add_argument("--output", action="append")
    p.add_argument("--ram", action="store_true")
    p.add_argument("--trace", help="write the top of the search tree as JSON lines")
    p.add_argument("--seed", type=int)
    _search_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("bench", help="run baselines on the easy/medium/hard suites")
    p.add_argument("--baselines", default="imitation,reinforce,mctsprior,autoassemblet")
    p.add_argument("--policy")
    p.add_argument("--imitation-policy")
    p.add_argument("--value")
    p.add_argument("--suite", help="suite file (the bundled reconstruction by default)")
    p.add_argument("--limit", type=int, help="first N tasks of each category")
    p.add_argument("--samples", type=int, default=64, help="programs sampled by the decoding baselines")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=".")
    _search_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="summarize a pool or checkpoint file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"autoasm: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, ConfigError) as exc:
        print(f"autoasm: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
