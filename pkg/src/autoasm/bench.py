"""Hand-designed benchmark suites, baseline runners and Table-1 style reports.

The 130 tasks are a reconstruction from category descriptions only (easy:
register add/sub/mul, min, max; medium: adding or subtracting constants
above 9; hard: filter, sort, switch). Each template states its target with
plain Python arithmetic, picks inputs for which a straight-line program
exists, and ships that program as a witness checked at build time.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Sequence

import numpy as np

from . import seeding
from .machine import (
    ConfigMismatch,
    MachineState,
    Program,
    SpaceConfig,
    format_program,
    parse_program,
    run,
    step,
)
from .mcts import HeuristicValue, NetPolicy, NetValue, SearchConfig, synthesize
from .nn.nets import PolicyNet, ValueNet
from .nn.vocab import encode_batch, tokens_instruction
from .taskgen import POOL_VERSION, PoolFormatError, Task, read_records, task_from_record, task_record, write_records

SUITE_FORMAT = "autoasm-suite"
SUITE_SPACE = SpaceConfig(4, False)
CATEGORIES = ("Easy", "Medium", "Hard")
SUITE_SIZES = {"Easy": 50, "Medium": 40, "Hard": 40}
BASELINES = ("Imitation", "Reinforce", "MctsPrior", "AutoAssemblet")
REGS = ("%eax", "%ebx", "%ecx", "%edx")
DEFAULT_SEED = 2019


class MissingCheckpoint(RuntimeError):
    pass


class WitnessError(AssertionError):
    pass


@dataclass(frozen=True)
class BenchTask:
    name: str
    category: str
    task: Task
    witness: Program

    @property
    def reference_length(self) -> int:
        return len(self.witness)


# --- suite construction ------------------------------------------------------------

Regs = list  # four ints
Template = Callable[[np.random.Generator], tuple[str, list[Regs], Callable[[Regs], Regs], str]]


def _digits(rng, n=4):
    return [int(x) for x in rng.integers(0, 10, size=n)]


def _two_distinct(rng, k=2):
    return [int(x) for x in rng.choice(4, size=k, replace=False)]


def _binary(opname, asm, fn):
    def make(rng):
        src, dst = _two_distinct(rng)
        ins = [_digits(rng) for _ in range(2)]

        def target(r):
            r = list(r)
            r[dst] = fn(r[dst], r[src])
            return r
        return f"{opname} {REGS[src]} into {REGS[dst]}", ins, target, f"{asm} {REGS[src]}, {REGS[dst]}"
    return make


def _extreme(kind):
    # inputs keep the same register on the winning side in both pairs
    def make(rng):
        a, b, out = [int(x) for x in rng.choice(4, size=3, replace=False)]
        ins = []
        for _ in range(2):
            r = _digits(rng)
            lo, hi = sorted(rng.choice(10, size=2, replace=False).tolist())
            r[a], r[b] = (lo, hi) if kind == "min" else (hi, lo)
            ins.append(r)

        def target(r):
            r = list(r)
            r[out] = min(r[a], r[b]) if kind == "min" else max(r[a], r[b])
            return r
        return f"{kind} of {REGS[a]},{REGS[b]} into {REGS[out]}", ins, target, f"movl {REGS[a]}, {REGS[out]}"
    return make


def _chain(asm, total, reg):
    parts = []
    while total > 0:
        d = min(9, total)
        parts.append(f"{asm} ${d}, {reg}")
        total -= d
    return "\n".join(parts)


def _constant(sign):
    def make(rng):
        c = int(rng.integers(11, 41))
        reg = int(rng.integers(4))
        ins = [_digits(rng) for _ in range(2)]

        def target(r):
            r = list(r)
            r[reg] += sign * c
            return r
        word = "add" if sign > 0 else "subtract"
        return f"{word} {c} {'to' if sign > 0 else 'from'} {REGS[reg]}", ins, target, \
            _chain("addl" if sign > 0 else "subl", c, REGS[reg])
    return make


def _algebra(rng):
    # the printed Algebra pairs; 7 -> 37 and 7 -> 30 rule out a plain "+30"
    ins = [[5, 1, 7, 8], [4, 3, 7, 0]]

    def target(r):
        r = list(r)
        r[2] = r[0] * r[2] + 2
        return r
    return "algebra %ecx = %eax * %ecx + 2", ins, target, "imull %eax, %ecx\naddl $2, %ecx"


def _filter(rng):
    """Zero every register below a threshold; the same registers fall below it in both pairs."""
    t = int(rng.integers(3, 8))
    n_drop = int(rng.integers(1, 4))
    drop = sorted(rng.choice(4, size=n_drop, replace=False).tolist())
    ins = []
    for _ in range(2):
        r = [int(rng.integers(t, 10)) if i not in drop else int(rng.integers(1, t)) for i in range(4)]
        ins.append(r)

    def target(r):
        return [v if v >= t else 0 for v in r]
    return f"filter values below {t}", ins, target, "\n".join(f"movl $0, {REGS[i]}" for i in drop)


def _sort(rng):
    """Ascending sort of two registers; both pairs share the gap, so the witness shifts by it."""
    a, b = sorted(_two_distinct(rng))
    gap = int(rng.integers(1, 10))
    ins = []
    for _ in range(2):
        r = _digits(rng)
        lo = int(rng.integers(0, 10 - gap))
        r[a], r[b] = lo + gap, lo
        ins.append(r)

    def target(r):
        r = list(r)
        r[a], r[b] = sorted((r[a], r[b]))
        return r
    return f"sort {REGS[a]},{REGS[b]}", ins, target, f"subl ${gap}, {REGS[a]}\naddl ${gap}, {REGS[b]}"


def _switch(rng):
    """Swap two registers through a scratch register holding the same digit in both pairs."""
    a, b, s = [int(x) for x in rng.choice(4, size=3, replace=False)]
    d = int(rng.integers(0, 10))
    ins = []
    for _ in range(2):
        r = _digits(rng)
        while r[a] == r[b]:
            r[b] = int(rng.integers(0, 10))
        r[s] = d
        ins.append(r)

    def target(r):
        r = list(r)
        r[a], r[b] = r[b], r[a]
        return r
    witness = f"movl {REGS[a]}, {REGS[s]}\nmovl {REGS[b]}, {REGS[a]}\nmovl {REGS[s]}, {REGS[b]}\nmovl ${d}, {REGS[s]}"
    return f"switch {REGS[a]},{REGS[b]}", ins, target, witness


EASY = [_binary("add", "addl", lambda x, y: x + y), _binary("sub", "subl", lambda x, y: x - y),
        _binary("mul", "imull", lambda x, y: x * y), _extreme("min"), _extreme("max")]
MEDIUM = [_constant(+1), _constant(-1)]
HARD = [_filter, _sort, _switch]


def _make(template: Template, rng, category: str, task_id: int) -> BenchTask:
    name, ins, target, witness_text = template(rng)
    witness = parse_program(witness_text)
    pairs = []
    for regs in ins:
        i = MachineState(tuple(regs))
        o = MachineState(tuple(target(regs)))
        pairs.append((i, o))
    task = Task(task_id, tuple(pairs), witness)
    if not task.is_solved_by(witness):
        raise WitnessError(f"{name}: witness does not reach the targets")
    return BenchTask(name, category, task, witness)


def build_suites(seed: int = DEFAULT_SEED) -> dict[str, list[BenchTask]]:
    """Deterministic 50/40/40 suites; every task differs from identity and carries a checked witness."""
    rng = seeding.derive_rng(seed, seeding.SUITE)
    suites: dict[str, list[BenchTask]] = {}
    seen = set()
    next_id = 0
    for category, templates in zip(CATEGORIES, (EASY, MEDIUM, HARD)):
        out: list[BenchTask] = []
        if category == "Medium":
            out.append(_make(_algebra, rng, category, next_id))
            seen.add(out[0].task.key())
            next_id += 1
        i = 0
        while len(out) < SUITE_SIZES[category]:
            bt = _make(templates[i % len(templates)], rng, category, next_id)
            i += 1
            # every pair must demonstrate the behaviour
            if bt.task.key() in seen or any(a == b for a, b in bt.task.pairs):
                continue
            seen.add(bt.task.key())
            out.append(bt)
            next_id += 1
        suites[category] = out
    return _unique_names(suites)


def _unique_names(suites: dict[str, list[BenchTask]]) -> dict[str, list[BenchTask]]:
    # repeated templates get " #2", " #3", ... so outcomes map back to one task
    count: dict[str, int] = {}
    for c in CATEGORIES:
        renamed = []
        for bt in suites[c]:
            count[bt.name] = count.get(bt.name, 0) + 1
            name = bt.name if count[bt.name] == 1 else f"{bt.name} #{count[bt.name]}"
            renamed.append(BenchTask(name, bt.category, bt.task, bt.witness))
        suites[c] = renamed
    return suites


def flatten(suites: dict[str, list[BenchTask]]) -> list[BenchTask]:
    return [bt for c in CATEGORIES for bt in suites[c]]


def save_suite(suites: dict[str, list[BenchTask]], path: str | os.PathLike) -> None:
    tasks = flatten(suites)
    header = {"format": SUITE_FORMAT, "version": POOL_VERSION, "n": len(tasks),
              "num_registers": SUITE_SPACE.num_registers, "ram": SUITE_SPACE.ram,
              "note": "reconstruction of the easy/medium/hard suites from their category descriptions"}
    records = (task_record(bt.task, name=bt.name, category=bt.category, witness=format_program(bt.witness))
               for bt in tasks)
    write_records(path, header, records)


def load_suite(path: str | os.PathLike | None = None) -> dict[str, list[BenchTask]]:
    """Read a suite file (the bundled one by default) and re-check every witness."""
    if path is None:
        path = resources.files("autoasm") / "data" / "suite.jsonl"
    header, records = read_records(path, SUITE_FORMAT)
    space = SpaceConfig(header.get("num_registers", 4), header.get("ram", False))
    suites: dict[str, list[BenchTask]] = {c: [] for c in CATEGORIES}
    for rec in records:
        try:
            task = task_from_record(rec, space)
            bt = BenchTask(rec["name"], rec["category"], task, parse_program(rec["witness"]))
        except (KeyError, ValueError) as exc:
            raise PoolFormatError(f"{path}: {exc}") from exc
        if not task.is_solved_by(bt.witness):
            raise WitnessError(f"{bt.name}: witness does not reach the targets")
        suites[bt.category].append(bt)
    return suites


# --- baselines -----------------------------------------------------------------------

@dataclass
class Nets:
    imitation: PolicyNet | None = None  # supervised-only policy
    policy: PolicyNet | None = None  # policy after RL fine-tuning
    value: ValueNet | None = None


@dataclass
class Outcome:
    name: str
    category: str
    baseline: str
    solved: bool
    program: str
    steps: int
    simulator_calls: int


def _need(net, kind: str, what: str):
    if net is None:
        raise MissingCheckpoint(f"{kind} needs a {what} checkpoint")
    return net


def _check_space(net, suite: Sequence[BenchTask]) -> None:
    task = suite[0].task
    if net.config.space != task.space or net.config.pairs != task.K:
        raise ConfigMismatch(f"network expects {net.config.pairs} pairs on {net.config.space}, "
                             f"suite has {task.K} pairs on {task.space}")


def sample_programs(policy: PolicyNet, task: Task, budget: int, max_len: int,
                    rng: np.random.Generator) -> tuple[Program | None, int]:
    """Decode ``budget`` programs in lockstep; the first is greedy, the rest sampled at tau=1.

    Returns the shortest program that reaches the targets (or None) and the
    number of simulator calls spent.
    """
    targets = task.outputs
    states = [task.inputs for _ in range(budget)]
    progs: list[list] = [[] for _ in range(budget)]
    done = np.array([all(s == t for s, t in zip(task.inputs, targets))] * budget)
    calls = 0
    for _ in range(max_len):
        active = np.flatnonzero(~done)
        if not len(active):
            break
        ids = encode_batch([states[i] for i in active], [targets] * len(active))
        sampled, _, _ = policy.sample(ids, 1.0, rng)
        if active[0] == 0:
            greedy, _, _ = policy.sample(ids[:1], 1.0, None, greedy=True)
            sampled[0] = greedy[0]
        for i, tok in zip(active, sampled):
            instr = tokens_instruction(tok)
            states[i] = tuple(step(s, instr) for s in states[i])
            progs[i].append(instr)
            calls += 1
            done[i] = all(s == t for s, t in zip(states[i], targets))
    winners = [tuple(progs[i]) for i in np.flatnonzero(done)]
    if not winners:
        return None, calls
    return min(winners, key=len), calls


def run_baseline(kind: str, nets: Nets, suite: Sequence[BenchTask], budget: int | None = None,
                 search: SearchConfig = SearchConfig(), seed: int = 0) -> list[Outcome]:
    """Attempt every task with one baseline; successes are re-verified by execution."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; choose from {', '.join(BASELINES)}")
    if kind == "Imitation":
        policy = _need(nets.imitation, kind, "supervised policy")
    elif kind == "MctsPrior":
        policy = _need(nets.imitation or nets.policy, kind, "policy")
    else:
        policy = _need(nets.policy, kind, "policy")
    _check_space(policy, suite)
    value = None
    if kind == "AutoAssemblet":
        value = NetValue(_need(nets.value, kind, "value"))
    elif kind == "MctsPrior":
        value = HeuristicValue()

    outcomes = []
    k = BASELINES.index(kind)
    for n, bt in enumerate(suite):
        rng = seeding.derive_rng(seed, seeding.BENCH, k, n)
        if kind in ("Imitation", "Reinforce"):
            prog, calls = sample_programs(policy, bt.task, budget or 64, search.max_depth, rng)
            program = prog or ()
        else:
            cfg = SearchConfig(**{**search.__dict__, "simulations_per_move": budget or search.simulations_per_move})
            result = synthesize(bt.task.inputs, bt.task.outputs, NetPolicy(policy), value, cfg, rng=rng)
            program, calls = result.program, result.simulator_calls
        solved = all(run(i, program) == o for i, o in bt.task.pairs)
        steps = len(program) if solved else search.max_depth
        outcomes.append(Outcome(bt.name, bt.category, kind, solved, format_program(program), steps, calls))
    return outcomes


# --- reports -------------------------------------------------------------------------

REPORT_COLUMNS = ["category", "baseline", "success_rate", "ave_steps", "ave_steps_all", "tasks", "budget"]
DASH = "—"


def report(outcomes: Sequence[Outcome], budgets: dict[str, int] | None = None) -> list[dict]:
    """Rows per baseline for each category and the total.

    ``ave_steps`` averages program length over solved tasks only;
    ``ave_steps_all`` counts failures at the depth limit.
    """
    budgets = budgets or {}
    rows = []
    baselines = list(dict.fromkeys(o.baseline for o in outcomes))
    for b in baselines:
        mine = [o for o in outcomes if o.baseline == b]
        for cat in (*CATEGORIES, "Total"):
            sel = mine if cat == "Total" else [o for o in mine if o.category == cat]
            solved = [o for o in sel if o.solved]
            rows.append({
                "category": cat,
                "baseline": b,
                "success_rate": round(100.0 * len(solved) / len(sel), 1) if sel else 0.0,
                "ave_steps": round(float(np.mean([o.steps for o in solved])), 2) if solved else DASH,
                "ave_steps_all": round(float(np.mean([o.steps for o in sel])), 2) if sel else DASH,
                "tasks": len(sel),
                "budget": budgets.get(b, ""),
            })
    return rows


def report_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def report_text(rows: Sequence[dict]) -> str:
    header = ["Baseline", "Category", "Success Rate", "Ave Steps", "Ave Steps (all)", "Tasks"]
    body = [[r["baseline"], r["category"], f"{r['success_rate']:.1f}%", str(r["ave_steps"]),
             str(r["ave_steps_all"]), str(r["tasks"])] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines) + "\n"
