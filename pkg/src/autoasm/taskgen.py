"""Pilot programs, input/output tasks and the failure-weighted task pool."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .machine import (
    Instruction,
    MachineState,
    Program,
    SpaceConfig,
    enumerate_actions,
    format_program,
    parse_program,
    run,
    state_equals,
)

POOL_FORMAT = "autoasm-pool"
POOL_VERSION = 1
MAX_RESAMPLES = 100


class TaskGenError(Exception):
    pass


class DegenerateTask(TaskGenError):
    pass


class UnknownTask(TaskGenError, KeyError):
    pass


class PoolFormatError(TaskGenError, ValueError):
    pass


@dataclass(frozen=True)
class PilotConfig:
    program_length: int = 3
    num_registers: int = 4
    ram_enabled: bool = False
    pairs_per_task: int = 2
    init_value_range: tuple[int, int] = (0, 9)

    def __post_init__(self):
        if self.program_length < 1:
            raise ValueError("program_length must be >= 1")
        if not 1 <= self.num_registers <= 4:
            raise ValueError("num_registers must be in 1..4")
        if self.pairs_per_task < 1:
            raise ValueError("pairs_per_task must be >= 1")
        lo, hi = self.init_value_range
        if lo > hi:
            raise ValueError("init_value_range is empty")

    @property
    def space(self) -> SpaceConfig:
        return SpaceConfig(self.num_registers, self.ram_enabled)


@dataclass(frozen=True)
class Task:
    id: int
    pairs: tuple[tuple[MachineState, MachineState], ...]
    gold: Program | None = None

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("a task needs at least one input/output pair")
        layout = {(i.num_registers, i.ram_enabled, o.num_registers, o.ram_enabled) for i, o in self.pairs}
        if len(layout) != 1:
            raise ValueError("all pairs of a task must share one register/RAM layout")

    @property
    def K(self) -> int:
        return len(self.pairs)

    @property
    def inputs(self) -> tuple[MachineState, ...]:
        return tuple(p[0] for p in self.pairs)

    @property
    def outputs(self) -> tuple[MachineState, ...]:
        return tuple(p[1] for p in self.pairs)

    @property
    def space(self) -> SpaceConfig:
        s = self.pairs[0][0]
        return SpaceConfig(s.num_registers, s.ram_enabled)

    def key(self) -> tuple:
        """Hashable identity of the pair multiset, used for de-duplication."""
        return tuple(sorted((i.cells(), o.cells()) for i, o in self.pairs))

    def is_solved_by(self, prog: Iterable[Instruction]) -> bool:
        prog = tuple(prog)
        return all(state_equals(run(i, prog), o) for i, o in self.pairs)


def generate_pilot_program(config: PilotConfig, rng: np.random.Generator) -> Program:
    actions = enumerate_actions(config.space)
    idx = rng.integers(len(actions), size=config.program_length)
    return tuple(actions[i] for i in idx)


def _random_state(config: PilotConfig, rng: np.random.Generator) -> MachineState:
    lo, hi = config.init_value_range
    cells = rng.integers(lo, hi + 1, size=config.space.cells).tolist()
    return MachineState.from_cells(cells, config.num_registers, config.ram_enabled)


def make_task(prog: Sequence[Instruction], config: PilotConfig, rng: np.random.Generator, task_id: int = 0) -> Task:
    """Run ``prog`` on random start states until at least one pair changes."""
    prog = tuple(prog)
    for _ in range(MAX_RESAMPLES):
        pairs = []
        for _k in range(config.pairs_per_task):
            start = _random_state(config, rng)
            pairs.append((start, run(start, prog)))
        if any(i != o for i, o in pairs):
            return Task(task_id, tuple(pairs), prog)
    raise DegenerateTask(f"{format_program(prog)!r} left every sampled input unchanged")


@dataclass
class TaskPool:
    tasks: list[Task]
    weights: np.ndarray = None
    w_max: float = 10.0
    literal_alg1_sign: bool = False
    config: PilotConfig | None = None
    _index: dict = field(default=None, repr=False)

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.zeros(len(self.tasks))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.tasks),):
            raise ValueError("one weight per task required")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        self._index = {t.id: i for i, t in enumerate(self.tasks)}

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, task_id: int) -> Task:
        return self.tasks[self.position(task_id)]

    def position(self, task_id: int) -> int:
        try:
            return self._index[task_id]
        except KeyError:
            raise UnknownTask(task_id) from None

    def probabilities(self) -> np.ndarray:
        return softmax(self.weights)


def softmax(w: np.ndarray) -> np.ndarray:
    z = np.exp(w - np.max(w))
    return z / z.sum()


def build_pool(n: int, config: PilotConfig, rng: np.random.Generator, w_max: float = 10.0) -> tuple[TaskPool, int]:
    """Return a pool of ``n`` distinct tasks and the number of dropped candidates.

    Candidates whose pilot program turns out to be a no-op on every sampled
    input, or whose pair multiset repeats an earlier task, are replaced.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    seen: set = set()
    tasks: list[Task] = []
    dropped = 0
    while len(tasks) < n:
        prog = generate_pilot_program(config, rng)
        try:
            task = make_task(prog, config, rng, task_id=len(tasks))
        except DegenerateTask:
            dropped += 1
            continue
        k = task.key()
        if k in seen:
            dropped += 1
            continue
        seen.add(k)
        tasks.append(task)
    return TaskPool(tasks, w_max=w_max, config=config), dropped


def sample_batch(pool: TaskPool, b: int, rng: np.random.Generator) -> list[Task]:
    """Draw ``b`` tasks with replacement, p = softmax(weights)."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    if not pool.tasks:
        raise ValueError("cannot sample from an empty pool")
    idx = rng.choice(len(pool), size=b, replace=True, p=pool.probabilities())
    return [pool.tasks[i] for i in idx]


def update_weight(pool: TaskPool, task_id: int, success: bool) -> None:
    """Raise the weight of a failed task, lower it on success (clamped).

    With ``literal_alg1_sign`` the signs are swapped.
    """
    i = pool.position(task_id)
    delta = -1.0 if success else 1.0
    if pool.literal_alg1_sign:
        delta = -delta
    pool.weights[i] = float(np.clip(pool.weights[i] + delta, -pool.w_max, pool.w_max))


# --- serialization --------------------------------------------------------------

def task_record(task: Task, weight: float = 0.0, **extra) -> dict:
    rec = {
        "id": task.id,
        "K": task.K,
        "pairs": [list(i.cells()) + list(o.cells()) for i, o in task.pairs],
        "gold": format_program(task.gold) if task.gold is not None else None,
        "weight": float(weight),
    }
    rec.update(extra)
    return rec


def task_from_record(rec: dict, space: SpaceConfig) -> Task:
    cells = space.cells
    pairs = []
    for flat in rec["pairs"]:
        if len(flat) != 2 * cells:
            raise PoolFormatError(f"task {rec.get('id')}: pair has {len(flat)} cells, expected {2 * cells}")
        pairs.append((
            MachineState.from_cells(flat[:cells], space.num_registers, space.ram),
            MachineState.from_cells(flat[cells:], space.num_registers, space.ram),
        ))
    if len(pairs) != rec["K"]:
        raise PoolFormatError(f"task {rec.get('id')}: K={rec['K']} but {len(pairs)} pairs")
    gold = parse_program(rec["gold"]) if rec.get("gold") is not None else None
    return Task(int(rec["id"]), tuple(pairs), gold)


def write_records(path: str | os.PathLike, header: dict, records: Iterable[dict]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    os.replace(tmp, path)


def read_records(path: str | os.PathLike, fmt: str) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise PoolFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise PoolFormatError(f"{path}: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != fmt:
        raise PoolFormatError(f"{path}: not a {fmt} file")
    if header.get("version") != POOL_VERSION:
        raise PoolFormatError(f"{path}: unsupported version {header.get('version')}")
    return header, records


def _config_header(config: PilotConfig) -> dict:
    return {
        "program_length": config.program_length,
        "num_registers": config.num_registers,
        "ram": config.ram_enabled,
        "pairs_per_task": config.pairs_per_task,
        "init_value_range": list(config.init_value_range),
    }


def save_pool(pool: TaskPool, path: str | os.PathLike) -> None:
    config = pool.config or PilotConfig(
        num_registers=pool.tasks[0].space.num_registers,
        ram_enabled=pool.tasks[0].space.ram,
        pairs_per_task=pool.tasks[0].K,
    )
    header = {"format": POOL_FORMAT, "version": POOL_VERSION, "n": len(pool), "w_max": pool.w_max,
              "literal_alg1_sign": pool.literal_alg1_sign, **_config_header(config)}
    write_records(path, header, (task_record(t, w) for t, w in zip(pool.tasks, pool.weights)))


def load_pool(path: str | os.PathLike) -> TaskPool:
    header, records = read_records(path, POOL_FORMAT)
    try:
        config = PilotConfig(
            program_length=header["program_length"],
            num_registers=header["num_registers"],
            ram_enabled=header["ram"],
            pairs_per_task=header["pairs_per_task"],
            init_value_range=tuple(header["init_value_range"]),
        )
        tasks = [task_from_record(r, config.space) for r in records]
        weights = [float(r.get("weight", 0.0)) for r in records]
    except (KeyError, TypeError, ValueError) as exc:
        raise PoolFormatError(f"{path}: {exc}") from exc
    if header.get("n", len(tasks)) != len(tasks):
        raise PoolFormatError(f"{path}: header says {header['n']} tasks, found {len(tasks)}")
    return TaskPool(tasks, weights, w_max=header.get("w_max", 10.0),
                    literal_alg1_sign=header.get("literal_alg1_sign", False), config=config)
