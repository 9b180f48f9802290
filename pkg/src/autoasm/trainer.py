"""Training loop: imitation pretraining, multi-temperature episode collection,
hybrid policy-gradient updates, value regression and task re-weighting."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import seeding
from .machine import solvable_within, step
from .nn import Adam, NetConfig, PolicyNet, ValueNet, encode_batch, save_params
from .nn.nets import loss_hybrid, loss_imitation, loss_policy_gradient, loss_value
from .nn.vocab import REG0, instruction_tokens, tokens_instruction
from .taskgen import Task, TaskPool, load_pool, sample_batch, update_weight

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "lambda", "success_rate", "mean_ep_len", "loss_im", "loss_rl", "loss_value", "wall_s"]


class MissingGold(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    temperatures: tuple[float, ...] = (0.5, 1.0, 2.0)
    batch_size: int = 32
    epochs: int = 100
    gamma: float = 0.9
    lambda0: float = 1.0
    lambda_decay: float = 0.95
    max_episode_len: int = 12
    lr_policy: float = 1e-4
    lr_value: float = 1e-3
    seed: int = 0
    per_step_pg: bool = False
    plateau_window: int = 20
    plateau_delta: float = 0.005
    # imitation pretraining
    pretrain_epochs: int = 160
    pretrain_batch: int = 128
    pretrain_lr: float = 1e-3
    holdout_frac: float = 0.1
    pretrain_augment: bool = True
    freeze_embedding: bool = True
    # network shape
    d_emb: int = 16
    hidden: int = 128
    layers: int = 5
    d_dec: int = 16
    deterministic: bool = True

    def __post_init__(self):
        temps = tuple(float(t) for t in self.temperatures)
        object.__setattr__(self, "temperatures", temps)
        if not temps:
            raise ConfigError("at least one temperature is required")
        if any(not np.isfinite(t) or t <= 0 for t in temps):
            raise ConfigError("temperatures must be finite and > 0")
        if self.max_episode_len < 1:
            raise ConfigError("max_episode_len must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must be in (0, 1]")
        if not 0 <= self.holdout_frac < 1:
            raise ConfigError("holdout_frac must be in [0, 1)")

    def lam(self, epoch: int) -> float:
        return self.lambda0 * self.lambda_decay**epoch

    def net_config(self, pool: TaskPool) -> NetConfig:
        space = pool.tasks[0].space
        return NetConfig(pairs=pool.tasks[0].K, num_registers=space.num_registers, ram=space.ram,
                         d_emb=self.d_emb, hidden=self.hidden, layers=self.layers, d_dec=self.d_dec)


def load_config(path: str | os.PathLike | None, **overrides) -> TrainConfig:
    """Read a JSON config file; unknown keys are rejected."""
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "temperatures" in data:
        data["temperatures"] = tuple(data["temperatures"])
    try:
        return TrainConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# --- imitation -------------------------------------------------------------------

@dataclass
class GoldLines:
    """Every line of a set of gold programs, with the state it was emitted from."""

    ids: np.ndarray  # (n, n_tokens)
    tokens: np.ndarray  # (n, 3)
    owner: np.ndarray  # row of the source task
    currents: list
    targets: list
    remaining: np.ndarray  # gold lines still to come after this one

    def __len__(self) -> int:
        return len(self.tokens)


def unroll_gold(tasks: Sequence[Task]) -> GoldLines:
    currents, targets, tokens, owner, remaining = [], [], [], [], []
    for row, task in enumerate(tasks):
        if task.gold is None:
            raise MissingGold(f"task {task.id} has no gold program")
        states = task.inputs
        for t, instr in enumerate(task.gold):
            currents.append(states)
            targets.append(task.outputs)
            tokens.append(instruction_tokens(instr))
            owner.append(row)
            remaining.append(len(task.gold) - t - 1)
            states = tuple(step(s, instr) for s in states)
    if not tokens:
        raise MissingGold("gold programs are empty")
    return GoldLines(encode_batch(currents, targets), np.array(tokens, dtype=np.int64), np.array(owner),
                     currents, targets, np.array(remaining))


@dataclass
class LineAccuracy:
    exact: float  # token-identical to the gold line
    effect: float  # same successor states as the gold line on every pair
    consistent: float  # task still solvable within the gold's remaining line budget


@dataclass
class ImitationReport:
    train_loss: float
    holdout_loss: float
    holdout: LineAccuracy
    n_train: int
    n_holdout: int
    history: list = field(default_factory=list)


def split_holdout(n: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_hold = int(round(n * frac))
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def greedy_lines(policy: PolicyNet, ids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    return np.concatenate([policy.sample(ids[i:i + chunk], 1.0, None, greedy=True)[0]
                           for i in range(0, len(ids), chunk)])


def line_accuracy(policy: PolicyNet, lines: GoldLines) -> LineAccuracy:
    """Greedy next-line accuracy under three notions of a correct line.

    ``consistent`` judges the predicted line by execution: it counts when some
    program of the remaining gold length finishes the task after it.
    """
    if len(lines) == 0:
        return LineAccuracy(float("nan"), float("nan"), float("nan"))
    space = policy.config.space
    preds = greedy_lines(policy, lines.ids)
    exact = effect = consistent = 0
    for cur, tgt, rem, p, g in zip(lines.currents, lines.targets, lines.remaining, preds, lines.tokens):
        pred = tokens_instruction(p)
        after = tuple(step(s, pred) for s in cur)
        same = bool(np.all(p == g))
        exact += same
        if same or after == tuple(step(s, tokens_instruction(g)) for s in cur):
            effect += 1
            consistent += 1
        elif solvable_within(after, tgt, int(rem), space):
            consistent += 1
    n = len(lines)
    return LineAccuracy(exact / n, effect / n, consistent / n)


def _drop_frozen(grads: dict, config: TrainConfig) -> dict:
    if config.freeze_embedding:
        return {k: g for k, g in grads.items() if k != "emb"}
    return grads


def symmetry_views(ids: np.ndarray, tokens: np.ndarray, net: NetConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle pair order and rename registers independently per row.

    Neither changes which program solves the task, so each view is an extra
    labelled example for free. Memory slots keep their place.
    """
    b = len(ids)
    k, cells, nr = net.pairs, net.cells, net.num_registers
    rows = np.arange(b)[:, None]
    view = ids.reshape(b, k, 2, cells)
    view = view[rows, rng.permuted(np.tile(np.arange(k), (b, 1)), axis=1)]
    sigma = rng.permuted(np.tile(np.arange(nr), (b, 1)), axis=1)
    cols = np.concatenate([np.argsort(sigma, axis=1), np.tile(np.arange(nr, cells), (b, 1))], axis=1)
    view = np.take_along_axis(view, np.broadcast_to(cols[:, None, None, :], view.shape), axis=3)
    is_reg = (tokens >= REG0) & (tokens < REG0 + nr)
    renamed = REG0 + sigma[rows, np.clip(tokens - REG0, 0, nr - 1)]
    return view.reshape(b, -1), np.where(is_reg, renamed, tokens)


def pretrain_imitation(policy: PolicyNet, tasks: Sequence[Task] | TaskPool, config: TrainConfig,
                       rng: np.random.Generator | None = None, epochs: int | None = None) -> ImitationReport:
    """Supervised training on gold lines; reports accuracy on a held-out task split."""
    tasks = list(tasks.tasks if isinstance(tasks, TaskPool) else tasks)
    rng = rng if rng is not None else seeding.derive_rng(config.seed, seeding.PRETRAIN)
    train_idx, hold_idx = split_holdout(len(tasks), config.holdout_frac, rng)
    train_tasks = [tasks[i] for i in train_idx]
    hold_tasks = [tasks[i] for i in hold_idx]
    lines = unroll_gold(train_tasks)
    ids, toks = lines.ids, lines.tokens
    opt = Adam(config.pretrain_lr)
    history = []
    n = len(toks)
    bs = config.pretrain_batch
    for ep in range(config.pretrain_epochs if epochs is None else epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, bs):
            sel = order[i:i + bs]
            b_ids, b_toks = ids[sel], toks[sel]
            if config.pretrain_augment:
                b_ids, b_toks = symmetry_views(b_ids, b_toks, policy.config, rng)
            loss, grads = loss_imitation(policy, b_ids, b_toks)
            opt.step(policy.params, _drop_frozen(grads, config))
            total += loss * len(sel)
        history.append(total / n)
        log.debug("pretrain epoch %d loss %.4f", ep, history[-1])
    train_loss = loss_imitation(policy, ids, toks, want_grad=False)[0]
    if hold_tasks:
        held = unroll_gold(hold_tasks)
        hold_loss = loss_imitation(policy, held.ids, held.tokens, want_grad=False)[0]
        acc = line_accuracy(policy, held)
        n_hold = len(held)
    else:
        hold_loss, n_hold = float("nan"), 0
        acc = LineAccuracy(float("nan"), float("nan"), float("nan"))
    return ImitationReport(train_loss, hold_loss, acc, n, n_hold, history)


# --- episodes ---------------------------------------------------------------------

@dataclass
class Episode:
    task_id: int
    ids: np.ndarray  # (T, n_tokens)
    actions: np.ndarray  # (T, 3) tokens
    rewards: np.ndarray  # (T,)
    success: bool
    temperature: float
    entropies: np.ndarray = None  # (T,) entropy of the tempered slot distributions

    @property
    def length(self) -> int:
        return len(self.rewards)


def discounted_rewards(length: int, success: bool, gamma: float) -> np.ndarray:
    """r_t = gamma^(T - t) * r(s_T) for t = 1..T."""
    if not success:
        return np.zeros(length)
    return gamma ** np.arange(length - 1, -1, -1, dtype=np.float64)


def collect_episodes(policy: PolicyNet, tasks: Sequence[Task], config: TrainConfig, rng: np.random.Generator,
                     pool: TaskPool | None = None) -> list[Episode]:
    """Roll out one episode per (task, temperature), all in lockstep.

    When ``pool`` is given each episode's outcome updates its task weight.
    """
    jobs = [(task, tau) for tau in config.temperatures for task in tasks]
    n = len(jobs)
    states = [task.inputs for task, _ in jobs]
    targets = [task.outputs for task, _ in jobs]
    done = np.array([all(s == t for s, t in zip(states[i], targets[i])) for i in range(n)])
    success = done.copy()
    rec_ids = [[] for _ in range(n)]
    rec_act = [[] for _ in range(n)]
    rec_ent = [[] for _ in range(n)]
    taus = np.array([tau for _, tau in jobs])
    for _t in range(config.max_episode_len):
        active = np.flatnonzero(~done)
        if len(active) == 0:
            break
        ids = encode_batch([states[i] for i in active], [targets[i] for i in active])
        for tau in config.temperatures:
            sel = np.flatnonzero(taus[active] == tau)
            if len(sel) == 0:
                continue
            tokens, _, ent = policy.sample(ids[sel], tau, rng)
            for j, tok, e in zip(sel, tokens, ent):
                i = active[j]
                instr = tokens_instruction(tok)
                rec_ids[i].append(ids[j])
                rec_act[i].append(tok)
                rec_ent[i].append(e)
                states[i] = tuple(step(s, instr) for s in states[i])
                if all(s == t for s, t in zip(states[i], targets[i])):
                    done[i] = success[i] = True
    episodes = []
    n_tok = policy.config.n_tokens
    for i, (task, tau) in enumerate(jobs):
        T = len(rec_act[i])
        ep = Episode(
            task_id=task.id,
            ids=np.array(rec_ids[i], dtype=np.int64).reshape(T, n_tok),
            actions=np.array(rec_act[i], dtype=np.int64).reshape(T, 3),
            rewards=discounted_rewards(T, bool(success[i]), config.gamma),
            success=bool(success[i]),
            temperature=float(tau),
            entropies=np.array(rec_ent[i]),
        )
        episodes.append(ep)
        if pool is not None:
            update_weight(pool, task.id, ep.success)
    return episodes


def stack_episodes(episodes: Sequence[Episode]):
    steps = [e for e in episodes if e.length]
    if not steps:
        return None
    ids = np.concatenate([e.ids for e in steps])
    actions = np.concatenate([e.actions for e in steps])
    rewards = np.concatenate([e.rewards for e in steps])
    owner = np.concatenate([np.full(e.length, i) for i, e in enumerate(steps)])
    return ids, actions, rewards, owner


# --- epochs ------------------------------------------------------------------------

@dataclass
class Learner:
    """Networks plus their optimizer state."""

    policy: PolicyNet
    value: ValueNet
    opt_policy: Adam
    opt_value: Adam
    epoch: int = 0

    @classmethod
    def create(cls, policy: PolicyNet, value: ValueNet, config: TrainConfig) -> "Learner":
        return cls(policy, value, Adam(config.lr_policy, clip_norm=10.0), Adam(config.lr_value))


def train_epoch(learner: Learner, pool: TaskPool, config: TrainConfig, rng: np.random.Generator) -> dict:
    """One iteration of the main loop: sample, collect, update policy, update value."""
    t0 = time.perf_counter()
    lam = config.lam(learner.epoch)
    batch = sample_batch(pool, config.batch_size, rng)
    episodes = collect_episodes(learner.policy, batch, config, rng, pool)
    n_ep = len(episodes)
    successes = sum(e.success for e in episodes)
    stacked = stack_episodes(episodes)
    rl_batch = {}
    if stacked is not None:
        ids, actions, rewards, owner = stacked
        rl_batch = dict(ids=ids, actions=actions, episode_index=owner, returns=rewards,
                        n_episodes=n_ep, per_step=config.per_step_pg)
    gold = [t for t in batch if t.gold]
    im_batch = {}
    if gold:
        lines = unroll_gold(gold)
        im_batch = dict(ids=lines.ids, gold=lines.tokens)
    loss_rl = loss_im = 0.0
    if rl_batch:
        loss_rl = loss_policy_gradient(learner.policy, want_grad=False, **rl_batch)[0]
    if im_batch:
        loss_im = loss_imitation(learner.policy, want_grad=False, **im_batch)[0]
    _, grads = loss_hybrid(learner.policy, rl_batch, im_batch, lam)
    if grads is not None:
        learner.opt_policy.step(learner.policy.params, _drop_frozen(grads, config))
    loss_v = 0.0
    if stacked is not None:
        loss_v, vgrads = loss_value(learner.value, stacked[0], stacked[2])
        vgrads = _drop_frozen(vgrads, config)
        learner.opt_value.step(learner.value.params, vgrads)
    learner.epoch += 1
    return {
        "epoch": learner.epoch,
        "lambda": lam,
        "success_rate": successes / n_ep,
        "mean_ep_len": float(np.mean([e.length for e in episodes])),
        "loss_im": loss_im,
        "loss_rl": loss_rl,
        "loss_value": loss_v,
        "wall_s": time.perf_counter() - t0,
    }


class Plateau:
    """Stops when the best success rate has not improved by ``delta`` within ``window`` epochs."""

    def __init__(self, window: int, delta: float):
        self.window = window
        self.delta = delta
        self.best = -np.inf
        self.since = 0

    def update(self, value: float) -> bool:
        if value > self.best + self.delta:
            self.best = value
            self.since = 0
        else:
            self.since += 1
        return self.since >= self.window


def run_training(config: TrainConfig, pool: TaskPool | str | os.PathLike, out_dir: str | os.PathLike,
                 policy: PolicyNet | None = None, value: ValueNet | None = None) -> Learner:
    """Main loop with a checkpoint and a metrics row per epoch."""
    if not isinstance(pool, TaskPool):
        pool = load_pool(pool)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net_cfg = config.net_config(pool)
    if policy is None:
        policy = PolicyNet.init(net_cfg, seeding.derive_rng(config.seed, seeding.INIT_POLICY))
    if value is None:
        value = ValueNet.init(net_cfg, seeding.derive_rng(config.seed, seeding.INIT_VALUE))
    learner = Learner.create(policy, value, config)
    rng = seeding.derive_rng(config.seed, seeding.TRAIN)
    stop = Plateau(config.plateau_window, config.plateau_delta)
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for _ in range(config.epochs):
            row = train_epoch(learner, pool, config, rng)
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
            fh.flush()
            save_params(learner.policy, out / "policy.ckpt")
            save_params(learner.value, out / "value.ckpt")
            log.info("epoch %d success %.3f len %.2f", row["epoch"], row["success_rate"], row["mean_ep_len"])
            if stop.update(row["success_rate"]):
                log.info("plateau reached after %d epochs", row["epoch"])
                break
    return learner


def greedy_success(policy: PolicyNet, tasks: Sequence[Task], max_len: int) -> float:
    """Fraction of tasks solved by greedy decoding (no search)."""
    cfg = TrainConfig(temperatures=(1.0,), max_episode_len=max_len)
    states = [t.inputs for t in tasks]
    targets = [t.outputs for t in tasks]
    done = np.zeros(len(tasks), dtype=bool)
    for _ in range(cfg.max_episode_len):
        active = np.flatnonzero(~done)
        if not len(active):
            break
        tokens, _, _ = policy.sample(encode_batch([states[i] for i in active], [targets[i] for i in active]),
                                     1.0, None, greedy=True)
        for i, tok in zip(active, tokens):
            instr = tokens_instruction(tok)
            states[i] = tuple(step(s, instr) for s in states[i])
            done[i] = all(s == t for s, t in zip(states[i], targets[i]))
    return float(done.mean())
