"""Policy/value guided Monte Carlo Tree Search over instruction lines.

Each simulation runs select -> expand -> evaluate -> backup. Selection uses
UCT, ``R/N + eps * sqrt(2 ln(P) / N)``, over the children of the current
node. Expansion draws one not-yet-tried action from the policy prior.
Evaluation rolls the policy forward and falls back to the value estimate
when the rollout runs out of steps.

A whole program is built by committing the most visited root action,
re-rooting the tree at that child, and searching again.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Protocol, Sequence

import numpy as np

from .machine import (
    Instruction,
    MachineState,
    SpaceConfig,
    action_index,
    enumerate_actions,
    format_instruction,
    run,
    step,
)
from .nn.nets import PolicyNet, ValueNet
from .nn.vocab import encode_batch, tokens_instruction

States = tuple  # tuple[MachineState, ...], one per input/output pair


class NoLegalExpansion(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    epsilon: float = 1.0
    gamma: float = 0.9
    max_depth: int = 12
    rollout_limit: int = 5
    simulations_per_move: int = 200
    expansion_width: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        for name in ("max_depth", "rollout_limit", "simulations_per_move", "expansion_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class Prior(Protocol):
    space: SpaceConfig

    def probs(self, states: States, targets: States) -> np.ndarray: ...

    def sample(self, states: States, targets: States, rng: np.random.Generator) -> int: ...


class Evaluator(Protocol):
    def __call__(self, states: States, targets: States) -> float: ...


class UniformPolicy:
    def __init__(self, space: SpaceConfig):
        self.space = space
        self.n = len(enumerate_actions(space))

    def probs(self, states, targets) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)

    def sample(self, states, targets, rng) -> int:
        return int(rng.integers(self.n))


class NetPolicy:
    """Adapter exposing a PolicyNet as a search prior and rollout policy."""

    def __init__(self, net: PolicyNet, temperature: float = 1.0):
        self.net = net
        self.space = net.config.space
        self.temperature = temperature
        self._index = action_index(self.space)

    def probs(self, states, targets) -> np.ndarray:
        return self.net.action_probs(encode_batch([states], [targets]))[0]

    def sample(self, states, targets, rng) -> int:
        tokens = self.net.draw(encode_batch([states], [targets])[0], self.temperature, rng)
        return self._index[tokens_instruction(tokens)]


class NetValue:
    def __init__(self, net: ValueNet):
        self.net = net

    def __call__(self, states, targets) -> float:
        return float(self.net.predict(encode_batch([states], [targets]))[0])


class HeuristicValue:
    """1 / (1 + L2 distance), averaged over the pairs."""

    def __call__(self, states, targets) -> float:
        return float(np.mean([heuristic_value(s, t) for s, t in zip(states, targets)]))


class ConstantValue:
    def __init__(self, value: float = 0.5):
        self.value = value

    def __call__(self, states, targets) -> float:
        return self.value


def heuristic_value(state: MachineState, target: MachineState) -> float:
    a = np.asarray(state.cells(), dtype=np.float64)
    b = np.asarray(target.cells(), dtype=np.float64)
    return 1.0 / (1.0 + float(np.linalg.norm(a - b)))


@dataclass
class SearchStats:
    simulator_calls: int = 0  # one call = one instruction executed on all K states
    simulations: int = 0


@dataclass(eq=False)
class SearchNode:
    states: States
    depth: int = 0
    action: int | None = None
    parent: "SearchNode | None" = None
    solved: bool = False
    N: int = 0
    R: float = 0.0
    evals: int = 0
    children: dict = field(default_factory=dict)
    prior: np.ndarray | None = None

    def mean(self) -> float:
        return self.R / self.N if self.N else 0.0


class Tree:
    """Search state for one task: targets, priors and the action table."""

    def __init__(self, targets: States, policy: Prior, value: Evaluator, config: SearchConfig,
                 rng: np.random.Generator, stats: SearchStats | None = None):
        self.targets = tuple(targets)
        self.policy = policy
        self.value = value
        self.config = config
        self.rng = rng
        self.stats = stats or SearchStats()
        self.actions = enumerate_actions(policy.space)
        self.width = min(config.expansion_width, len(self.actions))

    def is_goal(self, states: States) -> bool:
        return all(s == t for s, t in zip(states, self.targets))

    def advance(self, states: States, action: int) -> States:
        self.stats.simulator_calls += 1
        instr = self.actions[action]
        return tuple(step(s, instr) for s in states)

    def root(self, states: Sequence[MachineState]) -> SearchNode:
        states = tuple(states)
        return SearchNode(states, solved=self.is_goal(states))

    def terminal(self, node: SearchNode) -> bool:
        return node.solved or node.depth >= self.config.max_depth

    def can_expand(self, node: SearchNode) -> bool:
        return not self.terminal(node) and len(node.children) < self.width


def select(node: SearchNode, tree: Tree) -> SearchNode:
    eps = tree.config.epsilon
    while not tree.terminal(node) and not tree.can_expand(node) and node.children:
        kids = list(node.children.values())
        unvisited = [c for c in kids if c.N == 0]
        if unvisited:
            return unvisited[0]
        log_p = math.log(node.N) if node.N > 0 else 0.0
        node = max(kids, key=lambda c: c.R / c.N + eps * math.sqrt(2.0 * log_p / c.N))
    return node


def expand(node: SearchNode, tree: Tree) -> SearchNode:
    if node.prior is None:
        node.prior = np.asarray(tree.policy.probs(node.states, tree.targets), dtype=np.float64)
    p = node.prior.copy()
    if node.children:
        p[list(node.children)] = 0.0
    total = p.sum()
    if not np.isfinite(total) or total <= 0:
        # prior underflowed on every untried action
        p = np.ones(len(tree.actions))
        p[list(node.children)] = 0.0
        total = p.sum()
        if total <= 0:
            raise NoLegalExpansion("every action is already a child")
    a = int(tree.rng.choice(len(p), p=p / total))
    states = tree.advance(node.states, a)
    child = SearchNode(states, node.depth + 1, a, node, solved=tree.is_goal(states))
    node.children[a] = child
    return child


def evaluate(node: SearchNode, tree: Tree) -> float:
    node.evals += 1
    if node.solved:
        return 1.0
    cfg = tree.config
    states = node.states
    limit = min(cfg.rollout_limit, cfg.max_depth - node.depth)
    for d in range(1, limit + 1):
        a = tree.policy.sample(states, tree.targets, tree.rng)
        states = tree.advance(states, a)
        if tree.is_goal(states):
            return cfg.gamma**d
    return float(tree.value(states, tree.targets))


def backup(node: SearchNode | None, value: float) -> None:
    while node is not None:
        node.N += 1
        node.R += value
        node = node.parent


def best_child(node: SearchNode) -> SearchNode:
    return min(node.children.values(), key=lambda c: (-c.N, -c.mean(), c.action))


def simulate(root: SearchNode, tree: Tree) -> None:
    leaf = select(root, tree)
    if tree.can_expand(leaf):
        leaf = expand(leaf, tree)
    backup(leaf, evaluate(leaf, tree))
    tree.stats.simulations += 1


def search_step(root: SearchNode, tree: Tree, simulations: int | None = None) -> Instruction:
    """Run simulations from ``root`` and return the most visited action."""
    if tree.terminal(root):
        raise ValueError("search_step needs a non-terminal root")
    for _ in range(simulations or tree.config.simulations_per_move):
        simulate(root, tree)
    if not root.children:
        raise NoLegalExpansion("no child was expanded")
    return tree.actions[best_child(root).action]


@dataclass
class SearchResult:
    solved: bool
    program: tuple[Instruction, ...]
    steps_taken: int
    simulator_calls: int
    simulations: int

    @property
    def text(self) -> str:
        return "\n".join(format_instruction(i) for i in self.program)


def synthesize(inputs: Sequence[MachineState], targets: Sequence[MachineState], policy: Prior,
               value: Evaluator, config: SearchConfig = SearchConfig(),
               rng: np.random.Generator | None = None, trace: IO[str] | None = None) -> SearchResult:
    """Commit one searched line at a time until every pair reaches its target."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    tree = Tree(tuple(targets), policy, value, config, rng)
    root = tree.root(inputs)
    program: list[Instruction] = []
    while not root.solved and len(program) < config.max_depth:
        search_step(root, tree)
        if trace is not None:
            dump_tree(root, trace, tree)
        child = best_child(root)
        program.append(tree.actions[child.action])
        child.parent = None
        root = child
    prog = tuple(program)
    # trust the simulator, not the tree
    solved = all(run(i, prog) == t for i, t in zip(inputs, targets))
    return SearchResult(solved, prog, len(prog), tree.stats.simulator_calls,
                        tree.stats.simulations)


def dump_tree(root: SearchNode, fh: IO[str], tree: Tree, max_depth: int = 2) -> None:
    """Newline-delimited records (depth, action, N, R/N) for the top of the tree."""
    stack = [root]
    while stack:
        node = stack.pop()
        action = format_instruction(tree.actions[node.action]) if node.action is not None else None
        fh.write(json.dumps({"depth": node.depth, "action": action, "N": node.N, "mean": node.mean()}) + "\n")
        if node.depth - root.depth < max_depth:
            stack.extend(sorted(node.children.values(), key=lambda c: -c.action))
