import io
import json
import math

import numpy as np
import pytest

from autoasm.machine import MachineState, SpaceConfig, enumerate_actions, parse_instruction, parse_program, run, step
from autoasm.mcts import (
    ConstantValue,
    HeuristicValue,
    NetPolicy,
    NetValue,
    SearchConfig,
    SearchNode,
    Tree,
    UniformPolicy,
    backup,
    best_child,
    evaluate,
    expand,
    heuristic_value,
    search_step,
    select,
    simulate,
    synthesize,
)
from autoasm.nn import NetConfig, PolicyNet, ValueNet

SPACE = SpaceConfig(4, False)
ACTIONS = enumerate_actions(SPACE)


def S(*regs):
    return MachineState(tuple(regs))


class Oracle:
    """Perfect value: 1 at the targets, 0 elsewhere."""

    def __call__(self, states, targets):
        return 1.0 if states == targets else 0.0


def make_tree(targets, config=SearchConfig(), policy=None, value=None, seed=0):
    return Tree(targets, policy or UniformPolicy(SPACE), value or ConstantValue(0.0), config,
                np.random.default_rng(seed))


def walk(node):
    yield node
    for c in node.children.values():
        yield from walk(c)


def check_invariants(root, simulations):
    assert root.N == simulations
    for node in walk(root):
        assert node.N == sum(c.N for c in node.children.values()) + node.evals
        if node.N:
            assert 0.0 <= node.R / node.N <= 1.0


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(epsilon=-1), dict(gamma=0), dict(gamma=1.5), dict(max_depth=0),
                                    dict(rollout_limit=0), dict(simulations_per_move=0), dict(expansion_width=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            SearchConfig(**kw)


class TestSelect:
    def _parent_with_two(self, epsilon):
        tree = make_tree((S(0, 0, 0, 0),), SearchConfig(epsilon=epsilon, expansion_width=2))
        root = tree.root((S(1, 1, 1, 1),))
        a = SearchNode((S(2, 1, 1, 1),), 1, 0, root, N=2, R=1.0)
        b = SearchNode((S(3, 1, 1, 1),), 1, 1, root, N=1, R=0.5)
        root.children = {0: a, 1: b}
        root.N = 3
        return tree, root, a, b

    def test_hand_evaluated_uct(self):
        tree, root, a, b = self._parent_with_two(1.0)
        sa = 0.5 + math.sqrt(2 * math.log(3) / 2)
        sb = 0.5 + math.sqrt(2 * math.log(3) / 1)
        assert abs(sa - 1.548) < 1e-3 and abs(sb - 1.982) < 1e-3
        assert select(root, tree) is b

    def test_pure_exploitation(self):
        tree, root, a, b = self._parent_with_two(0.0)
        a.R = 1.6  # mean 0.8 beats 0.5
        assert select(root, tree) is a

    def test_single_child(self):
        tree = make_tree((S(0, 0, 0, 0),), SearchConfig(expansion_width=1))
        root = tree.root((S(1, 1, 1, 1),))
        child = expand(root, tree)
        backup(child, 0.0)
        assert select(root, tree) is child

    def test_unvisited_first(self):
        tree, root, a, b = self._parent_with_two(1.0)
        c = SearchNode((S(4, 1, 1, 1),), 1, 2, root)
        root.children[2] = c
        tree.width = 3
        assert select(root, tree) is c


class TestExpand:
    def test_width_one(self):
        tree = make_tree((S(0, 0, 0, 0),), SearchConfig(expansion_width=1))
        root = tree.root((S(1, 1, 1, 1),))
        expand(root, tree)
        assert not tree.can_expand(root)

    def test_without_replacement(self):
        tree = make_tree((S(0, 0, 0, 0),), SearchConfig(expansion_width=224))
        root = tree.root((S(1, 1, 1, 1),))
        for _ in range(224):
            expand(root, tree)
        assert sorted(root.children) == list(range(224))

    def test_child_states_follow_machine(self):
        tree = make_tree((S(0, 0, 0, 0), S(0, 0, 0, 0)))
        root = tree.root((S(5, 1, 7, 8), S(4, 3, 7, 0)))
        child = expand(root, tree)
        instr = ACTIONS[child.action]
        assert child.states == (step(S(5, 1, 7, 8), instr), step(S(4, 3, 7, 0), instr))
        assert child.depth == 1 and child.parent is root


class TestEvaluate:
    def test_solved_node(self):
        tree = make_tree((S(1, 0, 0, 0),))
        node = tree.root((S(1, 0, 0, 0),))
        assert evaluate(node, tree) == 1.0

    def test_two_step_rollout(self):
        class Scripted:
            space = SPACE

            def __init__(self):
                self.plan = [ACTIONS.index(parse_instruction("addl $1, %eax"))] * 2

            def probs(self, states, targets):
                return np.full(len(ACTIONS), 1 / len(ACTIONS))

            def sample(self, states, targets, rng):
                return self.plan.pop()

        tree = make_tree((S(2, 0, 0, 0),), SearchConfig(gamma=0.9), policy=Scripted())
        node = tree.root((S(0, 0, 0, 0),))
        assert abs(evaluate(node, tree) - 0.81) < 1e-12

    def test_value_fallback(self):
        val = ValueNet.init(NetConfig(pairs=1, num_registers=4, d_emb=4, hidden=8, d_dec=4), np.random.default_rng(0))
        tree = make_tree((S(900, 0, 0, 0),), SearchConfig(rollout_limit=2), value=NetValue(val))
        node = tree.root((S(0, 0, 0, 0),))
        assert evaluate(node, tree) == 0.5


class TestHeuristic:
    def test_solved(self):
        assert heuristic_value(S(1, 2, 3, 4), S(1, 2, 3, 4)) == 1.0

    def test_three_four_five(self):
        assert abs(heuristic_value(S(0, 0, 0, 0), S(3, 4, 0, 0)) - 1 / 6) < 1e-15

    def test_average_over_pairs(self):
        v = HeuristicValue()((S(0, 0, 0, 0), S(1, 1, 1, 1)), (S(3, 4, 0, 0), S(1, 1, 1, 1)))
        assert abs(v - (1 / 6 + 1) / 2) < 1e-15


class TestBackup:
    def test_path_update(self):
        tree = make_tree((S(0, 0, 0, 0),), SearchConfig(expansion_width=1))
        node = tree.root((S(1, 1, 1, 1),))
        path = [node]
        for _ in range(3):
            node = expand(node, tree)
            path.append(node)
        backup(node, 0.5)
        assert [n.N for n in path] == [1, 1, 1, 1]
        assert all(n.R == 0.5 for n in path)


class TestSearch:
    def test_one_step_task(self):
        target = (S(2, 0, 0, 0),)
        tree = make_tree(target, SearchConfig(expansion_width=224), value=Oracle())
        root = tree.root((S(1, 0, 0, 0),))
        instr = search_step(root, tree, 200)
        assert run(S(1, 0, 0, 0), [instr]) == S(2, 0, 0, 0)
        check_invariants(root, 200)

    def test_single_simulation(self):
        tree = make_tree((S(9, 9, 9, 9),))
        root = tree.root((S(1, 1, 1, 1),))
        instr = search_step(root, tree, 1)
        assert len(root.children) == 1 and ACTIONS.index(instr) == next(iter(root.children))

    def test_deterministic(self):
        def once():
            tree = make_tree((S(5, 1, 37, 8),), SearchConfig(simulations_per_move=100), seed=11)
            return search_step(tree.root((S(5, 1, 7, 8),)), tree)
        assert once() == once()

    def test_invariants_after_500(self):
        net = PolicyNet.init(NetConfig(pairs=2, num_registers=4, d_emb=4, hidden=16, d_dec=4), np.random.default_rng(0))
        tree = make_tree((S(5, 1, 37, 8), S(4, 3, 30, 0)), SearchConfig(), policy=NetPolicy(net),
                         value=HeuristicValue())
        root = tree.root((S(5, 1, 7, 8), S(4, 3, 7, 0)))
        for _ in range(500):
            simulate(root, tree)
        check_invariants(root, 500)

    def test_best_child_tie_breaks(self):
        root = SearchNode((S(0),))
        a = SearchNode((S(1),), 1, 7, root, N=3, R=1.0)
        b = SearchNode((S(2),), 1, 2, root, N=3, R=1.0)
        c = SearchNode((S(3),), 1, 5, root, N=3, R=2.0)
        root.children = {7: a, 2: b, 5: c}
        assert best_child(root) is c
        c.R = 1.0
        assert best_child(root) is b

    def test_terminal_root_rejected(self):
        tree = make_tree((S(1, 0, 0, 0),))
        with pytest.raises(ValueError):
            search_step(tree.root((S(1, 0, 0, 0),)), tree)


class TestSynthesize:
    def test_already_solved(self):
        r = synthesize((S(1, 2, 3, 4),), (S(1, 2, 3, 4),), UniformPolicy(SPACE), ConstantValue())
        assert r.solved and r.program == ()

    def test_unreachable_within_depth(self):
        # two lines from cells <= 9 reach at most 9*9*9 = 729 in magnitude via imull chains
        inputs, targets = (S(9, 9, 9, 9),), (S(10**6, 9, 9, 9),)
        for depth in (1, 2):
            from autoasm.machine import solvable_within
            assert not solvable_within(inputs, targets, depth, SPACE)
        r = synthesize(inputs, targets, UniformPolicy(SPACE), ConstantValue(),
                       SearchConfig(max_depth=2, simulations_per_move=50))
        assert not r.solved and r.steps_taken == 2

    def test_solves_and_verifies(self):
        inputs, targets = (S(1, 2, 3, 4), S(0, 5, 0, 0)), (S(3, 2, 3, 4), S(5, 5, 0, 0))
        r = synthesize(inputs, targets, UniformPolicy(SPACE), HeuristicValue(),
                       SearchConfig(expansion_width=224, simulations_per_move=400))
        assert r.solved
        assert all(run(i, r.program) == t for i, t in zip(inputs, targets))
        assert r.simulator_calls > 0 and r.simulations > 0

    def test_trace(self):
        fh = io.StringIO()
        synthesize((S(1, 0, 0, 0),), (S(2, 0, 0, 0),), UniformPolicy(SPACE), Oracle(),
                   SearchConfig(expansion_width=224, simulations_per_move=50), trace=fh)
        recs = [json.loads(line) for line in fh.getvalue().splitlines()]
        assert recs[0]["depth"] == 0 and recs[0]["N"] == 50
        assert all({"depth", "action", "N", "mean"} <= set(r) for r in recs)


def test_program_loop_uses_sort_fixture():
    # the committed-line loop on a fixed script must reproduce the Sort output
    prog = parse_program("addl $4, %ebx\nsubl $4, %eax")
    assert run(S(5, 1, 7, 8), prog) == S(1, 5, 7, 8)
