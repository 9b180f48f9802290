"""Central finite differences for the hand-written backprop."""

import numpy as np

from autoasm.machine import MachineState, enumerate_actions
from autoasm.nn.nets import NetConfig, PolicyNet, ValueNet, loss_hybrid, loss_imitation, loss_policy_gradient, loss_value
from autoasm.nn.vocab import encode_batch

SMALL = NetConfig(pairs=2, num_registers=2, ram=False, d_emb=4, hidden=8, layers=5, d_dec=4)


def random_batch(cfg: NetConfig, n: int, rng):
    def states():
        return tuple(MachineState(tuple(int(v) for v in rng.integers(-20, 20, cfg.num_registers)),
                                  tuple(int(v) for v in rng.integers(-20, 20, 4)) if cfg.ram else None)
                     for _ in range(cfg.pairs))

    ids = encode_batch([states() for _ in range(n)], [states() for _ in range(n)])
    actions = enumerate_actions(cfg.space)
    gold = [actions[i] for i in rng.integers(len(actions), size=n)]
    return ids, gold


def loss_closures(seed=0):
    """(name, net, f(want_grad) -> (loss, grads)) for the four losses."""
    rng = np.random.default_rng(seed)
    pol = PolicyNet.init(SMALL, rng)
    val = ValueNet.init(SMALL, rng)
    # move the value head off zero so its gradient is not trivially symmetric
    for k in val.params:
        val.params[k] = val.params[k] + rng.normal(0, 0.3, size=val.params[k].shape)
    ids, gold = random_batch(SMALL, 6, rng)
    ep = np.array([0, 0, 1, 1, 1, 2])
    ret = rng.uniform(0, 1, size=6)
    rl = dict(ids=ids, actions=gold, episode_index=ep, returns=ret, n_episodes=3)
    im = dict(ids=ids, gold=gold)
    targets = rng.uniform(0, 1, size=6)
    return [
        ("imitation", pol, lambda w: loss_imitation(pol, ids, gold, want_grad=w)),
        ("policy_gradient", pol, lambda w: loss_policy_gradient(pol, want_grad=w, **rl)),
        ("hybrid", pol, lambda w: loss_hybrid(pol, rl, im, 0.7, want_grad=w)),
        ("value", val, lambda w: loss_value(val, ids, targets, want_grad=w)),
    ]


def check(net, fn, n_samples, rng, h=1e-5):
    """Max relative error over ``n_samples`` randomly chosen parameters."""
    _, grads = fn(True)
    keys = list(net.params)
    sizes = np.array([net.params[k].size for k in keys])
    worst = 0.0
    for _ in range(n_samples):
        k = keys[rng.choice(len(keys), p=sizes / sizes.sum())]
        flat = net.params[k].reshape(-1)
        i = int(rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + h
        up = fn(False)[0]
        flat[i] = old - h
        down = fn(False)[0]
        flat[i] = old
        num = (up - down) / (2 * h)
        ana = grads[k].reshape(-1)[i]
        denom = max(abs(num) + abs(ana), 1e-6)
        worst = max(worst, abs(num - ana) / denom)
    return worst
