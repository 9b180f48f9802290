"""Policy and value networks with hand-written reverse-mode gradients.

Everything is float64 numpy. A network is a config plus an ordered dict of
parameter arrays; gradients come back as dicts with the same keys.

Policy: value-id embedding -> concatenation -> ``layers`` x (FC + tanh) task
encoder -> GRU decoder unrolled for exactly three slots (opcode, src, dst)
with a shared 22-way output projection and per-slot legality masks.

Value: an encoder of the same shape -> FC -> sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ..machine import Instruction, SpaceConfig
from .vocab import (
    NUM_VALUE_IDS,
    START_TOKEN,
    VOCAB_SIZE,
    action_tokens,
    slot_masks,
    tokens_instruction,
)

Params = dict  # name -> np.ndarray, insertion order is the declaration order


@dataclass(frozen=True)
class NetConfig:
    pairs: int = 2
    num_registers: int = 4
    ram: bool = False
    d_emb: int = 16
    hidden: int = 128
    layers: int = 5
    d_dec: int = 16

    @property
    def space(self) -> SpaceConfig:
        return SpaceConfig(self.num_registers, self.ram)

    @property
    def cells(self) -> int:
        return self.space.cells

    @property
    def n_tokens(self) -> int:
        return self.pairs * 2 * self.cells

    def with_(self, **kw) -> "NetConfig":
        return replace(self, **kw)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


EMBED_SCALES = (2.0, 8.0, 32.0)


def numeric_embedding(d: int, rng: np.random.Generator) -> np.ndarray:
    """Initial value embedding laid out on a number line at a few scales.

    Column j holds value / EMBED_SCALES[j], so sums and differences of cells
    are linear in the first layer's input. Remaining columns start at zero
    and the two overflow ids get random rows.
    """
    v = np.arange(NUM_VALUE_IDS - 2, dtype=np.float64) - 128.0
    emb = np.zeros((NUM_VALUE_IDS - 2, d))
    for j, scale in enumerate(EMBED_SCALES[:d]):
        emb[:, j] = v / scale
    return np.concatenate([emb, rng.normal(0.0, 1.0, size=(2, d))], axis=0)


def _encoder_params(cfg: NetConfig, rng: np.random.Generator) -> Params:
    p: Params = {"emb": numeric_embedding(cfg.d_emb, rng)}
    width = cfg.n_tokens * cfg.d_emb
    for i in range(1, cfg.layers + 1):
        p[f"W{i}"] = _glorot(rng, width, cfg.hidden)
        p[f"b{i}"] = np.zeros(cfg.hidden)
        width = cfg.hidden
    return p


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-probabilities with masked entries at exactly -inf."""
    z = np.where(mask, logits, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def tempered_probs(logits: np.ndarray, mask: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if not (np.isfinite(temperature) and temperature > 0):
        raise ValueError("temperature must be finite and > 0")
    return np.exp(masked_log_softmax(np.asarray(logits, dtype=np.float64) / temperature, mask))


def entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


# --- encoder ---------------------------------------------------------------------

def encoder_forward(p: Params, cfg: NetConfig, ids: np.ndarray):
    ids = np.atleast_2d(ids)
    if ids.shape[1] != cfg.n_tokens:
        raise ValueError(f"encoding has {ids.shape[1]} ids, network expects {cfg.n_tokens}")
    x = p["emb"][ids].reshape(ids.shape[0], -1)
    acts = [x]
    for i in range(1, cfg.layers + 1):
        x = np.tanh(x @ p[f"W{i}"] + p[f"b{i}"])
        acts.append(x)
    return x, (ids, acts)


def encoder_backward(p: Params, cfg: NetConfig, cache, dh: np.ndarray, grads: Params) -> None:
    ids, acts = cache
    dx = dh
    for i in range(cfg.layers, 0, -1):
        out, inp = acts[i], acts[i - 1]
        da = dx * (1.0 - out * out)
        grads[f"W{i}"] += inp.T @ da
        grads[f"b{i}"] += da.sum(axis=0)
        dx = da @ p[f"W{i}"].T
    np.add.at(grads["emb"], ids, dx.reshape(ids.shape[0], ids.shape[1], -1))


# --- GRU cell --------------------------------------------------------------------

def gru_forward(p: Params, u: np.ndarray, g: np.ndarray):
    h = g.shape[1]
    xg = u @ p["gru_Wx"] + p["gru_bx"]
    hg = g @ p["gru_Wh"] + p["gru_bh"]
    r = sigmoid(xg[:, :h] + hg[:, :h])
    z = sigmoid(xg[:, h:2 * h] + hg[:, h:2 * h])
    hn = hg[:, 2 * h:]
    n = np.tanh(xg[:, 2 * h:] + r * hn)
    g_new = (1.0 - z) * n + z * g
    return g_new, (u, g, r, z, n, hn)


def gru_backward(p: Params, cache, dg_new: np.ndarray, grads: Params):
    u, g, r, z, n, hn = cache
    dn = dg_new * (1.0 - z)
    dz = dg_new * (g - n)
    dg = dg_new * z
    dan = dn * (1.0 - n * n)
    dar = dan * hn * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    dx_gates = np.concatenate([dar, daz, dan], axis=1)
    dh_gates = np.concatenate([dar, daz, dan * r], axis=1)
    grads["gru_Wx"] += u.T @ dx_gates
    grads["gru_bx"] += dx_gates.sum(axis=0)
    grads["gru_Wh"] += g.T @ dh_gates
    grads["gru_bh"] += dh_gates.sum(axis=0)
    du = dx_gates @ p["gru_Wx"].T
    dg = dg + dh_gates @ p["gru_Wh"].T
    return du, dg


# --- networks --------------------------------------------------------------------

class Network:
    kind = "network"

    def __init__(self, config: NetConfig, params: Params):
        self.config = config
        self.params = params

    def zeros_like(self) -> Params:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self):
        return type(self)(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


class PolicyNet(Network):
    kind = "policy"

    @classmethod
    def init(cls, config: NetConfig, rng: np.random.Generator) -> "PolicyNet":
        p = _encoder_params(config, rng)
        h = config.hidden
        p["dec_emb"] = rng.normal(0.0, 1.0, size=(VOCAB_SIZE + 1, config.d_dec))
        p["gru_Wx"] = _glorot(rng, config.d_dec, 3 * h)
        p["gru_Wh"] = _glorot(rng, h, 3 * h)
        p["gru_bx"] = np.zeros(3 * h)
        p["gru_bh"] = np.zeros(3 * h)
        p["out_W"] = _glorot(rng, h, VOCAB_SIZE)
        p["out_b"] = np.zeros(VOCAB_SIZE)
        return cls(config, p)

    # -- decoding helpers
    def _masks(self, tokens: np.ndarray) -> list[np.ndarray]:
        m0, m1, m2 = slot_masks(self.config.space)
        b = tokens.shape[0]
        return [np.broadcast_to(m0, (b, VOCAB_SIZE)), np.broadcast_to(m1, (b, VOCAB_SIZE)),
                m2[tokens[:, 0], tokens[:, 1]]]

    def _logits(self, g: np.ndarray) -> np.ndarray:
        return g @ self.params["out_W"] + self.params["out_b"]

    def _step(self, tok_in: np.ndarray, g: np.ndarray):
        return gru_forward(self.params, self.params["dec_emb"][tok_in], g)

    def nll(self, ids: np.ndarray, tokens: np.ndarray, coef: np.ndarray, want_grad: bool = True):
        """Return (sum_b coef_b * -log pi(tokens_b | ids_b), grads).

        Log-probabilities are summed over the three slots and use teacher
        forcing (slot inputs are the given tokens).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        coef = np.asarray(coef, dtype=np.float64)
        b = tokens.shape[0]
        g, enc_cache = encoder_forward(self.params, self.config, ids)
        masks = self._masks(tokens)
        inputs = [np.full(b, START_TOKEN), tokens[:, 0], tokens[:, 1]]
        rows = np.arange(b)
        loss = 0.0
        caches = []
        for t in range(3):
            g, gcache = self._step(inputs[t], g)
            logp = masked_log_softmax(self._logits(g), masks[t])
            loss -= float(np.dot(coef, logp[rows, tokens[:, t]]))
            caches.append((g, gcache, logp))
        if not want_grad:
            return loss, None
        grads = self.zeros_like()
        dg_next = np.zeros_like(g)
        for t in (2, 1, 0):
            g_t, gcache, logp = caches[t]
            dlogits = np.exp(logp)
            dlogits[rows, tokens[:, t]] -= 1.0
            dlogits *= coef[:, None]
            grads["out_W"] += g_t.T @ dlogits
            grads["out_b"] += dlogits.sum(axis=0)
            dg = dg_next + dlogits @ self.params["out_W"].T
            du, dg_next = gru_backward(self.params, gcache, dg, grads)
            np.add.at(grads["dec_emb"], inputs[t], du)
        encoder_backward(self.params, self.config, enc_cache, dg_next, grads)
        return loss, grads

    def slot_distributions(self, ids: np.ndarray, prefix: Sequence[int] | None = None, temperature: float = 1.0):
        """Three masked distributions for a single encoding.

        Slot inputs come from ``prefix`` (opcode, src) when given, otherwise
        from the most likely token of the previous slot.
        """
        m0, m1, m2 = slot_masks(self.config.space)
        g, _ = encoder_forward(self.params, self.config, ids)
        dists, chosen = [], []
        tok_in = np.array([START_TOKEN])
        for t in range(3):
            g, _ = self._step(tok_in, g)
            mask = (m0, m1, m2[chosen[0], chosen[1]] if t == 2 else None)[t]
            probs = tempered_probs(self._logits(g)[0], mask, temperature)
            dists.append(probs)
            tok = int(prefix[t]) if prefix is not None and t < len(prefix) else int(np.argmax(probs))
            chosen.append(tok)
            tok_in = np.array([tok])
        return dists

    def sample(self, ids: np.ndarray, temperature: float, rng: np.random.Generator | None, greedy: bool = False):
        """Sequentially sample (B, 3) tokens at ``temperature``.

        Returns tokens, log pi at temperature 1, and the per-step entropy of
        the tempered slot distributions (summed over slots). ``greedy`` takes
        the argmax of every slot instead of sampling.
        """
        ids = np.atleast_2d(ids)
        b = ids.shape[0]
        m0, m1, m2 = slot_masks(self.config.space)
        g, _ = encoder_forward(self.params, self.config, ids)
        tokens = np.zeros((b, 3), dtype=np.int64)
        logp = np.zeros(b)
        ent = np.zeros(b)
        rows = np.arange(b)
        tok_in = np.full(b, START_TOKEN)
        for t in range(3):
            g, _ = self._step(tok_in, g)
            logits = self._logits(g)
            mask = (np.broadcast_to(m0, logits.shape), np.broadcast_to(m1, logits.shape),
                    m2[tokens[:, 0], tokens[:, 1]] if t == 2 else None)[t]
            probs = tempered_probs(logits, mask, temperature)
            ent += entropy(probs)
            if greedy:
                tok = np.argmax(probs, axis=1)
            else:
                cdf = np.cumsum(probs, axis=1)
                u = rng.random(b)[:, None] * cdf[:, -1:]
                tok = np.minimum((cdf <= u).sum(axis=1), VOCAB_SIZE - 1)
                # guard against landing on a zero-probability tail entry
                tok = np.where(mask[rows, tok], tok, np.argmax(probs, axis=1))
            tokens[:, t] = tok
            logp += masked_log_softmax(logits, mask)[rows, tok]
            tok_in = tok
        return tokens, logp, ent

    def draw(self, ids: np.ndarray, temperature: float, rng: np.random.Generator) -> tuple[int, int, int]:
        """Sample one line for a single encoding.

        Same distribution as ``sample`` but on 1-D vectors and without the
        log-probability and entropy bookkeeping, for search rollouts.
        """
        p, cfg = self.params, self.config
        m0, m1, m2 = slot_masks(cfg.space)
        x = p["emb"][ids].ravel()
        for i in range(1, cfg.layers + 1):
            x = np.tanh(x @ p[f"W{i}"] + p[f"b{i}"])
        g, h, tok = x, cfg.hidden, START_TOKEN
        out = []
        for t in range(3):
            xg = p["dec_emb"][tok] @ p["gru_Wx"] + p["gru_bx"]
            hg = g @ p["gru_Wh"] + p["gru_bh"]
            rz = sigmoid(xg[:2 * h] + hg[:2 * h])
            n = np.tanh(xg[2 * h:] + rz[:h] * hg[2 * h:])
            g = n + rz[h:] * (g - n)
            mask = m0 if t == 0 else m1 if t == 1 else m2[out[0], out[1]]
            logits = np.where(mask, (g @ p["out_W"] + p["out_b"]) / temperature, -np.inf)
            cdf = np.cumsum(np.exp(logits - logits.max()))
            tok = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), VOCAB_SIZE - 1))
            out.append(tok)
        return out[0], out[1], out[2]

    def action_probs(self, ids: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        """Joint probability of every legal action, shape (B, A).

        Columns follow ``enumerate_actions(config.space)``. Each slot is
        tempered separately, matching ``sample``.
        """
        if not np.isfinite(temperature) or temperature <= 0:
            raise ValueError(f"temperature must be finite and > 0, got {temperature}")
        inv = 1.0 / temperature
        ids = np.atleast_2d(ids)
        b = ids.shape[0]
        space = self.config.space
        m0, m1, m2 = slot_masks(space)
        ops = np.flatnonzero(m0)
        srcs = np.flatnonzero(m1)
        g, _ = encoder_forward(self.params, self.config, ids)
        g1, _ = self._step(np.full(b, START_TOKEN), g)
        p0 = np.exp(masked_log_softmax(self._logits(g1) * inv, m0))  # (b, V)
        no = len(ops)
        g1r = np.repeat(g1, no, axis=0)
        g2, _ = self._step(np.tile(ops, b), g1r)
        p1 = np.exp(masked_log_softmax(self._logits(g2) * inv, m1)).reshape(b, no, VOCAB_SIZE)
        ns = len(srcs)
        g2r = np.repeat(g2, ns, axis=0)
        op_idx = np.repeat(np.tile(ops, b), ns)
        src_idx = np.tile(srcs, b * no)
        g3, _ = self._step(src_idx, g2r)
        p2 = np.exp(masked_log_softmax(self._logits(g3) * inv, m2[op_idx, src_idx])).reshape(b, no, ns, VOCAB_SIZE)
        at = action_tokens(space)
        op_pos = np.searchsorted(ops, at[:, 0])
        src_pos = np.searchsorted(srcs, at[:, 1])
        return p0[:, at[:, 0]] * p1[:, op_pos, at[:, 1]] * p2[:, op_pos, src_pos, at[:, 2]]


class ValueNet(Network):
    kind = "value"

    @classmethod
    def init(cls, config: NetConfig, rng: np.random.Generator) -> "ValueNet":
        p = _encoder_params(config, rng)
        p["v_w"] = np.zeros(config.hidden)
        p["v_b"] = np.zeros(1)
        return cls(config, p)

    def _forward(self, ids):
        h, cache = encoder_forward(self.params, self.config, ids)
        return sigmoid(h @ self.params["v_w"] + self.params["v_b"][0]), h, cache

    def predict(self, ids: np.ndarray) -> np.ndarray:
        v, _, _ = self._forward(ids)
        # keep strictly inside (0, 1) even when the sigmoid saturates
        return np.clip(v, np.finfo(float).tiny, np.nextafter(1.0, 0.0))

    def mse(self, ids: np.ndarray, targets: np.ndarray, want_grad: bool = True):
        targets = np.asarray(targets, dtype=np.float64)
        v, h, cache = self._forward(ids)
        err = v - targets
        loss = float(np.mean(err * err))
        if not want_grad:
            return loss, None
        grads = self.zeros_like()
        da = (2.0 / len(targets)) * err * v * (1.0 - v)
        grads["v_w"] += h.T @ da
        grads["v_b"] += da.sum()
        encoder_backward(self.params, self.config, cache, np.outer(da, self.params["v_w"]), grads)
        return loss, grads


# --- public API --------------------------------------------------------------------

def policy_forward(net: PolicyNet, enc: np.ndarray, prefix: Sequence[int] | None = None):
    """(opcode, src, dst) probability vectors over the 22 tokens."""
    return net.slot_distributions(enc, prefix)


def value_forward(net: ValueNet, enc: np.ndarray) -> float:
    return float(net.predict(enc)[0])


def sample_action(net: PolicyNet, enc: np.ndarray, temperature: float, rng: np.random.Generator) -> tuple[Instruction, float]:
    tokens, logp, _ = net.sample(enc, temperature, rng)
    return tokens_instruction(tokens[0]), float(logp[0])


def _as_tokens(actions) -> np.ndarray:
    from .vocab import instruction_tokens

    arr = [instruction_tokens(a) if isinstance(a, Instruction) else tuple(a) for a in actions]
    return np.asarray(arr, dtype=np.int64).reshape(-1, 3)


def loss_imitation(net: PolicyNet, ids: np.ndarray, gold, want_grad: bool = True):
    """Mean negative log-likelihood of the gold line (summed over slots)."""
    tokens = _as_tokens(gold)
    n = len(tokens)
    return net.nll(ids, tokens, np.full(n, 1.0 / n), want_grad)


def pg_coefficients(episode_index: np.ndarray, returns: np.ndarray, n_episodes: int, per_step: bool = False) -> np.ndarray:
    """Per-step weights for the policy-gradient surrogate.

    Episode-level form: every step of episode i gets G_i / n where G_i is the
    sum of that episode's discounted returns. The per-step form weights each
    log-prob by its own return.
    """
    returns = np.asarray(returns, dtype=np.float64)
    episode_index = np.asarray(episode_index, dtype=np.int64)
    if per_step:
        return returns / n_episodes
    totals = np.bincount(episode_index, weights=returns, minlength=n_episodes)
    return totals[episode_index] / n_episodes


def loss_policy_gradient(net: PolicyNet, ids: np.ndarray, actions, episode_index, returns,
                         n_episodes: int | None = None, per_step: bool = False, want_grad: bool = True):
    """-(1/n) sum_i G_i * sum_t log pi(a_t | s_t) over n episodes."""
    tokens = _as_tokens(actions)
    episode_index = np.asarray(episode_index, dtype=np.int64)
    if n_episodes is None:
        n_episodes = int(episode_index.max()) + 1 if len(episode_index) else 1
    coef = pg_coefficients(episode_index, returns, n_episodes, per_step)
    return net.nll(ids, tokens, coef, want_grad)


def add_grads(a: Params | None, b: Params | None, scale: float = 1.0) -> Params | None:
    if a is None:
        return None if b is None else {k: scale * v for k, v in b.items()}
    if b is None:
        return a
    return {k: a[k] + scale * b[k] for k in a}


def loss_hybrid(net: PolicyNet, rl_batch: dict, im_batch: dict, lam: float, want_grad: bool = True):
    """L_rl + lam * L_im; batches are keyword dicts for the two losses."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    l_rl, g_rl = loss_policy_gradient(net, want_grad=want_grad, **rl_batch) if rl_batch else (0.0, None)
    l_im, g_im = loss_imitation(net, want_grad=want_grad, **im_batch) if im_batch and lam > 0 else (0.0, None)
    return l_rl + lam * l_im, add_grads(g_rl, g_im, lam) if want_grad else None


def loss_value(net: ValueNet, ids: np.ndarray, returns, want_grad: bool = True):
    return net.mse(ids, returns, want_grad)
