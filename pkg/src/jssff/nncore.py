"""Numeric substrate: layers with hand-written backward passes, Adam, FD checks.

Every layer function accepts arbitrary leading batch dimensions, so the same
code path serves single-vector calls and batched training.  All arithmetic is
float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractViolation, ShapeError

LOG_FLOOR = 1e-12


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = math.sqrt(1.0 / fan_in)
    return rng.uniform(-s, s, size=shape)


def _check_last(x: np.ndarray, n: int, what: str):
    if x.shape[-1:] != (n,):
        raise ShapeError(f"{what}: expected trailing dim {n}, got shape {x.shape}")


# --------------------------------------------------------------------------
# linear


@dataclass
class LinearParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng, in_dim, out_dim):
        return cls(uniform_init(rng, (out_dim, in_dim), in_dim),
                   uniform_init(rng, (out_dim,), in_dim))

    @classmethod
    def zeros(cls, in_dim, out_dim):
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim))


def linear_forward(p: LinearParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_last(x, p.in_dim, "linear_forward")
    return x @ p.weight.T + p.bias


def linear_backward(p: LinearParams, x: np.ndarray, dy: np.ndarray):
    """Return ``(dx, dW, db)``; batch dimensions are summed into dW/db."""
    x = np.asarray(x, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    _check_last(x, p.in_dim, "linear_backward x")
    _check_last(dy, p.out_dim, "linear_backward dy")
    if x.shape[:-1] != dy.shape[:-1]:
        raise ShapeError(f"linear_backward: batch shapes differ {x.shape} vs {dy.shape}")
    dx = dy @ p.weight
    x2 = x.reshape(-1, p.in_dim)
    dy2 = dy.reshape(-1, p.out_dim)
    return dx, dy2.T @ x2, dy2.sum(axis=0)


# --------------------------------------------------------------------------
# embedding


@dataclass
class EmbeddingParams:
    table: np.ndarray  # (vocab, embed)

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.table.shape[1]

    @classmethod
    def init(cls, rng, vocab_size, embed_dim):
        return cls(uniform_init(rng, (vocab_size, embed_dim), embed_dim))


def _check_tokens(p: EmbeddingParams, tokens) -> np.ndarray:
    t = np.asarray(tokens)
    if not np.issubdtype(t.dtype, np.integer):
        raise IndexError(f"token indices must be integers, got dtype {t.dtype}")
    if t.size and (t.min() < 0 or t.max() >= p.vocab_size):
        raise IndexError(f"token index out of range [0, {p.vocab_size})")
    return t


def embedding_lookup(p: EmbeddingParams, tokens) -> np.ndarray:
    return p.table[_check_tokens(p, tokens)].copy()


def embedding_backward(p: EmbeddingParams, tokens, dy: np.ndarray, dtable: np.ndarray | None = None):
    """Scatter-add ``dy`` into the rows of ``dtable`` picked by ``tokens``."""
    t = _check_tokens(p, tokens)
    if dtable is None:
        dtable = np.zeros_like(p.table)
    np.add.at(dtable, t.reshape(-1), np.asarray(dy).reshape(-1, p.embed_dim))
    return dtable


# --------------------------------------------------------------------------
# LSTM

GATES = ("i", "f", "g", "o")


@dataclass
class LstmParams:
    """Gate weights stacked in i, f, g, o order along the first axis."""

    W: np.ndarray  # (4H, input)
    U: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[1]

    def gate(self, name: str):
        """Views ``(W_k, U_k, b_k)`` of one gate."""
        k = GATES.index(name)
        H = self.hidden_dim
        sl = slice(k * H, (k + 1) * H)
        return self.W[sl], self.U[sl], self.b[sl]

    @classmethod
    def init(cls, rng, input_dim, hidden_dim):
        H = hidden_dim
        return cls(uniform_init(rng, (4 * H, input_dim), H),
                   uniform_init(rng, (4 * H, H), H),
                   uniform_init(rng, (4 * H,), H))


@dataclass
class LstmCache:
    x: np.ndarray
    h: np.ndarray
    c: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray
    params_id: int


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_gates_forward(p: LstmParams, z: np.ndarray, c: np.ndarray):
    """Finish a step from pre-activations ``z`` (shape ``(..., 4H)``)."""
    H = p.hidden_dim
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:])
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    return o * tanh_c, c_new, (i, f, g, o, tanh_c)


def lstm_step(p: LstmParams, x, h, c):
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    _check_last(x, p.input_dim, "lstm_step x")
    _check_last(h, p.hidden_dim, "lstm_step h")
    _check_last(c, p.hidden_dim, "lstm_step c")
    z = x @ p.W.T + h @ p.U.T + p.b
    h_new, c_new, (i, f, g, o, tanh_c) = lstm_gates_forward(p, z, c)
    return h_new, c_new, LstmCache(x, h, c, i, f, g, o, tanh_c, id(p))


def lstm_gates_backward(cache: LstmCache, dh_new, dc_new):
    """Backprop through the gate nonlinearities; returns ``(dz, dc_prev)``."""
    do = dh_new * cache.tanh_c
    dc = dc_new + dh_new * cache.o * (1.0 - cache.tanh_c ** 2)
    di = dc * cache.g
    dg = dc * cache.i
    df = dc * cache.c
    dz = np.concatenate([
        di * cache.i * (1.0 - cache.i),
        df * cache.f * (1.0 - cache.f),
        dg * (1.0 - cache.g ** 2),
        do * cache.o * (1.0 - cache.o),
    ], axis=-1)
    return dz, dc * cache.f


def lstm_backward(p: LstmParams, cache: LstmCache, dh_new, dc_new) -> dict:
    """Gradients of one step: keys ``W, U, b, x, h, c``."""
    if cache.params_id != id(p) or cache.x.shape[-1] != p.input_dim:
        raise ContractViolation("lstm_backward: cache does not belong to these parameters")
    dz, dc_prev = lstm_gates_backward(cache, np.asarray(dh_new, float), np.asarray(dc_new, float))
    dz2 = dz.reshape(-1, dz.shape[-1])
    return {
        "W": dz2.T @ cache.x.reshape(-1, p.input_dim),
        "U": dz2.T @ cache.h.reshape(-1, p.hidden_dim),
        "b": dz2.sum(axis=0),
        "x": dz @ p.W,
        "h": dz @ p.U,
        "c": dc_prev,
    }


# --------------------------------------------------------------------------
# activations and loss


def gelu(x):
    """tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_backward(x, dy):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 1:
        raise ShapeError("softmax needs at least one logit")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(probs, target: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= target < probs.shape[-1]:
        raise IndexError(f"target {target} out of range [0, {probs.shape[-1]})")
    return float(-math.log(probs[target] + LOG_FLOOR))


def cross_entropy_backward(probs, target: int) -> np.ndarray:
    """Gradient of the loss w.r.t. the logits that produced ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= target < probs.shape[-1]:
        raise IndexError(f"target {target} out of range [0, {probs.shape[-1]})")
    d = probs.copy()
    d[target] -= 1.0
    return d


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """Update ``params`` in place with bias-corrected Adam."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.lr != 0.0:
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# --------------------------------------------------------------------------
# finite differences


def grad_check(f: Callable, params, eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients with central differences.

    ``f(params)`` must return ``(loss, grads)`` where ``grads`` mirrors
    ``params`` (a dict of arrays, or a single array).  Returns the largest
    ``|a - n| / max(1, |a|, |n|)`` over the probed coordinates.  With
    ``max_coords`` set, a random subset of that many coordinates per array
    is probed.
    """
    single = isinstance(params, np.ndarray)
    pdict = {"_": params} if single else params
    loss, grads = f(params)
    if single:
        grads = {"_": grads}
    if not math.isfinite(loss):
        raise ContractViolation("grad_check: objective is not finite")
    worst = 0.0
    for name, p in pdict.items():
        flat = p.reshape(-1)
        g = np.asarray(grads[name]).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            lp = f(params)[0]
            flat[k] = orig - eps
            lm = f(params)[0]
            flat[k] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise ContractViolation("grad_check: objective is not finite")
            num = (lp - lm) / (2.0 * eps)
            a = g[k]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
