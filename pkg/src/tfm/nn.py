"""Minimal dense compute with explicit forward/backward passes.

Everything runs in float64 on small matrices, so fidelity of the hand-written
gradients matters far more than speed. There is no autodiff graph: each op
returns `(output, cache)` and has a matching `*_backward(cache, upstream)`.

Masking convention: boolean masks are realized as an additive -1e9 bias
before the softmax, masked probabilities are then forced to exact zeros, and
a query row with no unmasked key yields an exactly-zero attention output row.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Dict, Iterable, Tuple

import numpy as np
from scipy import special
from scipy.special import ndtr

from .errors import NumericError

MASK_BIAS = -1e9
_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


def require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _named_rng(seed: int, name: str) -> np.random.Generator:
    # Keyed by (seed, name) so initialization is independent of creation order.
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), *words]))


def init_param(seed: int, name: str, shape: Tuple[int, ...], kind: str = "glorot") -> np.ndarray:
    """Deterministic initialization: a pure function of (seed, name, shape)."""
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "identity":
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ValueError(f"identity init needs a square 2-d shape, got {shape}")
        return np.eye(shape[0])
    if kind == "glorot":
        if len(shape) == 1:
            fan_in = fan_out = shape[0]
        else:
            fan_in, fan_out = shape[0], shape[-1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return _named_rng(seed, name).uniform(-limit, limit, size=shape)
    raise ValueError(f"unknown init kind {kind!r}")


class ParamStore:
    """Named float64 parameters with matching gradient slots.

    Forward/backward users must not mutate parameters while a pass is in
    flight; `sgd_step` assumes exclusive ownership.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def create(self, name: str, shape: Tuple[int, ...], kind: str = "glorot") -> np.ndarray:
        if name in self.params:
            if self.params[name].shape != tuple(shape):
                raise ValueError(
                    f"parameter {name!r} exists with shape {self.params[name].shape}, "
                    f"requested {tuple(shape)}"
                )
            return self.params[name]
        self.params[name] = init_param(self.seed, name, tuple(shape), kind)
        self.grads[name] = np.zeros(tuple(shape))
        return self.params[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=float)
        if name in self.params and self.params[name].shape != value.shape:
            raise ValueError(f"shape mismatch assigning {name!r}")
        self.params[name] = value
        self.grads.setdefault(name, np.zeros(value.shape))

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> Iterable[str]:
        return sorted(self.params)

    def add_grad(self, name: str, g: np.ndarray) -> None:
        self.grads[name] += g

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def grad_norm(self) -> float:
        total = 0.0
        for g in self.grads.values():
            total += float(np.sum(g * g))
        return float(np.sqrt(total))

    def sgd_step(self, lr: float, clip: float | None = None) -> None:
        scale = 1.0
        if clip is not None:
            norm = self.grad_norm()
            if norm > clip:
                scale = clip / norm
        for name, p in self.params.items():
            p -= lr * scale * self.grads[name]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self[k] = v


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def linear_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_backward(cache, dy):
    x, w, has_bias = cache
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0) if has_bias else None
    return dx, dw, db


def layer_norm_forward(x, gain, bias, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain + bias
    return y, (xhat, inv, gain)


def layer_norm_backward(cache, dy):
    xhat, inv, gain = cache
    n = xhat.shape[-1]
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dgain, dbias


def gelu_forward(x):
    """Exact GELU x * Phi(x); smooth, so finite-difference checks behave."""
    phi = ndtr(x)
    return x * phi, (x, phi)


def gelu_backward(cache, dy):
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) / _SQRT_2PI
    return dy * (phi + x * pdf)


def softmax_rows(z):
    """Row softmax along the last axis; rows sum to 1 exactly up to fp error."""
    if z.shape[-1] == 0:
        return z.copy()
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# masked multi-head attention
# ---------------------------------------------------------------------------


def attention_forward(q, k, v, mask, heads: int):
    """Masked scaled dot-product attention over full-width Q, K, V.

    q: (n_q, d), k/v: (n_k, d), mask: (n_q, n_k) boolean, True = may attend.
    Per head: softmax(Q Kt / sqrt(d_h) + mask bias) V. Query rows whose mask
    row is entirely False produce exactly-zero output rows.

    Key columns no query attends to are dropped before the matmuls, so the
    output is bit-identical however many all-masked keys (padding slots) the
    caller appends — their presence cannot even perturb summation order.
    """
    q = require_finite("q", q)
    k = require_finite("k", k)
    v = require_finite("v", v)
    n_q, d = q.shape
    n_k = k.shape[0]
    if k.shape != (n_k, d) or v.shape != (n_k, d):
        raise ValueError(f"inconsistent shapes q={q.shape} k={k.shape} v={v.shape}")
    if d % heads != 0:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n_q, n_k):
        raise ValueError(f"mask shape {mask.shape} != ({n_q}, {n_k})")

    keep = mask.any(axis=0)
    n_kc = int(keep.sum())
    mask_c = mask[:, keep]

    dh = d // heads
    qh = q.reshape(n_q, heads, dh).transpose(1, 0, 2)
    kh = k[keep].reshape(n_kc, heads, dh).transpose(1, 0, 2)
    vh = v[keep].reshape(n_kc, heads, dh).transpose(1, 0, 2)

    logits = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
    logits = logits + np.where(mask_c, 0.0, MASK_BIAS)
    probs = softmax_rows(logits)
    probs = np.where(mask_c, probs, 0.0)  # exact zeros, incl. fully-masked rows

    out = (probs @ vh).transpose(1, 0, 2).reshape(n_q, d)
    probs_full = np.zeros((heads, n_q, n_k))
    probs_full[:, :, keep] = probs
    return out, (qh, kh, vh, probs_full, dh, keep)


def attention_backward(cache, dout):
    """Exact reverse-mode gradients of attention_forward w.r.t. q, k, v.

    Dropped (never-attended) key columns receive exactly-zero gradients.
    """
    qh, kh, vh, probs_full, dh, keep = cache
    heads, n_q, n_k = probs_full.shape
    n_kc = kh.shape[1]
    d = heads * dh
    probs = probs_full[:, :, keep]
    dout_h = dout.reshape(n_q, heads, dh).transpose(1, 0, 2)

    dv_c = probs.transpose(0, 2, 1) @ dout_h
    dp = dout_h @ vh.transpose(0, 2, 1)
    # softmax backward; masked entries have probs == 0, so their grads vanish
    dz = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
    dz = dz / np.sqrt(dh)
    dq = dz @ kh
    dk_c = dz.transpose(0, 2, 1) @ qh

    to2d = lambda a, n: a.transpose(1, 0, 2).reshape(n, d)
    dk = np.zeros((n_k, d))
    dk[keep] = to2d(dk_c, n_kc)
    dv = np.zeros((n_k, d))
    dv[keep] = to2d(dv_c, n_kc)
    return to2d(dq, n_q), dk, dv


# ---------------------------------------------------------------------------
# layers bound to a ParamStore
# ---------------------------------------------------------------------------


class MultiHeadAttention:
    """Projection wrapper around attention_forward.

    The output projection carries no bias so that a fully-masked query row
    contributes exactly zero to the residual stream.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int):
        self.store, self.name, self.dim, self.heads = store, name, dim, heads
        store.create(f"{name}.wq", (dim, dim))
        store.create(f"{name}.bq", (dim,), "zeros")
        store.create(f"{name}.wk", (dim, dim))
        store.create(f"{name}.bk", (dim,), "zeros")
        store.create(f"{name}.wv", (dim, dim))
        store.create(f"{name}.bv", (dim,), "zeros")
        store.create(f"{name}.wo", (dim, dim))

    def forward(self, x_q, x_kv, mask):
        s, n = self.store, self.name
        q, cq = linear_forward(x_q, s[f"{n}.wq"], s[f"{n}.bq"])
        k, ck = linear_forward(x_kv, s[f"{n}.wk"], s[f"{n}.bk"])
        v, cv = linear_forward(x_kv, s[f"{n}.wv"], s[f"{n}.bv"])
        attn, ca = attention_forward(q, k, v, mask, self.heads)
        y, co = linear_forward(attn, s[f"{n}.wo"])
        return y, (cq, ck, cv, ca, co)

    def backward(self, cache, dy):
        s, n = self.store, self.name
        cq, ck, cv, ca, co = cache
        dattn, dwo, _ = linear_backward(co, dy)
        s.add_grad(f"{n}.wo", dwo)
        dq, dk, dv = attention_backward(ca, dattn)
        dx_q, dwq, dbq = linear_backward(cq, dq)
        dxk, dwk, dbk = linear_backward(ck, dk)
        dxv, dwv, dbv = linear_backward(cv, dv)
        s.add_grad(f"{n}.wq", dwq)
        s.add_grad(f"{n}.bq", dbq)
        s.add_grad(f"{n}.wk", dwk)
        s.add_grad(f"{n}.bk", dbk)
        s.add_grad(f"{n}.wv", dwv)
        s.add_grad(f"{n}.bv", dbv)
        return dx_q, dxk + dxv


class SelfAttentionBlock:
    """Pre-LN residual block: masked self-attention then a gated feed-forward.

    Rows whose mask row is entirely False pass through unchanged: their
    attention contribution is zero by convention and the feed-forward
    sublayer is skipped for them.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, hidden: int | None = None):
        self.store, self.name, self.dim = store, name, dim
        self.hidden = 2 * dim if hidden is None else hidden
        store.create(f"{name}.ln_attn.g", (dim,), "ones")
        store.create(f"{name}.ln_attn.b", (dim,), "zeros")
        self.attn = MultiHeadAttention(store, f"{name}.attn", dim, heads)
        store.create(f"{name}.ln_ffn.g", (dim,), "ones")
        store.create(f"{name}.ln_ffn.b", (dim,), "zeros")
        store.create(f"{name}.ffn.w1", (dim, self.hidden))
        store.create(f"{name}.ffn.b1", (self.hidden,), "zeros")
        store.create(f"{name}.ffn.w2", (self.hidden, dim))
        store.create(f"{name}.ffn.b2", (dim,), "zeros")

    def forward(self, x, mask):
        s, n = self.store, self.name
        active = np.asarray(mask, dtype=bool).any(axis=1)

        h, c_ln1 = layer_norm_forward(x, s[f"{n}.ln_attn.g"], s[f"{n}.ln_attn.b"])
        a, c_attn = self.attn.forward(h, h, mask)
        y = x + a

        f_in, c_ln2 = layer_norm_forward(y, s[f"{n}.ln_ffn.g"], s[f"{n}.ln_ffn.b"])
        u, c_l1 = linear_forward(f_in, s[f"{n}.ffn.w1"], s[f"{n}.ffn.b1"])
        g, c_g = gelu_forward(u)
        f_out, c_l2 = linear_forward(g, s[f"{n}.ffn.w2"], s[f"{n}.ffn.b2"])
        z = y + np.where(active[:, None], f_out, 0.0)
        return z, (c_ln1, c_attn, c_ln2, c_l1, c_g, c_l2, active)

    def backward(self, cache, dz):
        s, n = self.store, self.name
        c_ln1, c_attn, c_ln2, c_l1, c_g, c_l2, active = cache

        df_out = np.where(active[:, None], dz, 0.0)
        dg, dw2, db2 = linear_backward(c_l2, df_out)
        s.add_grad(f"{n}.ffn.w2", dw2)
        s.add_grad(f"{n}.ffn.b2", db2)
        du = gelu_backward(c_g, dg)
        df_in, dw1, db1 = linear_backward(c_l1, du)
        s.add_grad(f"{n}.ffn.w1", dw1)
        s.add_grad(f"{n}.ffn.b1", db1)
        dy_ln, dg2, db2n = layer_norm_backward(c_ln2, df_in)
        s.add_grad(f"{n}.ln_ffn.g", dg2)
        s.add_grad(f"{n}.ln_ffn.b", db2n)
        dy = dz + dy_ln

        dxq, dxkv = self.attn.backward(c_attn, dy)
        dh = dxq + dxkv
        dx_ln, dg1, db1n = layer_norm_backward(c_ln1, dh)
        s.add_grad(f"{n}.ln_attn.g", dg1)
        s.add_grad(f"{n}.ln_attn.b", db1n)
        return dy + dx_ln


# ---------------------------------------------------------------------------
# losses and checking
# ---------------------------------------------------------------------------


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy; returns (loss, dlogits)."""
    z = np.asarray(logits, dtype=float)
    y = np.asarray(targets, dtype=float)
    # log(1 + e^z) computed stably
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    p = special.expit(z)
    return loss, (p - y) / z.size


def grad_check(f: Callable[[np.ndarray], Tuple[float, np.ndarray]], point, h: float = 1e-3) -> float:
    """Worst relative error between analytic and central-difference gradients.

    `f(x)` must return `(scalar_loss, grad_like_x)` and be pure. Relative
    error per coordinate is |num - ana| / (|num| + |ana| + 1e-8).
    """
    x = np.array(point, dtype=float)
    _, ana = f(x)
    ana = np.asarray(ana, dtype=float)
    worst = 0.0
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        num = (f(xp)[0] - f(xm)[0]) / (2.0 * h)
        err = abs(num - ana[idx]) / (abs(num) + abs(ana[idx]) + 1e-8)
        worst = max(worst, float(err))
        it.iternext()
    return worst
