"""Finite-difference verification of every differentiable op in the package.

Each check builds a scalar loss (a fixed random projection of the op's
output), computes the analytic gradient through the hand-written backward
pass, and compares against central differences. All checks run at small
dimensions in float64; the suite-wide tolerance is GRAD_TOL.
"""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from .nn import (
    ParamStore,
    SelfAttentionBlock,
    attention_backward,
    attention_forward,
    bce_with_logits,
    gelu_backward,
    gelu_forward,
    grad_check,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
)
from .spatial import (
    ComposeHead,
    FusionConfig,
    FusionStack,
    QueryParadigm,
    build_spatial_mask,
)
from .temporal import RefinedFlowBatch, TemporalEncoder, TemporalMask

GRAD_TOL = 1e-4
STEP = 1e-3


def _randomize(store: ParamStore, rng: np.random.Generator, scale: float = 0.25) -> None:
    """Replace every parameter (including zero/identity inits) with noise so
    no gradient path is trivially zero."""
    for name in store.names():
        store[name] = rng.normal(0.0, scale, size=store[name].shape)


def _projection(rng: np.random.Generator, shape) -> np.ndarray:
    """A fixed random projection scaled so the scalar loss stays O(1);
    a large loss magnitude would let f64 cancellation noise in the central
    difference swamp the 1e-8 relative-error guard on zero-gradient
    coordinates."""
    p = rng.normal(size=shape)
    return p / p.size


def _param_fn(store: ParamStore, name: str, run: Callable[[], float]):
    """Adapt 'loss of parameter `name`' to the grad_check interface."""

    def f(x):
        old = store[name]
        store[name] = x
        store.zero_grads()
        try:
            loss = run()
            return loss, store.grads[name].copy()
        finally:
            store[name] = old

    return f


def check_linear(rng: np.random.Generator) -> float:
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=4)
    p = _projection(rng, (5, 4))

    def wrt_x(v):
        y, cache = linear_forward(v, w, b)
        return float(np.sum(p * y)), linear_backward(cache, p)[0]

    def wrt_w(v):
        y, cache = linear_forward(x, v, b)
        return float(np.sum(p * y)), linear_backward(cache, p)[1]

    def wrt_b(v):
        y, cache = linear_forward(x, w, v)
        return float(np.sum(p * y)), linear_backward(cache, p)[2]

    return max(grad_check(f, v, STEP) for f, v in ((wrt_x, x), (wrt_w, w), (wrt_b, b)))


def check_layer_norm(rng: np.random.Generator) -> float:
    x = rng.normal(size=(4, 6))
    g = rng.normal(size=6) + 1.0
    b = rng.normal(size=6)
    p = _projection(rng, (4, 6))

    def wrt_x(v):
        y, cache = layer_norm_forward(v, g, b)
        return float(np.sum(p * y)), layer_norm_backward(cache, p)[0]

    def wrt_g(v):
        y, cache = layer_norm_forward(x, v, b)
        return float(np.sum(p * y)), layer_norm_backward(cache, p)[1]

    def wrt_b(v):
        y, cache = layer_norm_forward(x, g, v)
        return float(np.sum(p * y)), layer_norm_backward(cache, p)[2]

    return max(grad_check(f, v, STEP) for f, v in ((wrt_x, x), (wrt_g, g), (wrt_b, b)))


def check_gelu(rng: np.random.Generator) -> float:
    x = rng.normal(size=(3, 5)) * 2.0
    p = _projection(rng, (3, 5))

    def f(v):
        y, cache = gelu_forward(v)
        return float(np.sum(p * y)), gelu_backward(cache, p)

    return grad_check(f, x, STEP)


def check_attention(rng: np.random.Generator) -> float:
    n_q, n_k, d, heads = 3, 4, 8, 2
    q = rng.normal(size=(n_q, d))
    k = rng.normal(size=(n_k, d))
    v = rng.normal(size=(n_k, d))
    mask = rng.uniform(size=(n_q, n_k)) < 0.7
    mask[0] = False  # one fully-masked query row
    mask[1, 0] = True  # ensure a usable row
    p = _projection(rng, (n_q, d))

    def make(which):
        def f(val):
            args = {"q": q, "k": k, "v": v}
            args[which] = val
            out, cache = attention_forward(args["q"], args["k"], args["v"], mask, heads)
            grads = attention_backward(cache, p)
            return float(np.sum(p * out)), grads[("q", "k", "v").index(which)]

        return f

    return max(grad_check(make(w), val, STEP) for w, val in (("q", q), ("k", k), ("v", v)))


def check_bce(rng: np.random.Generator) -> float:
    logits = rng.normal(size=12) * 2.0
    targets = (rng.uniform(size=12) < 0.5).astype(float)

    def f(v):
        return bce_with_logits(v, targets)

    return grad_check(f, logits, STEP)


def check_block(rng: np.random.Generator) -> float:
    dim, heads, n = 8, 2, 5
    store = ParamStore(0)
    block = SelfAttentionBlock(store, "blk", dim, heads)
    _randomize(store, rng)
    x = rng.normal(size=(n, dim))
    mask = rng.uniform(size=(n, n)) < 0.75
    mask[2] = False  # inert row must pass through with zero gradient coupling
    np.fill_diagonal(mask[:2, :2], True)
    p = _projection(rng, (n, dim))

    def run() -> float:
        y, cache = block.forward(x, mask)
        block.backward(cache, p)
        return float(np.sum(p * y))

    def wrt_x(v):
        y, cache = block.forward(v, mask)
        dx = block.backward(cache, p)
        return float(np.sum(p * y)), dx

    worst = grad_check(wrt_x, x, STEP)
    for name in store.names():
        worst = max(worst, grad_check(_param_fn(store, name, run), store[name], STEP))
    return worst


def check_fusion_stack(rng: np.random.Generator) -> float:
    """Full depth-1 fuse at toy dims (L=4, T=3, dim=8, heads=2)."""
    l_count, t_count, dim, heads = 4, 3, 8, 2
    cfg = FusionConfig(pipe="all", depth=1, heads=heads, dim=dim)
    store = ParamStore(0)
    stack = FusionStack(store, cfg)
    _randomize(store, rng)
    l_feat = rng.normal(size=(l_count, dim))
    tf_feat = rng.normal(size=(t_count, dim))
    validity = np.array([True, True, False])
    mask = build_spatial_mask(l_count, validity)
    p = _projection(rng, (l_count, dim))

    def loss_of(lf, tf):
        stages, cache = stack.forward(lf, tf, mask)
        loss = float(np.sum(p * stages.f4))
        d_l, d_t = stack.backward(cache, p)
        return loss, d_l, d_t

    def wrt_l(v):
        loss, d_l, _ = loss_of(v, tf_feat)
        return loss, d_l

    def wrt_t(v):
        loss, _, d_t = loss_of(l_feat, v)
        return loss, d_t

    def run() -> float:
        loss, _, _ = loss_of(l_feat, tf_feat)
        return loss

    worst = max(grad_check(wrt_l, l_feat, STEP), grad_check(wrt_t, tf_feat, STEP))
    for name in store.names():
        worst = max(worst, grad_check(_param_fn(store, name, run), store[name], STEP))
    return worst


def check_temporal_encoder(rng: np.random.Generator) -> float:
    dim, heads, f_t, t_max = 8, 2, 4, 3
    store = ParamStore(0)
    enc = TemporalEncoder(store, dim, heads, f_t)
    _randomize(store, rng)
    coords = rng.uniform(-20, 20, size=(t_max, f_t, 2))
    frame_valid = rng.uniform(size=(t_max, f_t)) < 0.7
    frame_valid[0, 0] = True
    frame_valid[2] = False
    batch = RefinedFlowBatch(
        coords=coords,
        category_index=np.array([0, 1, 0]),
        frame_valid=frame_valid,
        instance_valid=frame_valid.any(axis=1),
        track_ids=("a", "b", ""),
    )
    tmask = TemporalMask(frame_valid.copy())
    p = _projection(rng, (t_max, dim))

    def run() -> float:
        tf_feat, _, cache = enc.forward(batch, tmask)
        enc.backward(cache, p)
        return float(np.sum(p * tf_feat))

    worst = 0.0
    for name in store.names():
        worst = max(worst, grad_check(_param_fn(store, name, run), store[name], STEP))
    return worst


def check_compose(rng: np.random.Generator) -> float:
    dim, rows = 8, 4
    store = ParamStore(0)
    head = ComposeHead(store, dim)
    _randomize(store, rng)
    f4 = rng.normal(size=(rows, dim))
    l_feat = rng.normal(size=(rows, dim))
    p = _projection(rng, (rows, dim))

    def make(paradigm):
        def wrt_f4(v):
            out, cache = head.forward(v, l_feat, paradigm)
            d_f4, _ = head.backward(cache, p)
            return float(np.sum(p * out)), d_f4

        def run() -> float:
            out, cache = head.forward(f4, l_feat, paradigm)
            head.backward(cache, p)
            return float(np.sum(p * out))

        worst = grad_check(wrt_f4, f4, STEP)
        for name in store.names():
            worst = max(worst, grad_check(_param_fn(store, name, run), store[name], STEP))
        return worst

    return max(make(QueryParadigm.INSTANCE_BASED), make(QueryParadigm.POINT_LEVEL))


CHECKS: Dict[str, Callable[[np.random.Generator], float]] = {
    "linear": check_linear,
    "layer_norm": check_layer_norm,
    "gelu": check_gelu,
    "attention": check_attention,
    "bce_with_logits": check_bce,
    "self_attention_block": check_block,
    "fusion_stack_depth1": check_fusion_stack,
    "temporal_encoder": check_temporal_encoder,
    "compose_head": check_compose,
}


def run_all(seed: int = 0) -> Dict[str, float]:
    """Max relative finite-difference error per op."""
    return {
        name: fn(np.random.default_rng(np.random.SeedSequence([seed, i])))
        for i, (name, fn) in enumerate(CHECKS.items())
    }
