"""Hand-written layers: parameter store, forwards, masking, serialization."""

from __future__ import annotations

import io
import math

import numpy as np
import pytest

from tfm import tensorio
from tfm.errors import InputError, NumericError
from tfm.nn import (
    MASK_BIAS,
    MultiHeadAttention,
    ParamStore,
    SelfAttentionBlock,
    attention_backward,
    attention_forward,
    bce_with_logits,
    gelu_forward,
    grad_check,
    init_param,
    layer_norm_forward,
    linear_forward,
    require_finite,
    softmax_rows,
)


# ---------------------------------------------------------------------------
# ParamStore / init
# ---------------------------------------------------------------------------


def test_init_param_kinds():
    assert np.all(init_param(0, "z", (3, 2), "zeros") == 0.0)
    assert np.all(init_param(0, "o", (4,), "ones") == 1.0)
    assert np.array_equal(init_param(0, "i", (5, 5), "identity"), np.eye(5))
    g = init_param(0, "g", (64, 32), "glorot")
    limit = math.sqrt(6.0 / (64 + 32))
    assert np.abs(g).max() <= limit
    assert np.abs(g).std() > 0.0


def test_init_param_identity_needs_square():
    with pytest.raises(ValueError):
        init_param(0, "i", (3, 4), "identity")
    with pytest.raises(ValueError):
        init_param(0, "k", (3,), "unknown-kind")


def test_init_is_keyed_by_seed_and_name_not_order():
    a = ParamStore(5)
    a.create("x", (3, 3))
    a.create("y", (3, 3))
    b = ParamStore(5)
    b.create("y", (3, 3))
    b.create("x", (3, 3))
    assert np.array_equal(a["x"], b["x"])
    assert np.array_equal(a["y"], b["y"])
    c = ParamStore(6)
    c.create("x", (3, 3))
    assert not np.array_equal(a["x"], c["x"])


def test_store_create_is_idempotent_and_checks_shape():
    store = ParamStore(0)
    first = store.create("w", (2, 2))
    again = store.create("w", (2, 2))
    assert first is again
    with pytest.raises(ValueError):
        store.create("w", (3, 3))


def test_store_grad_accumulation_and_sgd_clip():
    store = ParamStore(0)
    store["w"] = np.zeros(4)
    store.add_grad("w", np.full(4, 1.5))
    store.add_grad("w", np.full(4, 1.5))
    assert store.grad_norm() == pytest.approx(6.0)
    store.sgd_step(lr=1.0, clip=3.0)  # norm 6 -> scaled by 0.5
    assert np.allclose(store["w"], -1.5)


def test_store_state_dict_round_trip():
    store = ParamStore(3)
    store.create("a", (2, 3))
    store.create("b", (4,), "zeros")
    state = store.state_dict()
    other = ParamStore(9)
    other.create("a", (2, 3))
    other.create("b", (4,))
    other.load_state_dict(state)
    assert np.array_equal(other["a"], store["a"])
    assert np.array_equal(other["b"], store["b"])


def test_require_finite():
    with pytest.raises(NumericError):
        require_finite("x", np.array([1.0, np.nan]))
    out = require_finite("x", [1, 2])
    assert out.dtype == float


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def test_linear_known_values():
    y, _ = linear_forward(np.array([[1.0, 2.0]]), np.array([[1.0, 0.0], [0.0, 3.0]]), np.array([10.0, 20.0]))
    assert np.allclose(y, [[11.0, 26.0]])


def test_layer_norm_standardizes(rng):
    x = rng.normal(size=(6, 16)) * 4.0 + 3.0
    y, _ = layer_norm_forward(x, np.ones(16), np.zeros(16))
    assert np.abs(y.mean(axis=-1)).max() < 1e-12
    assert np.abs(y.std(axis=-1) - 1.0).max() < 1e-3  # eps-limited


def test_gelu_special_points():
    y, _ = gelu_forward(np.array([0.0, 10.0, -10.0]))
    assert y[0] == 0.0
    assert y[1] == pytest.approx(10.0, abs=1e-6)
    assert y[2] == pytest.approx(0.0, abs=1e-6)


def test_softmax_rows_stable_and_normalized(rng):
    z = rng.normal(size=(5, 7)) * 3.0
    z[0] += 1e4  # huge magnitudes must not overflow
    p = softmax_rows(z)
    assert np.isfinite(p).all()
    assert np.allclose(p.sum(axis=-1), 1.0)


def test_bce_matches_naive_and_is_stable(rng):
    z = rng.normal(size=20) * 2.0
    y = (rng.uniform(size=20) < 0.5).astype(float)
    loss, grad = bce_with_logits(z, y)
    p = 1.0 / (1.0 + np.exp(-z))
    naive = float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))
    assert loss == pytest.approx(naive, rel=1e-12)
    assert np.allclose(grad, (p - y) / z.size)

    extreme, _ = bce_with_logits(np.array([1000.0, -1000.0]), np.array([0.0, 1.0]))
    assert math.isfinite(extreme)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def test_attention_two_token_hand_oracle():
    """Single head, two keys: probs = softmax of q.k / sqrt(d); out = p @ v."""
    q = np.array([[1.0, 0.0]])
    k = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = np.array([[10.0, 0.0], [0.0, 10.0]])
    mask = np.ones((1, 2), dtype=bool)
    out, _ = attention_forward(q, k, v, mask, heads=1)
    s = 1.0 / math.sqrt(2.0)
    e = np.exp(np.array([s, 0.0]) - s)
    p = e / e.sum()
    assert np.allclose(out, [p @ v], atol=1e-12)


def test_attention_fully_masked_row_is_exact_zero(rng):
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    mask = np.ones((3, 5), dtype=bool)
    mask[1] = False
    out, cache = attention_forward(q, k, v, mask, heads=2)
    assert np.all(out[1] == 0.0)
    probs = cache[3]
    assert np.all(probs[:, 1, :] == 0.0)
    # gradient through the dead row vanishes identically
    dq, dk, dv = attention_backward(cache, np.ones_like(out))
    assert np.all(dq[1] == 0.0)


def test_attention_masked_probs_are_exact_zero(rng):
    q, k, v = rng.normal(size=(4, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    mask = rng.uniform(size=(4, 4)) < 0.5
    mask[0, 0] = True
    out, cache = attention_forward(q, k, v, mask, heads=1)
    probs = cache[3]
    assert np.all(probs[0][~mask] == 0.0)
    sums = probs[0].sum(axis=-1)
    rows_with_keys = mask.any(axis=1)
    assert np.allclose(sums[rows_with_keys], 1.0)


def test_attention_masked_key_content_is_irrelevant(rng):
    q = rng.normal(size=(3, 4))
    k = rng.normal(size=(5, 4))
    v = rng.normal(size=(5, 4))
    mask = np.ones((3, 5), dtype=bool)
    mask[:, 2] = False
    out1, _ = attention_forward(q, k, v, mask, heads=2)
    k2, v2 = k.copy(), v.copy()
    k2[2] = 1e3
    v2[2] = -1e3
    out2, _ = attention_forward(q, k2, v2, mask, heads=2)
    assert np.array_equal(out1, out2)


def test_attention_shape_validation(rng):
    q = rng.normal(size=(2, 4))
    with pytest.raises(ValueError):
        attention_forward(q, q, q, np.ones((2, 3), dtype=bool), heads=2)
    with pytest.raises(ValueError):
        attention_forward(q, q, q, np.ones((2, 2), dtype=bool), heads=3)
    with pytest.raises(NumericError):
        attention_forward(q * np.nan, q, q, np.ones((2, 2), dtype=bool), heads=2)


def test_mha_output_projection_has_no_bias():
    store = ParamStore(0)
    MultiHeadAttention(store, "attn", 8, 2)
    assert "attn.wo" in store
    assert "attn.bo" not in store


def test_block_fully_masked_rows_pass_through(rng):
    store = ParamStore(0)
    block = SelfAttentionBlock(store, "blk", 8, 2)
    for name in store.names():
        store[name] = rng.normal(0.0, 0.4, size=store[name].shape)
    x = rng.normal(size=(5, 8))
    mask = rng.uniform(size=(5, 5)) < 0.6
    mask[2] = False
    mask[4] = False
    np.fill_diagonal(mask[:2, :2], True)
    y, _ = block.forward(x, mask)
    assert np.array_equal(y[2], x[2])
    assert np.array_equal(y[4], x[4])
    assert not np.array_equal(y[0], x[0])


def test_mask_bias_is_additive_minus_1e9():
    assert MASK_BIAS == -1e9


# ---------------------------------------------------------------------------
# grad_check harness itself
# ---------------------------------------------------------------------------


def test_grad_check_accepts_true_gradient():
    a = np.array([1.0, -2.0, 3.0])

    def f(x):
        return float(np.sum(a * x * x)), 2.0 * a * x

    assert grad_check(f, np.array([0.3, -0.4, 0.9])) < 1e-8


def test_grad_check_flags_wrong_gradient():
    def f(x):
        return float(np.sum(x * x)), 3.0 * x  # wrong scale

    assert grad_check(f, np.array([0.5, 1.5])) > 0.1


# ---------------------------------------------------------------------------
# TFM1 tensor serialization
# ---------------------------------------------------------------------------


def test_tensorio_round_trip(tmp_path, rng):
    tensors = {
        "b.matrix": rng.normal(size=(3, 4)),
        "a.vector": rng.normal(size=7),
        "c.cube": rng.normal(size=(2, 3, 2)),
        "d.scalar": np.array(4.25),
    }
    path = tmp_path / "weights.tfm1"
    tensorio.save_tensors(path, tensors)
    loaded = tensorio.load_tensors(path)
    assert sorted(loaded) == sorted(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == np.asarray(arr).shape
        assert np.array_equal(loaded[name], arr)


def test_tensorio_sorted_name_order_makes_bytes_canonical(rng):
    a = {"x": rng.normal(size=3), "y": rng.normal(size=3)}
    b = {"y": a["y"], "x": a["x"]}
    buf_a, buf_b = io.BytesIO(), io.BytesIO()
    tensorio.write_tensors(buf_a, a)
    tensorio.write_tensors(buf_b, b)
    assert buf_a.getvalue() == buf_b.getvalue()


def test_tensorio_header_layout():
    buf = io.BytesIO()
    tensorio.write_tensors(buf, {"w": np.array([1.0])})
    raw = buf.getvalue()
    assert raw[:4] == b"TFM1"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:10], "little") == 1  # name length
    assert raw[10:11] == b"w"


def test_tensorio_bad_magic():
    with pytest.raises(InputError):
        tensorio.read_tensors(io.BytesIO(b"NOPE" + b"\x00" * 16))


def test_tensorio_truncation():
    buf = io.BytesIO()
    tensorio.write_tensors(buf, {"w": np.arange(6.0)})
    raw = buf.getvalue()
    with pytest.raises(InputError):
        tensorio.read_tensors(io.BytesIO(raw[:-4]))


def test_tensorio_empty_dict():
    buf = io.BytesIO()
    tensorio.write_tensors(buf, {})
    assert tensorio.read_tensors(io.BytesIO(buf.getvalue())) == {}
