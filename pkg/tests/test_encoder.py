import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layoutlmv2 import numerics as nx
from layoutlmv2.encoder import (EncoderConfig, PositionContext, attend, attention_scores, bucket_indices,
                                encoder_forward, init_params, rel_bucket, spatial_bias, spatial_scores)
from layoutlmv2.errors import ContractError

from oracles import attention_ref, bucket_ref, random_attention_case


def store_from_case(params, tables, cfg):
    store = nx.ParamStore()
    for name, (w, b) in params.items():
        store.add(f"encoder.layer0.attn.{name}.weight", w)
        store.add(f"encoder.layer0.attn.{name}.bias", b)
    for name, t in zip(("b1d", "b2dx", "b2dy"), tables):
        store.add(f"encoder.rel_bias.{name}", t)
    return store


def batched_attention(store, cfg, x, pos, ax, ay, mask):
    ctx = PositionContext(pos[None], ax[None], ay[None])
    bias = spatial_bias(store, ctx, cfg)
    return attend(store, 0, nx.Tensor(x[None]), mask[None], cfg, bias).data[0]


# bucketing ----------------------------------------------------------------------

def test_rel_bucket_examples():
    assert rel_bucket(0, 32, 128) == 0
    assert rel_bucket(-3, 32, 128) == 3
    assert rel_bucket(3, 32, 128) == 19
    assert rel_bucket(8, 32, 128) == 24  # first log-spaced bucket of the positive half
    assert rel_bucket(128, 32, 128) == 31
    assert rel_bucket(5000, 32, 128) == 31
    assert rel_bucket(-5000, 32, 128) == 15


@pytest.mark.parametrize("B,D", [(32, 128), (64, 1000), (8, 16)])
def test_rel_bucket_exhaustive(B, D):
    rel = np.arange(-D - 5, D + 6)
    got = rel_bucket(rel, B, D)
    assert got.tolist() == [bucket_ref(int(r), B, D) for r in rel]
    assert got.min() >= 0 and got.max() < B
    # sign split, and monotone in magnitude within each sign
    for r in range(1, D):
        assert rel_bucket(r, B, D) != rel_bucket(-r, B, D)
    pos = [rel_bucket(r, B, D) for r in range(0, D)]
    neg = [rel_bucket(-r, B, D) for r in range(0, D)]
    assert pos[1:] == sorted(pos[1:]) and neg == sorted(neg)


@given(st.integers(-3000, 3000))
def test_rel_bucket_range(r):
    assert 0 <= rel_bucket(r, 64, 1000) < 64


# scores -------------------------------------------------------------------------

def _one_layer(d=4, heads=2, seed=0):
    cfg = EncoderConfig(layers=1, heads=heads, hidden=d, buckets_1d=8, max_dist_1d=16, buckets_2d=16)
    store = nx.ParamStore()
    init_params(store, cfg, np.random.default_rng(seed))
    return cfg, store


def test_attention_scores_hand_example():
    cfg, store = _one_layer(d=4, heads=2)
    store["encoder.layer0.attn.q.weight"].data[:] = 0
    store["encoder.layer0.attn.k.weight"].data[:] = 0
    x = nx.Tensor(np.array([[1.0, 2.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0]]))
    assert np.all(attention_scores(store, 0, x, 0, cfg).data == 0)
    # head 0 uses columns 0:2; Wq = [[1,0],[0,1]], Wk = [[2,0],[0,1]] on those columns
    store["encoder.layer0.attn.q.weight"].data[:2, :2] = np.eye(2)
    store["encoder.layer0.attn.k.weight"].data[:2, :2] = np.diag([2.0, 1.0])
    s = attention_scores(store, 0, x, 0, cfg).data
    q = np.array([[1, 2], [0, 1]])
    k = np.array([[2, 2], [0, 1]])
    np.testing.assert_allclose(s, q @ k.T / math.sqrt(2), atol=1e-6)
    # doubling both projections quadruples the scores
    store["encoder.layer0.attn.q.weight"].data *= 2
    store["encoder.layer0.attn.k.weight"].data *= 2
    np.testing.assert_allclose(attention_scores(store, 0, x, 0, cfg).data, 4 * s, rtol=1e-6)


def test_spatial_scores_zero_tables_and_diagonal():
    cfg, store = _one_layer()
    alpha = nx.Tensor(np.random.default_rng(0).normal(size=(3, 3)))
    ctx = PositionContext(np.array([0, 1, 2]), np.array([5, 5, 900]), np.array([0, 0, 40]))
    assert np.array_equal(spatial_scores(store, alpha, ctx, 1, cfg).data, alpha.data)
    for name in ("b1d", "b2dx", "b2dy"):
        store[f"encoder.rel_bias.{name}"].data[:] = np.arange(store[f"encoder.rel_bias.{name}"].data.size).reshape(
            store[f"encoder.rel_bias.{name}"].shape)
    i1, ix, iy = bucket_indices(ctx, cfg)
    assert np.all(np.diag(i1) == 0) and np.all(np.diag(ix) == 0) and np.all(np.diag(iy) == 0)
    out = spatial_scores(store, alpha, ctx, 1, cfg).data - alpha.data
    expected = (store["encoder.rel_bias.b1d"].data[1][i1] + store["encoder.rel_bias.b2dx"].data[1][ix]
                + store["encoder.rel_bias.b2dy"].data[1][iy])
    np.testing.assert_allclose(out, expected)


def test_translation_leaves_2d_indices():
    cfg = EncoderConfig()
    rng = np.random.default_rng(0)
    x, y = rng.integers(0, 800, 20), rng.integers(0, 900, 20)
    a = bucket_indices(PositionContext(np.arange(20), x, y), cfg)
    b = bucket_indices(PositionContext(np.arange(20), x + 100, y + 50), cfg)
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])


# attention ----------------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(st.integers(1, 12), st.integers(1, 3), st.integers(0, 2 ** 31))
def test_attend_matches_naive_loops(n, heads, seed):
    rng = np.random.default_rng(seed)
    x, params, tables, pos, ax, ay, mask = random_attention_case(rng, n, heads)
    cfg = EncoderConfig(layers=1, heads=heads, hidden=x.shape[1], buckets_1d=8, max_dist_1d=16, buckets_2d=16)
    with nx.precision("double"):
        got = batched_attention(store_from_case(params, tables, cfg), cfg, x, pos, ax, ay, mask)
    ref = attention_ref(x, *params["q"], *params["k"], *params["v"], *params["o"], heads, pos, ax, ay, tables,
                        mask, ((8, 16), (16, 1000)))
    assert np.max(np.abs(got - ref)) < 1e-9


def test_attend_singleton_and_uniform():
    cfg, store = _one_layer()
    p = "encoder.layer0.attn"
    x = np.array([[[0.3, -1.0, 2.0, 0.5]]])
    out = attend(store, 0, nx.Tensor(x), np.ones((1, 1), bool), cfg).data
    v = x[0] @ store[f"{p}.v.weight"].data + store[f"{p}.v.bias"].data
    np.testing.assert_allclose(out[0], v @ store[f"{p}.o.weight"].data + store[f"{p}.o.bias"].data, rtol=1e-5)
    # zero query weights give uniform rows: every output is the mean of the values
    store[f"{p}.q.weight"].data[:] = 0
    xs = np.random.default_rng(1).normal(size=(1, 5, 4)).astype(np.float32)
    out = attend(store, 0, nx.Tensor(xs), np.ones((1, 5), bool), cfg).data
    v = xs[0] @ store[f"{p}.v.weight"].data + store[f"{p}.v.bias"].data
    ref = v.mean(0) @ store[f"{p}.o.weight"].data + store[f"{p}.o.bias"].data
    np.testing.assert_allclose(out[0], np.broadcast_to(ref, (5, 4)), atol=1e-6)


def test_attend_all_masked_raises():
    cfg, store = _one_layer()
    with pytest.raises(ContractError):
        attend(store, 0, nx.Tensor(np.ones((1, 2, 4))), np.zeros((1, 2), bool), cfg)


def test_padding_content_does_not_leak():
    cfg = EncoderConfig(layers=2, heads=2, hidden=12, buckets_1d=8, max_dist_1d=16, buckets_2d=16)
    store = nx.ParamStore()
    init_params(store, cfg, np.random.default_rng(0), std=0.3)
    for name in ("b1d", "b2dx", "b2dy"):
        store[f"encoder.rel_bias.{name}"].data[:] = np.random.default_rng(1).normal(size=store[f"encoder.rel_bias.{name}"].shape)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 6, 12)).astype(np.float32)
    mask = np.array([[True, True, True, True, False, False]])
    ctx = PositionContext(np.arange(6)[None], rng.integers(0, 1000, (1, 6)), rng.integers(0, 1000, (1, 6)))
    a = encoder_forward(store, nx.Tensor(x), ctx, mask, cfg).data
    x2 = x.copy()
    x2[0, 4:] = rng.normal(size=(2, 12)) * 10
    b = encoder_forward(store, nx.Tensor(x2), ctx, mask, cfg).data
    np.testing.assert_allclose(a[0, :4], b[0, :4], atol=1e-5)


def test_head_independence_of_bias():
    cfg, store = _one_layer()
    ctx = PositionContext(np.arange(4)[None], np.array([[0, 100, 200, 300]]), np.array([[0, 0, 500, 500]]))
    for name in ("b1d", "b2dx", "b2dy"):
        store[f"encoder.rel_bias.{name}"].data[:] = 1.0
    before = spatial_bias(store, ctx, cfg).data.copy()
    for name in ("b1d", "b2dx", "b2dy"):
        store[f"encoder.rel_bias.{name}"].data[0] = 0.0
    after = spatial_bias(store, ctx, cfg).data
    assert np.all(after[:, 0] == 0)
    assert np.array_equal(after[:, 1], before[:, 1])


def test_zero_layers_identity_and_shapes():
    cfg = EncoderConfig(layers=0, heads=2, hidden=12, buckets_1d=8, max_dist_1d=16, buckets_2d=16)
    store = nx.ParamStore()
    init_params(store, cfg, np.random.default_rng(0))
    x = nx.Tensor(np.random.default_rng(0).normal(size=(2, 5, 12)))
    ctx = PositionContext(np.tile(np.arange(5), (2, 1)), np.zeros((2, 5), int), np.zeros((2, 5), int))
    assert encoder_forward(store, x, ctx, np.ones((2, 5), bool), cfg) is x
    cfg2 = EncoderConfig(layers=2, heads=2, hidden=12, buckets_1d=8, max_dist_1d=16, buckets_2d=16)
    store2 = nx.ParamStore()
    init_params(store2, cfg2, np.random.default_rng(0))
    assert encoder_forward(store2, x, ctx, np.ones((2, 5), bool), cfg2).shape == (2, 5, 12)


def test_bias_tables_shared_across_layers():
    cfg = EncoderConfig(layers=3, heads=2, hidden=12, buckets_1d=8, max_dist_1d=16, buckets_2d=16)
    store = nx.ParamStore()
    init_params(store, cfg, np.random.default_rng(0))
    assert [n for n in store.names() if "rel_bias" in n] == ["encoder.rel_bias.b1d", "encoder.rel_bias.b2dx",
                                                             "encoder.rel_bias.b2dy"]


def test_encoder_config_contracts():
    with pytest.raises(ContractError):
        EncoderConfig(hidden=10, heads=4)
    with pytest.raises(ContractError):
        EncoderConfig(buckets_1d=7)
    with pytest.raises(ContractError):
        EncoderConfig(dropout=1.0)


def test_encoder_stack_gradients():
    from layoutlmv2.numerics import numeric_grad
    cfg = EncoderConfig(layers=2, heads=2, hidden=12, buckets_1d=8, max_dist_1d=16, buckets_2d=16)
    with nx.precision("double"):
        store = nx.ParamStore()
        init_params(store, cfg, np.random.default_rng(0), std=0.3)
        for name in ("b1d", "b2dx", "b2dy"):
            store[f"encoder.rel_bias.{name}"].data[:] = np.random.default_rng(1).normal(size=store[f"encoder.rel_bias.{name}"].shape)
        rng = np.random.default_rng(3)
        x = nx.Tensor(rng.normal(size=(1, 5, 12)))
        ctx = PositionContext(np.arange(5)[None], rng.integers(0, 1000, (1, 5)), rng.integers(0, 1000, (1, 5)))
        mask = np.array([[True] * 4 + [False]])
        target = rng.normal(size=(1, 5, 12))

        def loss():
            return nx.tsum(encoder_forward(store, x, ctx, mask, cfg) * target)

        nx.backward(loss(), store)
        for name, p in store.items():
            coords = np.arange(min(p.data.size, 6))
            num = numeric_grad(lambda: loss().item(), p, coords, 1e-5)
            # the key bias adds a per-query constant that softmax ignores, so its gradient is zero
            np.testing.assert_allclose(p.grad.reshape(-1)[coords], num, rtol=1e-5, atol=1e-8, err_msg=name)
