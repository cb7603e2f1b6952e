import numpy as np
import pytest

from layoutlmv2 import numerics as nx
from layoutlmv2.embeddings import (EmbedConfig, build_input, init_params, layout_embed, text_embed,
                                   visual_embed)
from layoutlmv2.errors import ContractError, DimensionError
from layoutlmv2.tokenizer import SEG_A, SEG_B, SEG_C


@pytest.fixture
def store():
    s = nx.ParamStore()
    init_params(s, EmbedConfig(hidden=12, vocab_size=20, max_positions=16, heads=2), 5, np.random.default_rng(0))
    return s


def test_text_embedding_is_a_sum_of_rows(store):
    out = text_embed(store, [[3, 4]], [[SEG_A, SEG_B]], [[0, 1]]).data
    tok, pos, seg = store["embeddings.token"].data, store["embeddings.pos1d"].data, store["embeddings.segment"].data
    np.testing.assert_allclose(out[0, 0], tok[3] + pos[0] + seg[SEG_A], rtol=1e-6)
    np.testing.assert_allclose(out[0, 1], tok[4] + pos[1] + seg[SEG_B], rtol=1e-6)
    with pytest.raises(ContractError):
        text_embed(store, [[20]], [[0]], [[0]])


def test_visual_embedding_uses_segment_c(store):
    feats = np.random.default_rng(1).normal(size=(3, 5)).astype(np.float32)
    out = visual_embed(store, nx.Tensor(feats)).data
    w, b = store["embeddings.visual_proj.weight"].data, store["embeddings.visual_proj.bias"].data
    ref = feats @ w + b + store["embeddings.pos1d"].data[:3] + store["embeddings.segment"].data[SEG_C]
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-7)


def test_layout_embedding_layout(store):
    out = layout_embed(store, [[10, 30, 5, 45]]).data[0]
    x, y = store["embeddings.x"].data, store["embeddings.y"].data
    ref = np.concatenate([x[10], x[30], x[20], y[5], y[45], y[40]])
    assert out.shape == (12,)
    np.testing.assert_array_equal(out, ref)
    # the special box maps every slot to row 0
    zero = layout_embed(store, [[0, 0, 0, 0]]).data[0]
    np.testing.assert_array_equal(zero, np.concatenate([x[0]] * 3 + [y[0]] * 3))


def test_layout_embedding_contracts(store):
    with pytest.raises(DimensionError):
        layout_embed(store, [[1, 2, 3]])
    with pytest.raises(ContractError):
        layout_embed(store, [[0, 1001, 0, 1]])


def test_build_input_order_and_shapes(store):
    v = nx.Tensor(np.ones((2, 12)))
    t = nx.Tensor(np.full((3, 12), 2.0))
    l = nx.Tensor(np.arange(5 * 12, dtype=float).reshape(5, 12))
    out = build_input(v, t, l).data
    np.testing.assert_array_equal(out[:2], 1 + l.data[:2])
    np.testing.assert_array_equal(out[2:], 2 + l.data[2:])
    with pytest.raises(ContractError):
        build_input(v, t, nx.Tensor(np.zeros((4, 12))))


def test_config_contract():
    with pytest.raises(ContractError):
        EmbedConfig(hidden=16)
    assert EmbedConfig(hidden=96).coord_width == 16
