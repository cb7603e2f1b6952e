"""Multi-head self-attention stack with spatial-aware relative-position biases.

Attention score for head ``h`` between query ``i`` and key ``j``::

    a'_ij = (x_i Wq)(x_j Wk)^T / sqrt(d_head)
            + b1d[h, bucket(p_j - p_i)]
            + b2dx[h, bucket(x_j - x_i)] + b2dy[h, bucket(y_j - y_i)]

where ``p`` is the modality-local 1-D index and ``(x, y)`` the top-left
corner of each position's box. The three bias tables are per head and
shared by every layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError

MASK_VALUE = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 96
    ffn_mult: int = 4
    buckets_1d: int = 32
    max_dist_1d: int = 128
    buckets_2d: int = 64
    max_dist_2d: int = 1000
    dropout: float = 0.0
    spatial_bias: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ContractError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        for b, m in ((self.buckets_1d, self.max_dist_1d), (self.buckets_2d, self.max_dist_2d)):
            if b % 2 or b < 4 or m <= b // 4:
                raise ContractError(f"bucket config ({b}, {m}) needs even buckets >= 4 and max_dist > buckets/4")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.hidden


@dataclass
class PositionContext:
    """Per-position 1-D index and box anchor (top-left corner); shape (n,) or (B, n)."""

    pos1d: np.ndarray
    x: np.ndarray
    y: np.ndarray

    @classmethod
    def from_boxes(cls, pos1d, boxes) -> "PositionContext":
        boxes = np.asarray(boxes)
        return cls(np.asarray(pos1d), boxes[..., 0], boxes[..., 2])


def rel_bucket(rel, buckets: int, max_dist: int):
    """Sign-split bucketing of a relative displacement.

    Non-positive displacements use buckets ``[0, buckets/2)``, positive ones
    ``[buckets/2, buckets)``. Within a sign the first ``buckets/4`` magnitudes
    map exactly; larger ones are log-spaced up to ``max_dist`` and clamp there.
    """
    rel = np.asarray(rel, dtype=np.int64)
    half = buckets // 2
    exact = half // 2
    offset = np.where(rel > 0, half, 0)
    n = np.abs(rel)
    with np.errstate(divide="ignore"):
        scaled = np.log(np.maximum(n, 1) / exact) / math.log(max_dist / exact) * (half - exact)
    large = np.minimum(exact + scaled.astype(np.int64), half - 1)
    out = offset + np.where(n < exact, n, large)
    return int(out) if out.ndim == 0 else out


def relative_matrix(v: np.ndarray) -> np.ndarray:
    """``m[..., i, j] = v[..., j] - v[..., i]``."""
    v = np.asarray(v, dtype=np.int64)
    return v[..., None, :] - v[..., :, None]


def bucket_indices(ctx: PositionContext, cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (rel_bucket(relative_matrix(ctx.pos1d), cfg.buckets_1d, cfg.max_dist_1d),
            rel_bucket(relative_matrix(ctx.x), cfg.buckets_2d, cfg.max_dist_2d),
            rel_bucket(relative_matrix(ctx.y), cfg.buckets_2d, cfg.max_dist_2d))


def init_params(store: nx.ParamStore, cfg: EncoderConfig, rng: np.random.Generator,
                std: float = 0.02, prefix: str = "encoder") -> None:
    dt = nx.default_dtype()
    d = cfg.hidden
    store.add(f"{prefix}.rel_bias.b1d", np.zeros((cfg.heads, cfg.buckets_1d), dtype=dt))
    store.add(f"{prefix}.rel_bias.b2dx", np.zeros((cfg.heads, cfg.buckets_2d), dtype=dt))
    store.add(f"{prefix}.rel_bias.b2dy", np.zeros((cfg.heads, cfg.buckets_2d), dtype=dt))
    for i in range(cfg.layers):
        p = f"{prefix}.layer{i}"
        for name in ("q", "k", "v", "o"):
            store.add(f"{p}.attn.{name}.weight", rng.normal(0, std, (d, d)).astype(dt))
            store.add(f"{p}.attn.{name}.bias", np.zeros(d, dtype=dt))
        store.add(f"{p}.ffn.in.weight", rng.normal(0, std, (d, cfg.ffn_dim)).astype(dt))
        store.add(f"{p}.ffn.in.bias", np.zeros(cfg.ffn_dim, dtype=dt))
        store.add(f"{p}.ffn.out.weight", rng.normal(0, std, (cfg.ffn_dim, d)).astype(dt))
        store.add(f"{p}.ffn.out.bias", np.zeros(d, dtype=dt))
        for ln in ("ln1", "ln2"):
            store.add(f"{p}.{ln}.weight", np.ones(d, dtype=dt))
            store.add(f"{p}.{ln}.bias", np.zeros(d, dtype=dt))


def _head_proj(params, layer: int, name: str, x: nx.Tensor, head: int, cfg: EncoderConfig, prefix: str):
    sl = slice(head * cfg.head_dim, (head + 1) * cfg.head_dim)
    w = nx.index(params[f"{prefix}.layer{layer}.attn.{name}.weight"], (slice(None), sl))
    b = nx.index(params[f"{prefix}.layer{layer}.attn.{name}.bias"], sl)
    return nx.linear(x, w, b)


def attention_scores(params, layer: int, x: nx.Tensor, head: int, cfg: EncoderConfig,
                     prefix: str = "encoder") -> nx.Tensor:
    """Scaled dot-product scores (n, n) of a single head for an (n, d) input."""
    q = _head_proj(params, layer, "q", x, head, cfg, prefix)
    k = _head_proj(params, layer, "k", x, head, cfg, prefix)
    return nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(cfg.head_dim))


def _table_lookup(table: nx.Tensor, idx: np.ndarray) -> nx.Tensor:
    """(heads, buckets) table gathered at idx (..., n, n) -> (..., heads, n, n)."""
    g = nx.embedding(nx.transpose(table), idx)  # (..., n, n, heads)
    nd = g.ndim
    axes = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
    return nx.transpose(g, axes)


def spatial_bias(params, ctx: PositionContext, cfg: EncoderConfig, prefix: str = "encoder") -> nx.Tensor:
    """Sum of the three relative-position bias terms, shape (..., heads, n, n)."""
    i1, ix, iy = bucket_indices(ctx, cfg)
    return (_table_lookup(params[f"{prefix}.rel_bias.b1d"], i1)
            + _table_lookup(params[f"{prefix}.rel_bias.b2dx"], ix)
            + _table_lookup(params[f"{prefix}.rel_bias.b2dy"], iy))


def spatial_scores(params, alpha: nx.Tensor, ctx: PositionContext, head: int, cfg: EncoderConfig,
                   prefix: str = "encoder") -> nx.Tensor:
    """alpha (n, n) of one head plus that head's 1-D and 2-D biases."""
    i1, ix, iy = bucket_indices(ctx, cfg)
    out = alpha
    for name, idx in (("b1d", i1), ("b2dx", ix), ("b2dy", iy)):
        row = nx.index(params[f"{prefix}.rel_bias.{name}"], head)
        out = out + nx.embedding(row, idx)
    return out


def _check_mask(pad_mask: np.ndarray) -> None:
    if not np.asarray(pad_mask, dtype=bool).any(axis=-1).all():
        raise ContractError("every key is masked for some query")


def attend(params, layer: int, x: nx.Tensor, pad_mask, cfg: EncoderConfig, bias: nx.Tensor | None = None,
           rng: np.random.Generator | None = None, prefix: str = "encoder") -> nx.Tensor:
    """Batched multi-head spatial-aware attention.

    x: (B, n, d); pad_mask: (B, n) true at real keys; bias: (B, heads, n, n) or None.
    Returns the output-projected (B, n, d) head concatenation.
    """
    pad_mask = np.asarray(pad_mask, dtype=bool)
    _check_mask(pad_mask)
    bsz, n, d = x.shape
    h, dh = cfg.heads, cfg.head_dim
    p = f"{prefix}.layer{layer}.attn"

    def split(t):
        return nx.transpose(nx.reshape(t, (bsz, n, h, dh)), (0, 2, 1, 3))

    q = split(nx.linear(x, params[f"{p}.q.weight"], params[f"{p}.q.bias"]))
    k = split(nx.linear(x, params[f"{p}.k.weight"], params[f"{p}.k.bias"]))
    v = split(nx.linear(x, params[f"{p}.v.weight"], params[f"{p}.v.bias"]))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if bias is not None:
        scores = scores + bias
    additive = np.where(pad_mask, 0.0, MASK_VALUE).astype(scores.dtype)[:, None, None, :]
    probs = nx.dropout(nx.softmax(scores + additive, axis=-1), cfg.dropout, rng)
    ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (bsz, n, d))
    return nx.linear(ctx, params[f"{p}.o.weight"], params[f"{p}.o.bias"])


def encoder_layer(params, layer: int, x: nx.Tensor, pad_mask, cfg: EncoderConfig, bias=None, rng=None,
                  prefix: str = "encoder") -> nx.Tensor:
    p = f"{prefix}.layer{layer}"
    a = nx.dropout(attend(params, layer, x, pad_mask, cfg, bias, rng, prefix), cfg.dropout, rng)
    x = nx.layer_norm(x + a, params[f"{p}.ln1.weight"], params[f"{p}.ln1.bias"])
    f = nx.gelu(nx.linear(x, params[f"{p}.ffn.in.weight"], params[f"{p}.ffn.in.bias"]))
    f = nx.dropout(nx.linear(f, params[f"{p}.ffn.out.weight"], params[f"{p}.ffn.out.bias"]), cfg.dropout, rng)
    return nx.layer_norm(x + f, params[f"{p}.ln2.weight"], params[f"{p}.ln2.bias"])


def encoder_forward(params, x0: nx.Tensor, ctx: PositionContext, pad_mask, cfg: EncoderConfig,
                    rng: np.random.Generator | None = None, prefix: str = "encoder") -> nx.Tensor:
    """Post-norm transformer stack; the bias tensor is built once and reused by every layer."""
    bias = spatial_bias(params, ctx, cfg, prefix) if cfg.spatial_bias and cfg.layers else None
    x = x0
    for i in range(cfg.layers):
        x = encoder_layer(params, i, x, pad_mask, cfg, bias, rng, prefix)
    return x
