"""Text, visual and layout embeddings, and the encoder's first-layer input.

Parameter names (under ``embeddings.``):

    token       (vocab, d)        TokEmb
    pos1d       (max_pos, d)      PosEmb1D, shared by text and visual tokens
    segment     (3, d)            SegEmb for segments A, B and the visual segment C
    x, y        (1001, d/6)       PosEmb2D_x / PosEmb2D_y
    visual_proj.weight/bias       Proj from backbone features to d
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .doc_model import COORD_MAX
from .errors import ContractError, DimensionError
from .tokenizer import SEG_C

NUM_SEGMENTS = 3
COORD_RANGE = COORD_MAX + 1


@dataclass(frozen=True)
class EmbedConfig:
    hidden: int = 96
    vocab_size: int = 512
    max_positions: int = 512
    heads: int = 4

    def __post_init__(self):
        if self.hidden % 6:
            raise ContractError(f"hidden size {self.hidden} must be divisible by 6")
        if self.hidden % self.heads:
            raise ContractError(f"hidden size {self.hidden} must be divisible by {self.heads} heads")

    @property
    def coord_width(self) -> int:
        return self.hidden // 6


def init_params(store: nx.ParamStore, cfg: EmbedConfig, feature_dim: int, rng: np.random.Generator,
                std: float = 0.02, prefix: str = "embeddings") -> None:
    dt = nx.default_dtype()
    d = cfg.hidden
    store.add(f"{prefix}.token", rng.normal(0, std, (cfg.vocab_size, d)).astype(dt))
    store.add(f"{prefix}.pos1d", rng.normal(0, std, (cfg.max_positions, d)).astype(dt))
    store.add(f"{prefix}.segment", rng.normal(0, std, (NUM_SEGMENTS, d)).astype(dt))
    store.add(f"{prefix}.x", rng.normal(0, std, (COORD_RANGE, cfg.coord_width)).astype(dt))
    store.add(f"{prefix}.y", rng.normal(0, std, (COORD_RANGE, cfg.coord_width)).astype(dt))
    store.add(f"{prefix}.visual_proj.weight", rng.normal(0, std, (feature_dim, d)).astype(dt))
    store.add(f"{prefix}.visual_proj.bias", np.zeros(d, dtype=dt))
    store.add(f"{prefix}.ln.weight", np.ones(d, dtype=dt))
    store.add(f"{prefix}.ln.bias", np.zeros(d, dtype=dt))


def text_embed(params, token_ids, segments, pos1d, prefix: str = "embeddings") -> nx.Tensor:
    """TokEmb(w_i) + PosEmb1D(i) + SegEmb(s_i) for every text position."""
    token_ids = np.asarray(token_ids)
    vocab = params[f"{prefix}.token"].shape[0]
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= vocab):
        raise ContractError(f"token id outside vocabulary of size {vocab}")
    return (nx.embedding(params[f"{prefix}.token"], token_ids)
            + nx.embedding(params[f"{prefix}.pos1d"], pos1d)
            + nx.embedding(params[f"{prefix}.segment"], segments))


def visual_embed(params, features: nx.Tensor, prefix: str = "embeddings") -> nx.Tensor:
    """Proj(features_i) + PosEmb1D(i) + SegEmb(C); features (..., WH, f)."""
    n = features.shape[-2]
    proj = nx.linear(features, params[f"{prefix}.visual_proj.weight"], params[f"{prefix}.visual_proj.bias"])
    pos = nx.embedding(params[f"{prefix}.pos1d"], np.arange(n))
    seg = nx.embedding(params[f"{prefix}.segment"], np.array([SEG_C]))
    return proj + pos + seg


def layout_embed(params, boxes, prefix: str = "embeddings") -> nx.Tensor:
    """Concat(x[x0], x[x1], x[w], y[y0], y[y1], y[h]) per position.

    ``boxes``: integer array (..., 4) ordered (x0, x1, y0, y1).
    """
    boxes = np.asarray(boxes, dtype=np.int64)
    if boxes.shape[-1] != 4:
        raise DimensionError(f"boxes must end in 4 coordinates, got {boxes.shape}")
    x0, x1, y0, y1 = (boxes[..., k] for k in range(4))
    w, h = x1 - x0, y1 - y0
    feats = (x0, x1, w, y0, y1, h)
    for f in feats:
        if f.size and (f.min() < 0 or f.max() > COORD_MAX):
            raise ContractError("box coordinate outside [0, 1000]")
    xt, yt = params[f"{prefix}.x"], params[f"{prefix}.y"]
    parts = [nx.embedding(xt, f) for f in feats[:3]] + [nx.embedding(yt, f) for f in feats[3:]]
    return nx.concat(parts, axis=-1)


def build_input(v: nx.Tensor, t: nx.Tensor, l: nx.Tensor) -> nx.Tensor:
    """x0_i = X_i + l_i with X = visual rows followed by text rows."""
    if v.shape[-1] != t.shape[-1] or v.shape[:-2] != t.shape[:-2]:
        raise ContractError(f"visual {v.shape} and text {t.shape} embeddings disagree")
    if l.shape[-2] != v.shape[-2] + t.shape[-2] or l.shape[-1] != v.shape[-1]:
        raise ContractError(f"layout embedding shape {l.shape} does not match "
                            f"{v.shape[-2]} + {t.shape[-2]} rows of width {v.shape[-1]}")
    return nx.concat([v, t], axis=-2) + l


def embed_layer_norm(params, x: nx.Tensor, prefix: str = "embeddings") -> nx.Tensor:
    return nx.layer_norm(x, params[f"{prefix}.ln.weight"], params[f"{prefix}.ln.bias"])
