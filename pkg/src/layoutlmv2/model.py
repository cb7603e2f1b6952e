"""The assembled multi-modal encoder: backbone, embeddings and encoder stack."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np

from . import embeddings, encoder, visual_backbone
from . import numerics as nx
from .doc_model import grid_box
from .embeddings import EmbedConfig
from .encoder import EncoderConfig, PositionContext
from .errors import ContractError
from .heads import EncoderOutput
from .tokenizer import PAD_ID, InputSequence
from .visual_backbone import BackboneConfig


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 96
    layers: int = 2
    heads: int = 4
    max_len: int = 128
    grid_w: int = 4
    grid_h: int = 4
    vocab_size: int = 512
    channels: tuple[int, ...] = (8, 16, 32)
    buckets_1d: int = 32
    max_dist_1d: int = 128
    buckets_2d: int = 64
    max_dist_2d: int = 1000
    dropout: float = 0.0
    spatial_bias: bool = True
    init_std: float = 0.1  # about 1/sqrt(hidden); the base preset keeps 0.02

    def __post_init__(self):
        if self.hidden % 6 or self.hidden % self.heads:
            raise ContractError(f"hidden {self.hidden} must be divisible by 6 and by {self.heads} heads")

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def base(cls, **kw) -> "ModelConfig":
        kw = {"hidden": 768, "layers": 12, "heads": 12, "max_len": 512, "grid_w": 7, "grid_h": 7,
              "channels": (64, 128, 256), "init_std": 0.02, **kw}
        return cls(**kw)

    @classmethod
    def micro(cls, **kw) -> "ModelConfig":
        kw = {"hidden": 12, "layers": 2, "heads": 2, "max_len": 16, "grid_w": 2, "grid_h": 2,
              "channels": (2, 3, 4), "buckets_1d": 8, "max_dist_1d": 16, "buckets_2d": 16,
              "max_dist_2d": 1000, **kw}
        return cls(**kw)

    @classmethod
    def preset(cls, name: str, **kw) -> "ModelConfig":
        try:
            return {"tiny": cls.tiny, "base": cls.base, "micro": cls.micro}[name](**kw)
        except KeyError:
            raise ContractError(f"unknown model preset {name!r}") from None

    @property
    def num_visual(self) -> int:
        return self.grid_w * self.grid_h

    @property
    def seq_len(self) -> int:
        return self.num_visual + self.max_len

    def embed(self) -> EmbedConfig:
        return EmbedConfig(self.hidden, self.vocab_size, max(self.max_len, self.num_visual), self.heads)

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.layers, self.heads, self.hidden, 4, self.buckets_1d, self.max_dist_1d,
                             self.buckets_2d, self.max_dist_2d, self.dropout, self.spatial_bias)

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(visual_backbone.INPUT_SIDE, self.channels, self.grid_w, self.grid_h)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown model config keys {sorted(unknown)}")
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, L)
    segments: np.ndarray  # (B, L)
    pos1d: np.ndarray  # (B, L)
    boxes: np.ndarray  # (B, L, 4)
    images: np.ndarray  # (B, 1, S, S) float in [0, 1]

    @property
    def attention_mask(self) -> np.ndarray:
        return self.token_ids != PAD_ID

    def __len__(self):
        return self.token_ids.shape[0]

    def trim(self) -> "Batch":
        """Drop trailing columns that are padding in every row. Pads are masked out
        of attention, so outputs at the kept positions are unchanged."""
        w = self.width()
        return Batch(self.token_ids[:, :w], self.segments[:, :w], self.pos1d[:, :w], self.boxes[:, :w], self.images)

    def width(self) -> int:
        real = np.nonzero(self.attention_mask.any(axis=0))[0]
        return int(real[-1]) + 1 if len(real) else 1


def collate(seqs: Sequence[InputSequence], rasters: Sequence[np.ndarray]) -> Batch:
    """Stack sequences and preprocessed page rasters into one batch."""
    if len(seqs) != len(rasters):
        raise ContractError("one raster per sequence required")
    images = np.stack([visual_backbone.preprocess(r) for r in rasters])
    return Batch(np.stack([s.token_ids for s in seqs]), np.stack([s.segments for s in seqs]),
                 np.stack([s.pos1d for s in seqs]), np.stack([s.boxes for s in seqs]), images)


def visual_boxes(W: int, H: int) -> np.ndarray:
    return np.array([grid_box(i, W, H).as_list() for i in range(W * H)], dtype=np.int64)


class LayoutLMv2:
    """Parameters plus the forward pass up to encoder outputs. Heads live in the
    same :class:`ParamStore` under ``heads.*``."""

    def __init__(self, config: ModelConfig, store: nx.ParamStore | None = None, seed: int = 0):
        self.config = config
        if store is None:
            store = nx.ParamStore()
            rng = np.random.default_rng(seed)
            visual_backbone.init_params(store, config.backbone(), rng)
            embeddings.init_params(store, config.embed(), config.backbone().feature_dim, rng, config.init_std)
            encoder.init_params(store, config.encoder(), rng, config.init_std)
        self.store = store
        self._grid = visual_boxes(config.grid_w, config.grid_h)

    def context(self, batch: Batch) -> tuple[PositionContext, np.ndarray, np.ndarray]:
        """Position context, full boxes and key mask for the unified sequence."""
        bsz = len(batch)
        nv = self.config.num_visual
        vpos = np.broadcast_to(np.arange(nv), (bsz, nv))
        vbox = np.broadcast_to(self._grid, (bsz, nv, 4))
        pos = np.concatenate([vpos, batch.pos1d], axis=1)
        boxes = np.concatenate([vbox, batch.boxes], axis=1)
        mask = np.concatenate([np.ones((bsz, nv), dtype=bool), batch.attention_mask], axis=1)
        return PositionContext.from_boxes(pos, boxes), boxes, mask

    def embed(self, batch: Batch) -> tuple[nx.Tensor, nx.Tensor]:
        """Returns (first-layer input x0, pre-encoder visual embeddings)."""
        p = self.store
        feats = visual_backbone.extract(p, nx.Tensor(batch.images.astype(nx.default_dtype())), self.config.backbone())
        v = embeddings.visual_embed(p, feats)
        t = embeddings.text_embed(p, batch.token_ids, batch.segments, batch.pos1d)
        _, boxes, _ = self.context(batch)
        l = embeddings.layout_embed(p, boxes)
        x0 = embeddings.embed_layer_norm(p, embeddings.build_input(v, t, l))
        return x0, v

    def forward(self, batch: Batch, rng: np.random.Generator | None = None) -> EncoderOutput:
        x0, v = self.embed(batch)
        ctx, _, mask = self.context(batch)
        x0 = nx.dropout(x0, self.config.dropout, rng)
        rows = encoder.encoder_forward(self.store, x0, ctx, mask, self.config.encoder(), rng)
        return EncoderOutput(rows, self.config.num_visual, v)
