"""Page-image preprocessing, the convolutional feature extractor, and region masking.

The extractor is three stride-2 3x3 convolutions (edge-replicate padding) with GELU followed by
adaptive average pooling to a W x H grid, flattened row-major into W*H
feature rows: the same interface a ResNeXt-FPN backbone would present.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import numerics as nx
from .doc_model import BBox, Page, pixel_span
from .errors import ContractError

INPUT_SIDE = 224


@dataclass(frozen=True)
class BackboneConfig:
    input_side: int = INPUT_SIDE
    channels: tuple[int, ...] = (8, 16, 32)
    grid_w: int = 4
    grid_h: int = 4

    def __post_init__(self):
        if self.grid_w * self.grid_h < 1:
            raise ContractError("visual grid must have at least one cell")
        stride = 2 ** len(self.channels)
        if self.input_side % stride:
            raise ContractError(f"input side {self.input_side} not divisible by total stride {stride}")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def num_tokens(self) -> int:
        return self.grid_w * self.grid_h


def resize_nearest(raster: np.ndarray, side: int = INPUT_SIDE) -> np.ndarray:
    h, w = raster.shape
    if h == 0 or w == 0:
        raise ContractError("cannot resize an empty raster")
    rows = (np.arange(side) * h) // side
    cols = (np.arange(side) * w) // side
    return raster[rows[:, None], cols[None, :]]


def preprocess(page: Page | np.ndarray, side: int = INPUT_SIDE) -> np.ndarray:
    """Nearest-neighbour resize to ``side`` x ``side`` and scale to [0, 1]; shape (1, side, side)."""
    raster = page.image if isinstance(page, Page) else np.asarray(page)
    if raster.ndim != 2 or 0 in raster.shape:
        raise ContractError(f"raster must be non-empty 2-D, got shape {raster.shape}")
    out = resize_nearest(raster, side).astype(nx.default_dtype()) / 255.0
    return out[None]


def init_params(store: nx.ParamStore, cfg: BackboneConfig, rng: np.random.Generator, prefix: str = "backbone") -> None:
    cin = 1
    for i, cout in enumerate(cfg.channels):
        fan_in = cin * 9
        store.add(f"{prefix}.conv{i}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, 3, 3)).astype(nx.default_dtype()))
        store.add(f"{prefix}.conv{i}.bias", np.zeros(cout, dtype=nx.default_dtype()))
        cin = cout


def feature_map(params: nx.ParamStore, images: nx.Tensor, cfg: BackboneConfig, prefix: str = "backbone") -> nx.Tensor:
    x = images
    for i in range(len(cfg.channels)):
        x = nx.gelu(nx.conv2d(nx.pad_edge(x, 1), params[f"{prefix}.conv{i}.weight"],
                              params[f"{prefix}.conv{i}.bias"], stride=2))
    return x


def extract(params: nx.ParamStore, images, cfg: BackboneConfig, prefix: str = "backbone") -> nx.Tensor:
    """(B, 1, S, S) images, or a single (1, S, S) image -> (B, W*H, f) feature rows."""
    images = nx.as_tensor(images)
    single = images.ndim == 3
    if single:
        images = nx.reshape(images, (1,) + images.shape)
    fmap = feature_map(params, images, cfg, prefix)
    pooled = nx.adaptive_avg_pool2d(fmap, cfg.grid_h, cfg.grid_w)  # (B, f, H, W)
    bsz, f = pooled.shape[:2]
    rows = nx.transpose(nx.reshape(pooled, (bsz, f, cfg.grid_h * cfg.grid_w)), (0, 2, 1))
    return nx.reshape(rows, rows.shape[1:]) if single else rows


def mask_regions(raster: np.ndarray, boxes: Iterable[BBox | np.ndarray | list]) -> np.ndarray:
    """Zero every pixel inside the given normalized boxes; returns a new raster."""
    out = np.array(raster, copy=True)
    h, w = out.shape
    for box in boxes:
        x0, x1, y0, y1 = box.as_list() if isinstance(box, BBox) else [int(v) for v in box]
        c0, c1 = pixel_span(x0, x1, w)
        r0, r1 = pixel_span(y0, y1, h)
        out[r0:r1, c0:c1] = 0
    return out
