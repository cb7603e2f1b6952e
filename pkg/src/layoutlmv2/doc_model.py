"""Documents, pages, tokens and boxes; corpus JSON I/O and the FUNSD adapter.

Boxes are stored in normalized page coordinates: integers in [0, 1000],
ordered ``(x0, x1, y0, y1)``.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, SchemaError, ValidationError

log = logging.getLogger(__name__)

COORD_MAX = 1000
FUNSD_LABELS = ("question", "answer", "header", "other")


@dataclass(frozen=True)
class BBox:
    x0: int
    x1: int
    y0: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 <= self.x1 <= COORD_MAX and 0 <= self.y0 <= self.y1 <= COORD_MAX):
            raise ValidationError(f"invalid box {self.as_list()}")

    @property
    def w(self) -> int:
        return self.x1 - self.x0

    @property
    def h(self) -> int:
        return self.y1 - self.y0

    def as_list(self) -> list[int]:
        return [self.x0, self.x1, self.y0, self.y1]

    def features(self) -> tuple[int, int, int, int, int, int]:
        """``(x0, x1, y0, y1, w, h)``, the six layout features."""
        return (self.x0, self.x1, self.y0, self.y1, self.w, self.h)

    def translate(self, dx: int, dy: int) -> "BBox":
        return BBox(self.x0 + dx, self.x1 + dx, self.y0 + dy, self.y1 + dy)


def special_token_box() -> BBox:
    """The empty box attached to [CLS], [SEP] and [PAD]."""
    return BBox(0, 0, 0, 0)


def normalize_coord(pixel: int, page_extent: int) -> int:
    if page_extent <= 0:
        raise ContractError(f"page extent must be positive, got {page_extent}")
    if pixel < 0 or pixel > page_extent:
        log.warning("pixel coordinate %s outside page extent %s; clamping", pixel, page_extent)
        pixel = min(max(pixel, 0), page_extent)
    return min(COORD_MAX, max(0, (COORD_MAX * pixel) // page_extent))


def normalize_box(px0: int, py0: int, px1: int, py1: int, width: int, height: int) -> BBox:
    return BBox(normalize_coord(px0, width), normalize_coord(px1, width),
                normalize_coord(py0, height), normalize_coord(py1, height))


def pixel_span(lo: int, hi: int, extent: int) -> tuple[int, int]:
    """Map normalized ``[lo, hi]`` back to a half-open pixel range covering it."""
    return (lo * extent) // COORD_MAX, min(extent, -((-hi * extent) // COORD_MAX))


def grid_box(visual_index: int, W: int, H: int) -> BBox:
    """Box of visual token ``visual_index`` on a W x H grid, row-major."""
    if not 0 <= visual_index < W * H:
        raise ContractError(f"visual index {visual_index} outside [0, {W * H})")
    row, col = divmod(visual_index, W)
    return BBox((COORD_MAX * col) // W, (COORD_MAX * (col + 1)) // W,
                (COORD_MAX * row) // H, (COORD_MAX * (row + 1)) // H)


@dataclass(frozen=True)
class Token:
    text: str
    box: BBox
    line_id: int

    def __post_init__(self):
        if not self.text:
            raise ValidationError("token text must be non-empty")
        if self.line_id < 0:
            raise ValidationError(f"line_id must be >= 0, got {self.line_id}")


@dataclass
class Page:
    image: np.ndarray  # (height, width) uint8
    tokens: list[Token]
    image_path: str | None = None

    def __post_init__(self):
        if self.image.ndim != 2 or min(self.image.shape) <= 0:
            raise ValidationError(f"page raster must be a non-empty 2-D array, got {self.image.shape}")
        if self.image.dtype != np.uint8:
            self.image = self.image.astype(np.uint8)

    @property
    def pixel_width(self) -> int:
        return int(self.image.shape[1])

    @property
    def pixel_height(self) -> int:
        return int(self.image.shape[0])


@dataclass(frozen=True)
class EntitySpan:
    """Token span ``[start, end)`` with a category."""

    start: int
    end: int
    category: str

    def __post_init__(self):
        if not self.start < self.end:
            raise ValidationError(f"entity span needs start < end, got [{self.start}, {self.end})")


@dataclass(frozen=True)
class QAPair:
    question: str
    answer_start: int
    answer_end: int


@dataclass
class Labels:
    entities: list[EntitySpan] = field(default_factory=list)
    doc_class: str | None = None
    qa: list[QAPair] = field(default_factory=list)


@dataclass
class Document:
    id: str
    page: Page
    labels: Labels = field(default_factory=Labels)

    @property
    def tokens(self) -> list[Token]:
        return self.page.tokens

    def validate(self) -> None:
        n = len(self.tokens)
        spans = sorted(self.labels.entities, key=lambda s: (s.start, s.end))
        for i, s in enumerate(spans):
            if s.end > n:
                raise ValidationError(f"entity [{s.start}, {s.end}) exceeds {n} tokens")
            if i and s.start < spans[i - 1].end:
                raise ValidationError(f"entity spans overlap at token {s.start}")
        for qa in self.labels.qa:
            if not 0 <= qa.answer_start < qa.answer_end <= n:
                raise ValidationError(f"QA answer span [{qa.answer_start}, {qa.answer_end}) invalid")

    def answer_text(self, qa: QAPair) -> str:
        return " ".join(t.text for t in self.tokens[qa.answer_start:qa.answer_end])

    def __eq__(self, other):
        if not isinstance(other, Document):
            return NotImplemented
        return (self.id == other.id and self.labels == other.labels
                and self.tokens == other.tokens
                and np.array_equal(self.page.image, other.page.image))


# ---------------------------------------------------------------------------
# raster I/O


def read_raster(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def write_raster(path: str | os.PathLike, raster: np.ndarray) -> None:
    Image.fromarray(np.asarray(raster, dtype=np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# corpus JSON


def document_to_json(doc: Document, image_ref: str) -> dict:
    labels: dict = {
        "entities": [{"start": s.start, "end": s.end, "category": s.category}
                     for s in doc.labels.entities],
        "qa": [{"question": q.question, "answer_start": q.answer_start, "answer_end": q.answer_end}
               for q in doc.labels.qa],
    }
    if doc.labels.doc_class is not None:
        labels["class"] = doc.labels.doc_class
    return {
        "id": doc.id,
        "page": {"width": doc.page.pixel_width, "height": doc.page.pixel_height, "image": image_ref},
        "tokens": [{"text": t.text, "box": t.box.as_list(), "line": t.line_id} for t in doc.tokens],
        "labels": labels,
    }


def save_document(doc: Document, path: str | os.PathLike) -> None:
    """Write ``<path>`` (JSON) plus a sibling ``.pgm`` raster."""
    path = Path(path)
    image_path = path.with_suffix(".pgm")
    write_raster(image_path, doc.page.image)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document_to_json(doc, image_path.name), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _require(obj: dict, key: str, kind, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}.{key}" if where else key, "missing field")
    value = obj[key]
    if kind is int and isinstance(value, bool):
        raise SchemaError(f"{where}.{key}", "expected int")
    if not isinstance(value, kind):
        raise SchemaError(f"{where}.{key}" if where else key, f"expected {getattr(kind, '__name__', kind)}")
    return value


def document_from_json(raw: dict, base_dir: str | os.PathLike = ".") -> Document:
    doc_id = str(_require(raw, "id", (str, int), ""))
    page = _require(raw, "page", dict, "")
    width = _require(page, "width", int, "page")
    height = _require(page, "height", int, "page")
    image_ref = _require(page, "image", str, "page")
    image_path = Path(base_dir) / image_ref
    if image_path.exists():
        image = read_raster(image_path)
    else:
        log.warning("image %s missing; using blank raster", image_path)
        image = np.full((height, width), 255, dtype=np.uint8)
    if image.shape != (height, width):
        raise SchemaError("page.image", f"raster shape {image.shape} != ({height}, {width})")

    tokens = []
    for i, t in enumerate(_require(raw, "tokens", list, "")):
        where = f"tokens[{i}]"
        text = _require(t, "text", str, where)
        box = _require(t, "box", list, where)
        if len(box) != 4 or not all(isinstance(v, int) and not isinstance(v, bool) for v in box):
            raise SchemaError(f"{where}.box", "expected four integers")
        try:
            bbox = BBox(*box)
            tokens.append(Token(text, bbox, _require(t, "line", int, where)))
        except ValidationError as exc:
            raise ValidationError(f"token {i}: {exc}") from None

    lab = raw.get("labels", {}) or {}
    entities = []
    for i, e in enumerate(lab.get("entities", [])):
        where = f"labels.entities[{i}]"
        entities.append(EntitySpan(_require(e, "start", int, where), _require(e, "end", int, where),
                                   _require(e, "category", str, where)))
    qa = []
    for i, q in enumerate(lab.get("qa", [])):
        where = f"labels.qa[{i}]"
        qa.append(QAPair(_require(q, "question", str, where), _require(q, "answer_start", int, where),
                         _require(q, "answer_end", int, where)))
    doc_class = lab.get("class")
    if doc_class is not None and not isinstance(doc_class, str):
        raise SchemaError("labels.class", "expected string")
    doc = Document(doc_id, Page(image, tokens, image_ref), Labels(entities, doc_class, qa))
    doc.validate()
    return doc


def load_document(path: str | os.PathLike) -> Document:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc}") from None
    return document_from_json(raw, path.parent)


def save_corpus(docs: list[Document], directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for doc in docs:
        p = directory / f"{doc.id}.json"
        save_document(doc, p)
        paths.append(p)
    return paths


def load_corpus(directory: str | os.PathLike) -> list[Document]:
    """All documents in ``directory``, sorted by file name. Files with
    "manifest" in their name (corpus and run manifests) are skipped."""
    directory = Path(directory)
    files = sorted(p for p in directory.glob("*.json") if "manifest" not in p.name)
    return [load_document(p) for p in files]


# ---------------------------------------------------------------------------
# FUNSD


def load_funsd(annotation_path: str | os.PathLike, image_path: str | os.PathLike | None = None) -> Document:
    """Read a FUNSD annotation file.

    Each entity's word list becomes one line; word order follows the
    annotation. Words with empty text are dropped.
    """
    annotation_path = Path(annotation_path)
    with open(annotation_path, encoding="utf-8") as fh:
        raw = json.load(fh)
    form = raw.get("form")
    if not isinstance(form, list):
        raise SchemaError("form", "expected a list of entities")

    image = None
    if image_path is not None and Path(image_path).exists():
        image = read_raster(image_path)
    if image is not None:
        height, width = image.shape
    else:
        log.warning("FUNSD image %s missing; using blank raster", image_path)
        xs = [w["box"][2] for e in form for w in e.get("words", [])] or [1]
        ys = [w["box"][3] for e in form for w in e.get("words", [])] or [1]
        width, height = max(1, math.ceil(max(xs))), max(1, math.ceil(max(ys)))
        image = np.full((height, width), 255, dtype=np.uint8)

    tokens: list[Token] = []
    spans: list[EntitySpan] = []
    line = 0
    for i, entity in enumerate(form):
        label = entity.get("label")
        if label not in FUNSD_LABELS:
            raise ValidationError(f"form[{i}]: unknown FUNSD label {label!r}")
        start = len(tokens)
        for j, word in enumerate(entity.get("words", [])):
            text = str(word.get("text", "")).strip()
            box = word.get("box")
            if not isinstance(box, list) or len(box) != 4:
                raise SchemaError(f"form[{i}].words[{j}].box", "expected [x0, y0, x1, y1]")
            if not text:
                continue
            # FUNSD boxes are (left, top, right, bottom) in pixels
            x0, y0, x1, y1 = (int(round(v)) for v in box)
            x0, x1 = sorted((x0, x1))
            y0, y1 = sorted((y0, y1))
            tokens.append(Token(text, normalize_box(x0, y0, x1, y1, width, height), line))
        if len(tokens) > start:
            spans.append(EntitySpan(start, len(tokens), label))
            line += 1
    doc = Document(annotation_path.stem, Page(image, tokens,
                                              str(image_path) if image_path else None),
                   Labels(spans))
    doc.validate()
    return doc
