"""Deterministic synthetic forms, tables and receipts.

Tokens are rendered as filled blocks whose gray level is a hash of the token
text, so the page raster carries token-identity signal at region level.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .doc_model import Document, Labels, Page, QAPair, EntitySpan, Token, normalize_box, pixel_span
from .errors import ContractError

FAMILIES = ("form", "table", "receipt")

KEY_WORDS = (
    "name", "date", "address", "phone", "email", "company", "account", "city",
    "amount", "invoice", "ref", "code", "region", "status", "agent", "title",
)
KEY_SUFFIX = ("no", "id", "type", "date")
VALUE_WORDS = (
    "alpha", "bravo", "cedar", "delta", "ember", "fjord", "garnet", "harbor",
    "indigo", "juniper", "kestrel", "lumen", "marble", "nectar", "orchid", "pepper",
    "quartz", "raven", "sierra", "tundra", "umber", "violet", "willow", "xenon",
    "yarrow", "zephyr", "acme", "north", "south", "east", "west", "river",
)
PRICE_WORDS = ("1.20", "2.50", "3.75", "4.99", "5.10", "6.40", "7.25", "8.80", "9.15", "12.00")
ITEM_WORDS = ("coffee", "bread", "milk", "tea", "salad", "soup", "juice", "cake", "rice", "pasta")
HEADER_WORDS = ("application", "invoice", "report", "statement", "receipt", "summary", "order", "record")
FILLER_WORDS = ("page", "note", "see", "reverse", "signature", "copy", "office", "use", "only", "thank", "you")

BACKGROUND = 255


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    page_width: int = 224
    page_height: int = 224
    family: str | None = None  # None draws the family per document
    min_tokens: int = 8  # token target range; a full grid stops generation early
    max_tokens: int = 32
    value_words: tuple[str, ...] = VALUE_WORDS
    cells: int = 4  # layout grid per side; lines never share a cell

    def __post_init__(self):
        if self.family is not None and self.family not in FAMILIES:
            raise ContractError(f"unknown layout family {self.family!r}")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ContractError("token count range must satisfy 1 <= min <= max")
        if self.page_width < 64 or self.page_height < 64:
            raise ContractError("page must be at least 64x64 pixels")
        if not 2 <= self.cells <= 16:
            raise ContractError("cells must be in [2, 16]")


def gray_level(text: str) -> int:
    """Stable text hash mapped into the dark-gray range [40, 215]."""
    return 40 + zlib.crc32(text.encode("utf-8")) % 176


def render(doc: Document) -> np.ndarray:
    """Paint each token's box as a filled block on a white page."""
    page = doc.page
    raster = np.full((page.pixel_height, page.pixel_width), BACKGROUND, dtype=np.uint8)
    for tok in doc.tokens:
        c0, c1 = pixel_span(tok.box.x0, tok.box.x1, page.pixel_width)
        r0, r1 = pixel_span(tok.box.y0, tok.box.y1, page.pixel_height)
        raster[r0:r1, c0:c1] = gray_level(tok.text)
    return raster


@dataclass
class _Builder:
    """Places lines on a ``cells x cells`` page grid; a line owns a run of cells
    in one row and no two lines share a cell."""

    width: int
    height: int
    cells: int
    char_w: int
    tok_h: int
    target: int
    words: list = field(default_factory=list)  # (text, px box, line)
    entities: list = field(default_factory=list)
    qa: list = field(default_factory=list)
    line: int = 0

    def full(self) -> bool:
        return len(self.words) >= self.target

    def place(self, texts: list[str], row: int, c0: int, c1: int, category: str,
              align: str = "left") -> tuple[int, int]:
        """Lay ``texts`` out as one line inside cells [c0, c1) of ``row``; returns the token span."""
        cw, ch = self.width / self.cells, self.height / self.cells
        margin = max(1, int(cw * 0.08))
        left, right = int(c0 * cw) + margin, int(c1 * cw) - margin
        gap = max(1, self.char_w // 2)
        widths = [max(2, len(t)) * self.char_w for t in texts]
        room = right - left - gap * (len(texts) - 1)
        if sum(widths) > room:
            widths = [max(2, w * room // sum(widths)) for w in widths]
        total = sum(widths) + gap * (len(texts) - 1)
        x = {"left": left, "right": right - total, "center": (left + right - total) // 2}[align]
        y = int(row * ch + (ch - self.tok_h) / 2)
        start = len(self.words)
        for t, w in zip(texts, widths):
            self.words.append((t, (x, y, x + w, y + self.tok_h), self.line))
            x += w + gap
        self.line += 1
        self.entities.append((start, len(self.words), category))
        return start, len(self.words)

    def pair(self, key: list[str], value: list[str], kcell: tuple[int, int, int],
             vcell: tuple[int, int, int], value_align: str = "left") -> None:
        self.place(key, *kcell, "question")
        s, e = self.place(value, *vcell, "answer", value_align)
        self.qa.append((" ".join(key), s, e))


def _key(rng, used: set, max_words: int = 2) -> list[str]:
    for _ in range(50):
        words = [str(rng.choice(KEY_WORDS))]
        if max_words > 1 and rng.random() < 0.3:
            words.append(str(rng.choice(KEY_SUFFIX)))
        if " ".join(words) not in used:
            used.add(" ".join(words))
            return words
    return words


def _values(rng, pool, lo=1, hi=3) -> list[str]:
    return [str(rng.choice(pool)) for _ in range(int(rng.integers(lo, hi + 1)))]


def _form(b: _Builder, rng, cfg: GenConfig) -> None:
    # header across the top row, key/value pairs side by side below it
    n = b.cells
    b.place(_values(rng, HEADER_WORDS, 1, 2), 0, 0, n - 1, "header", "center")
    b.place(_values(rng, FILLER_WORDS, 1, 1), 0, n - 1, n, "other", "right")
    used: set = set()
    for row in range(1, n):
        for c in range(0, n - 1, 2):
            if b.full():
                return
            b.pair(_key(rng, used), _values(rng, cfg.value_words, 1, 2), (row, c, c + 1), (row, c + 1, c + 2))


def _table(b: _Builder, rng, cfg: GenConfig) -> None:
    # header row, then bands of column keys with their values in the row below
    n = b.cells
    b.place(_values(rng, HEADER_WORDS, 1, 2), 0, 0, n, "header")
    used: set = set()
    row = 1
    while row + 1 < n:
        for c in range(n):
            if b.full():
                return
            b.pair(_key(rng, used, 1), _values(rng, cfg.value_words, 1, 1), (row, c, c + 1), (row + 1, c, c + 1))
        row += 2
    if row < n and not b.full():
        b.place(_values(rng, FILLER_WORDS, 1, 2), row, 0, n, "other")


def _receipt(b: _Builder, rng, cfg: GenConfig) -> None:
    # narrow central column: item on the left, right-aligned price, a total row
    n = b.cells
    mid = n // 2
    lo, hi = max(0, mid - 1), min(n, mid + 1)
    b.place(_values(rng, HEADER_WORDS, 1, 1), 0, lo, hi, "header", "center")
    items: set = set()
    for row in range(1, n - 1):
        if b.full():
            break
        item = str(rng.choice([w for w in ITEM_WORDS if w not in items]))
        items.add(item)
        b.pair([item], [str(rng.choice(PRICE_WORDS))], (row, lo, mid), (row, mid, hi), "right")
    b.pair(["total"], [str(rng.choice(PRICE_WORDS))], (n - 1, lo, mid), (n - 1, mid, hi), "right")
    if hi < n:
        b.place(_values(rng, FILLER_WORDS, 1, 2), n - 1, hi, n, "other", "right")


_LAYOUTS = {"form": _form, "table": _table, "receipt": _receipt}


def sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def generate_one(config: GenConfig, index: int) -> Document:
    rng = np.random.default_rng(sample_seed(config.seed, index))
    family = config.family or FAMILIES[int(rng.integers(len(FAMILIES)))]
    s = config.page_width / 224
    target = int(rng.integers(config.min_tokens, config.max_tokens + 1))
    b = _Builder(config.page_width, config.page_height, config.cells, char_w=max(2, int(5 * s)),
                 tok_h=max(3, int(12 * s)), target=target)
    _LAYOUTS[family](b, rng, config)

    tokens = [Token(t, normalize_box(x0, y0, x1, y1, config.page_width, config.page_height), line)
              for t, (x0, y0, x1, y1), line in b.words]
    labels = Labels(
        entities=[EntitySpan(s0, e0, cat) for s0, e0, cat in b.entities],
        doc_class=family,
        qa=[QAPair(q, s0, e0) for q, s0, e0 in b.qa],
    )
    blank = np.full((config.page_height, config.page_width), BACKGROUND, dtype=np.uint8)
    doc = Document(f"{family}-{config.seed}-{index:05d}", Page(blank, tokens), labels)
    doc.page.image = render(doc)
    doc.validate()
    return doc


def generate(config: GenConfig, n: int) -> list[Document]:
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    return [generate_one(config, i) for i in range(n)]
