"""Pre-training samples and losses for masked visual-language modeling (MVLM),
text-image alignment (TIA) and text-image matching (TIM).

Rates: 15% of text tokens selected for MVLM (80% -> [MASK], 10% -> random
token, 10% kept); 15% of lines covered for TIA; 15% of images replaced by
another page and 5% dropped for TIM.
"""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .doc_model import Document
from .errors import ContractError
from .heads import IGNORE, EncoderOutput, apply_linear, init_linear
from .tokenizer import MASK_ID, SEG_A, InputSequence, SubToken, Vocab, assemble, tokenize_document
from .visual_backbone import mask_regions

log = logging.getLogger(__name__)

MVLM_RATE = 0.15
MVLM_MASK_FRAC = 0.8
MVLM_RANDOM_FRAC = 0.1
TIA_LINE_RATE = 0.15
TIM_REPLACE_RATE = 0.15
TIM_DROP_RATE = 0.05

NOT_COVERED, COVERED = 0, 1
UNMATCHED, MATCHED = 0, 1
TIM_KINDS = ("matched", "replaced", "dropped")


@dataclass(frozen=True)
class PretrainTasks:
    mvlm: bool = True
    tia: bool = True
    tim: bool = True

    @classmethod
    def parse(cls, spec: str | Sequence[str]) -> "PretrainTasks":
        names = [s.strip().lower() for s in (spec.split(",") if isinstance(spec, str) else spec) if s.strip()]
        unknown = set(names) - {"mvlm", "tia", "tim"}
        if unknown:
            raise ContractError(f"unknown pre-training tasks {sorted(unknown)}")
        return cls("mvlm" in names, "tia" in names, "tim" in names)

    def names(self) -> list[str]:
        return [n for n in ("mvlm", "tia", "tim") if getattr(self, n)]


@dataclass
class PretrainSample:
    input: InputSequence
    mvlm_labels: np.ndarray  # (L,) original id or IGNORE
    tia_labels: np.ndarray  # (L,) COVERED / NOT_COVERED / IGNORE
    tim_label: int  # MATCHED / UNMATCHED, or IGNORE when TIM is off
    image: np.ndarray  # raster after masking and covering
    covered_line_ids: list[int] = field(default_factory=list)
    masked_token_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    tim_kind: str = "matched"
    doc_id: str = ""


def sample_window(pieces: Sequence[SubToken], L: int, rng: np.random.Generator) -> list[SubToken]:
    """A random contiguous window of at most ``L - 2`` pieces (the whole
    sequence when it already fits)."""
    if not pieces:
        raise ContractError("cannot sample a window from an empty document")
    budget = L - 2
    if budget < 1:
        raise ContractError(f"L={L} leaves no room for text")
    if len(pieces) <= budget:
        return list(pieces)
    start = int(rng.integers(0, len(pieces) - budget + 1))
    return list(pieces[start:start + budget])


def eligible_positions(seq: InputSequence) -> np.ndarray:
    """Real text positions (not [CLS]/[SEP]/[PAD])."""
    return np.nonzero(~seq.is_special)[0]


def apply_mvlm(seq: InputSequence, rng: np.random.Generator, vocab_size: int, rate: float = MVLM_RATE,
               first_regular_id: int = 5) -> tuple[InputSequence, np.ndarray, np.ndarray]:
    """Select each eligible position with probability ``rate``; replace with
    [MASK] (80%), a random regular token (10%), or keep (10%). Boxes are untouched."""
    out = seq.copy()
    labels = np.full(len(seq), IGNORE, dtype=np.int64)
    elig = eligible_positions(seq)
    picked = elig[rng.random(len(elig)) < rate]
    treat = rng.random(len(picked))
    randoms = rng.integers(first_regular_id, vocab_size, size=len(picked))
    labels[picked] = seq.token_ids[picked]
    for pos, u, r in zip(picked, treat, randoms):
        if u < MVLM_MASK_FRAC:
            out.token_ids[pos] = MASK_ID
        elif u < MVLM_MASK_FRAC + MVLM_RANDOM_FRAC:
            out.token_ids[pos] = r
    return out, labels, picked


def line_boxes(doc: Document, lines) -> list:
    lines = set(lines)
    return [t.box for t in doc.tokens if t.line_id in lines]


def apply_tia(seq: InputSequence, doc: Document, rng: np.random.Generator,
              masked_positions: Sequence[int] = (), rate: float = TIA_LINE_RATE
              ) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Cover each distinct line of the window with probability ``rate``.

    Returns per-position labels (IGNORE at specials and MVLM-masked
    positions), the covered raster, and the covered line ids.
    """
    lines = sorted({src[1] for src in seq.source_map if src is not None})
    draws = rng.random(len(lines))
    covered = [ln for ln, u in zip(lines, draws) if u < rate]
    raster = mask_regions(doc.page.image, line_boxes(doc, covered))
    cov = set(covered)
    labels = np.full(len(seq), IGNORE, dtype=np.int64)
    for pos, src in enumerate(seq.source_map):
        if src is not None:
            labels[pos] = COVERED if src[1] in cov else NOT_COVERED
    labels[np.asarray(masked_positions, dtype=np.int64)] = IGNORE
    return labels, raster, covered


def _blanked_boxes(sample: PretrainSample, doc: Document) -> list:
    masked = [sample.input.boxes[p] for p in sample.masked_token_positions]
    return line_boxes(doc, sample.covered_line_ids) + masked


def build_tim(sample: PretrainSample, corpus: Sequence[Document], doc_index: int,
              rng: np.random.Generator, replace_rate: float = TIM_REPLACE_RATE,
              drop_rate: float = TIM_DROP_RATE) -> PretrainSample:
    """Turn ``sample`` into a TIM negative with probability replace+drop.

    Negatives get another page's raster (or an all-zero one), re-masked and
    re-covered exactly like the positive, and every TIA label becomes Covered.
    """
    u = rng.random()
    if u < replace_rate:
        kind = "replaced"
        if len(corpus) < 2:
            log.warning("TIM replacement needs >= 2 documents; dropping the image instead")
            kind = "dropped"
    elif u < replace_rate + drop_rate:
        kind = "dropped"
    else:
        sample.tim_label = MATCHED
        sample.tim_kind = "matched"
        return sample

    doc = corpus[doc_index]
    if kind == "replaced":
        other = int(rng.integers(len(corpus) - 1))
        other += other >= doc_index
        base = corpus[other].page.image
    else:
        base = np.zeros_like(doc.page.image)
    sample.image = mask_regions(base, _blanked_boxes(sample, doc))
    sample.tia_labels = np.where(sample.tia_labels == IGNORE, IGNORE, COVERED)
    sample.tim_label = UNMATCHED
    sample.tim_kind = kind
    return sample


def make_sample(corpus: Sequence[Document], doc_index: int, vocab: Vocab, L: int,
                rng: np.random.Generator, tasks: PretrainTasks = PretrainTasks(),
                pieces: Sequence[SubToken] | None = None) -> PretrainSample:
    """Build one pre-training sample for ``corpus[doc_index]``; a pure function of
    (corpus, index, rng state)."""
    doc = corpus[doc_index]
    if pieces is None:
        pieces = tokenize_document(doc, vocab)
    window = sample_window(pieces, L, rng)
    seq = assemble([(window, SEG_A)], L)

    if tasks.mvlm:
        masked_seq, mvlm_labels, masked = apply_mvlm(seq, rng, len(vocab), first_regular_id=vocab.first_regular_id)
    else:
        masked_seq, mvlm_labels, masked = seq, np.full(L, IGNORE, dtype=np.int64), np.zeros(0, dtype=np.int64)

    if tasks.tia:
        tia_labels, raster, covered = apply_tia(seq, doc, rng, masked)
    else:
        tia_labels, raster, covered = np.full(L, IGNORE, dtype=np.int64), doc.page.image, []

    image = mask_regions(raster, [seq.boxes[p] for p in masked])
    sample = PretrainSample(masked_seq, mvlm_labels, tia_labels, IGNORE, image, covered,
                            np.asarray(masked, dtype=np.int64), "matched", doc.id)
    if tasks.tim:
        sample = build_tim(sample, corpus, doc_index, rng)
    return sample


# ---------------------------------------------------------------------------
# heads and losses


def prior_logits(tasks: PretrainTasks) -> tuple[float, float]:
    """Log-odds of Covered and of Matched under the sampling rates for ``tasks``."""
    neg = TIM_REPLACE_RATE + TIM_DROP_RATE if tasks.tim else 0.0
    covered = (1 - neg) * TIA_LINE_RATE + neg
    matched = 1 - (TIM_REPLACE_RATE + TIM_DROP_RATE)
    return math.log(covered / (1 - covered)), math.log(matched / (1 - matched))


def init_heads(store: nx.ParamStore, hidden: int, vocab_size: int, rng: np.random.Generator,
               std: float = 0.02, tasks: PretrainTasks | None = None) -> None:
    """Pre-training heads. With ``tasks`` the binary head biases start at the label
    log-odds; from zero the encoder learns the class prior by collapsing every
    token onto one vector, which stalls TIA and TIM."""
    init_linear(store, "heads.mvlm.transform", hidden, hidden, rng, std)
    store.add("heads.mvlm.ln.weight", np.ones(hidden, dtype=nx.default_dtype()))
    store.add("heads.mvlm.ln.bias", np.zeros(hidden, dtype=nx.default_dtype()))
    init_linear(store, "heads.mvlm.decoder", hidden, vocab_size, rng, std)
    init_linear(store, "heads.tia", hidden, 1, rng, std)
    init_linear(store, "heads.tim", hidden, 1, rng, std)
    if tasks is not None:
        tia, tim = prior_logits(tasks)
        store["heads.tia.bias"].data[:] = tia
        store["heads.tim.bias"].data[:] = tim


@dataclass
class PretrainTargets:
    mvlm: np.ndarray  # (B, L)
    tia: np.ndarray  # (B, L)
    tim: np.ndarray  # (B,)

    @classmethod
    def from_samples(cls, samples: Sequence[PretrainSample]) -> "PretrainTargets":
        return cls(np.stack([s.mvlm_labels for s in samples]), np.stack([s.tia_labels for s in samples]),
                   np.array([s.tim_label for s in samples], dtype=np.int64))

    def trim(self, width: int) -> "PretrainTargets":
        return PretrainTargets(self.mvlm[:, :width], self.tia[:, :width], self.tim)


@dataclass
class PretrainLoss:
    total: nx.Tensor
    mvlm: float
    tia: float
    tim: float
    counts: dict  # labelled items per component; 0 flags an absent component
    mvlm_logits: np.ndarray | None = None  # (k, V) at labelled positions
    tia_logits: np.ndarray | None = None  # (B, L)
    tim_logits: np.ndarray | None = None  # (B,)


def mvlm_logits(params, text_rows: nx.Tensor) -> nx.Tensor:
    h = nx.gelu(apply_linear(params, "heads.mvlm.transform", text_rows))
    h = nx.layer_norm(h, params["heads.mvlm.ln.weight"], params["heads.mvlm.ln.bias"])
    return apply_linear(params, "heads.mvlm.decoder", h)


def pretrain_loss(params, out: EncoderOutput, targets: PretrainTargets) -> PretrainLoss:
    """MVLM cross-entropy + TIA binary cross-entropy + TIM binary cross-entropy
    (unweighted sum); each is a mean over its labelled items."""
    text = out.text
    bsz, L, d = text.shape
    parts: list[nx.Tensor] = []
    counts = {}

    flat_labels = targets.mvlm.reshape(-1)
    rows = np.nonzero(flat_labels != IGNORE)[0]
    m_logits = None
    if len(rows):
        picked = nx.embedding(nx.reshape(text, (bsz * L, d)), rows)
        logits = mvlm_logits(params, picked)
        m_loss, counts["mvlm"] = nx.cross_entropy(logits, flat_labels[rows])
        m_logits = logits.data
        parts.append(m_loss)
    else:
        m_loss, counts["mvlm"] = None, 0

    tia_logits = nx.reshape(apply_linear(params, "heads.tia", text), (bsz, L))
    tia_mask = targets.tia != IGNORE
    t_loss, counts["tia"] = nx.bce_with_logits(tia_logits, np.where(tia_mask, targets.tia, 0), tia_mask)
    if counts["tia"]:
        parts.append(t_loss)

    tim_logits = nx.reshape(apply_linear(params, "heads.tim", out.cls), (bsz,))
    tim_mask = targets.tim != IGNORE
    c_loss, counts["tim"] = nx.bce_with_logits(tim_logits, np.where(tim_mask, targets.tim, 0), tim_mask)
    if counts["tim"]:
        parts.append(c_loss)

    total = parts[0] if parts else nx.Tensor(np.zeros((), dtype=text.dtype))
    for p in parts[1:]:
        total = total + p
    return PretrainLoss(total,
                        m_loss.item() if m_loss is not None else 0.0,
                        t_loss.item(), c_loss.item(), counts,
                        m_logits, tia_logits.data, tim_logits.data)


# ---------------------------------------------------------------------------
# offline sample serialization

_MAGIC = b"PTS1"
_HEADER = struct.Struct("<4sIIIbBII")


def _write_record(fh, s: PretrainSample) -> None:
    seq = s.input
    L = len(seq)
    img = np.ascontiguousarray(s.image, dtype=np.uint8)
    fh.write(_HEADER.pack(_MAGIC, L, img.shape[0], img.shape[1], int(s.tim_label),
                          TIM_KINDS.index(s.tim_kind), len(s.covered_line_ids), len(s.masked_token_positions)))
    words = np.array([-1 if m is None else m[0] for m in seq.source_map], dtype="<i4")
    lines = np.array([-1 if m is None else m[1] for m in seq.source_map], dtype="<i4")
    for arr, dt in ((seq.token_ids, "<i4"), (seq.segments, "u1"), (seq.pos1d, "<i4"),
                    (seq.boxes.reshape(-1), "<u2"), (seq.first_piece, "u1"), (words, "<i4"), (lines, "<i4"),
                    (s.mvlm_labels, "<i4"), (s.tia_labels, "i1"),
                    (np.asarray(s.covered_line_ids), "<i4"), (s.masked_token_positions, "<i4")):
        fh.write(np.asarray(arr).astype(dt).tobytes())
    fh.write(img.tobytes())
    doc_id = s.doc_id.encode("utf-8")
    fh.write(struct.pack("<I", len(doc_id)) + doc_id)


def _read_array(buf: memoryview, off: int, dt: str, n: int) -> tuple[np.ndarray, int]:
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=off)
    return arr.copy(), off + arr.nbytes


def write_samples(path: str | os.PathLike, samples: Sequence[PretrainSample], seed: int) -> None:
    """``<path>.bin`` (little-endian fixed-width records) plus ``<path>.manifest.json``."""
    path = Path(path)
    with open(path.with_suffix(".bin"), "wb") as fh:
        for s in samples:
            _write_record(fh, s)
    manifest = {
        "format": "pretrain-samples/1",
        "count": len(samples),
        "seed": seed,
        "tim": {k: sum(s.tim_kind == k for s in samples) for k in TIM_KINDS},
    }
    with open(path.with_suffix(".manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def read_samples(path: str | os.PathLike) -> list[PretrainSample]:
    path = Path(path)
    buf = memoryview(path.with_suffix(".bin").read_bytes())
    out = []
    off = 0
    while off < len(buf):
        magic, L, h, w, tim_label, kind, n_cov, n_mask = _HEADER.unpack_from(buf, off)
        if magic != _MAGIC:
            raise ContractError(f"bad sample record at byte {off}")
        off += _HEADER.size
        ids, off = _read_array(buf, off, "<i4", L)
        segs, off = _read_array(buf, off, "u1", L)
        pos, off = _read_array(buf, off, "<i4", L)
        boxes, off = _read_array(buf, off, "<u2", L * 4)
        first, off = _read_array(buf, off, "u1", L)
        words, off = _read_array(buf, off, "<i4", L)
        lines, off = _read_array(buf, off, "<i4", L)
        mvlm, off = _read_array(buf, off, "<i4", L)
        tia, off = _read_array(buf, off, "i1", L)
        cov, off = _read_array(buf, off, "<i4", n_cov)
        masked, off = _read_array(buf, off, "<i4", n_mask)
        img, off = _read_array(buf, off, "u1", h * w)
        (n_id,) = struct.unpack_from("<I", buf, off)
        off += 4
        doc_id = bytes(buf[off:off + n_id]).decode("utf-8")
        off += n_id
        seq = InputSequence(ids.astype(np.int64), segs.astype(np.int64), pos.astype(np.int64),
                            boxes.astype(np.int64).reshape(L, 4),
                            [None if wd < 0 else (int(wd), int(ln)) for wd, ln in zip(words, lines)],
                            first.astype(bool))
        out.append(PretrainSample(seq, mvlm.astype(np.int64), tia.astype(np.int64), int(tim_label),
                                  img.reshape(h, w), [int(c) for c in cov], masked.astype(np.int64),
                                  TIM_KINDS[kind], doc_id))
    return out
