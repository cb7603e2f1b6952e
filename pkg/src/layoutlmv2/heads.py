"""Task heads over encoder outputs: pre-training classifiers, BIO labeling,
extractive QA, and document classification."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .doc_model import EntitySpan
from .tokenizer import SEG_B, InputSequence

IGNORE = -100
MAX_ANSWER_LEN = 30


@dataclass
class EncoderOutput:
    """Encoder rows (B, WH + L, d); the first WH rows are visual."""

    rows: nx.Tensor
    num_visual: int
    pre_visual: nx.Tensor | None = None  # (B, WH, d) visual embeddings before the encoder

    @property
    def visual(self) -> nx.Tensor:
        return nx.index(self.rows, (slice(None), slice(0, self.num_visual)))

    @property
    def text(self) -> nx.Tensor:
        return nx.index(self.rows, (slice(None), slice(self.num_visual, None)))

    @property
    def cls(self) -> nx.Tensor:
        return nx.index(self.rows, (slice(None), self.num_visual))


def init_linear(store: nx.ParamStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
                std: float = 0.02) -> None:
    dt = nx.default_dtype()
    store.add(f"{name}.weight", rng.normal(0, std, (fan_in, fan_out)).astype(dt))
    store.add(f"{name}.bias", np.zeros(fan_out, dtype=dt))


def apply_linear(params, name: str, x: nx.Tensor) -> nx.Tensor:
    return nx.linear(x, params[f"{name}.weight"], params[f"{name}.bias"])


def has_head(params, name: str) -> bool:
    return f"{name}.weight" in params


# ---------------------------------------------------------------------------
# sequence labeling


def bio_tags(categories: Sequence[str]) -> list[str]:
    """``O`` followed by ``B-c``/``I-c`` for each category, in the given order."""
    tags = ["O"]
    for c in categories:
        tags += [f"B-{c}", f"I-{c}"]
    return tags


def seq_label_head(params, out: EncoderOutput, name: str = "heads.labeling") -> nx.Tensor:
    return apply_linear(params, name, out.text)


def word_tags(num_words: int, spans: Sequence[EntitySpan]) -> list[str]:
    tags = ["O"] * num_words
    for s in spans:
        tags[s.start] = f"B-{s.category}"
        for k in range(s.start + 1, s.end):
            tags[k] = f"I-{s.category}"
    return tags


def subtoken_labels(seq: InputSequence, spans: Sequence[EntitySpan], tags: Sequence[str]) -> np.ndarray:
    """Per-position tag ids: the first piece of a word carries its B/I/O tag,
    continuation pieces carry I of the same category, specials are IGNORE."""
    tag_id = {t: i for i, t in enumerate(tags)}
    max_word = max((s[0] for s in seq.source_map if s is not None), default=-1)
    max_word = max(max_word, max((sp.end for sp in spans), default=0) - 1)
    wt = word_tags(max_word + 1, spans)
    labels = np.full(len(seq), IGNORE, dtype=np.int64)
    for pos, src in enumerate(seq.source_map):
        if src is None:
            continue
        tag = wt[src[0]]
        if not seq.first_piece[pos] and tag.startswith("B-"):
            tag = "I-" + tag[2:]
        labels[pos] = tag_id[tag]
    return labels


def decode_bio(tags: Sequence[str]) -> list[EntitySpan]:
    """Spans from word-level BIO tags. An ``I-c`` not continuing a ``c`` span opens a new one."""
    spans = []
    start, cat = None, None
    for i, t in enumerate(list(tags) + ["O"]):
        kind, _, c = t.partition("-")
        if kind == "I" and cat == c and start is not None:
            continue
        if start is not None:
            spans.append(EntitySpan(start, i, cat))
            start, cat = None, None
        if kind in ("B", "I"):
            start, cat = i, c
    return spans


def word_predictions(seq: InputSequence, position_tags: Sequence[str]) -> dict[int, str]:
    """Word index -> predicted tag, read from each word's first piece."""
    out = {}
    for pos, src in enumerate(seq.source_map):
        if src is not None and seq.first_piece[pos]:
            out[src[0]] = position_tags[pos]
    return out


# ---------------------------------------------------------------------------
# extractive QA


def qa_head(params, out: EncoderOutput, name: str = "heads.qa") -> tuple[nx.Tensor, nx.Tensor]:
    logits = apply_linear(params, name, out.text)  # (B, L, 2)
    return nx.index(logits, (Ellipsis, 0)), nx.index(logits, (Ellipsis, 1))


def best_span(start_logits: np.ndarray, end_logits: np.ndarray, allowed: np.ndarray,
              max_len: int = MAX_ANSWER_LEN) -> tuple[int, int] | None:
    """Highest ``start + end`` pair with s <= e, both allowed, length <= max_len.

    Ties go to the earlier start, then the earlier end. ``None`` when no pair is valid.
    """
    idx = np.nonzero(allowed)[0]
    best, best_score = None, -np.inf
    for s in idx:
        for e in idx[(idx >= s) & (idx < s + max_len)]:
            score = start_logits[s] + end_logits[e]
            if score > best_score:
                best, best_score = (int(s), int(e)), score
    return best


def context_positions(seq: InputSequence) -> np.ndarray:
    """Positions eligible as answer boundaries: non-special tokens of segment B."""
    return (seq.segments == SEG_B) & ~seq.is_special


def qa_targets(seq: InputSequence, answer_start: int, answer_end: int) -> tuple[int, int]:
    """Gold (start, end) positions for word span [answer_start, answer_end); (0, 0) if truncated away."""
    ctx = context_positions(seq)
    starts = [p for p, s in enumerate(seq.source_map) if ctx[p] and s[0] == answer_start]
    ends = [p for p, s in enumerate(seq.source_map) if ctx[p] and s[0] == answer_end - 1]
    if not starts or not ends:
        return 0, 0
    return starts[0], ends[-1]


def span_text(seq: InputSequence, span: tuple[int, int] | None, words: Sequence[str]) -> str:
    if span is None:
        return ""
    first = seq.source_map[span[0]][0]
    last = seq.source_map[span[1]][0]
    return " ".join(words[first:last + 1])


# ---------------------------------------------------------------------------
# document classification


def doc_cls_features(pre_visual: nx.Tensor, out: EncoderOutput) -> nx.Tensor:
    """Concat(mean pre-encoder visual, mean post-encoder visual, [CLS]) -> (B, 3d)."""
    pre = nx.mean(pre_visual, axis=-2)
    post = nx.mean(out.visual, axis=-2)
    return nx.concat([pre, post, out.cls], axis=-1)


def doc_cls_head(params, pre_visual: nx.Tensor, out: EncoderOutput, name: str = "heads.classification") -> nx.Tensor:
    return apply_linear(params, name, doc_cls_features(pre_visual, out))
