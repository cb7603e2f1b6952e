"""WordPiece tokenization and fixed-length input assembly."""
from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .doc_model import BBox, Document, special_token_box
from .errors import ContractError, ValidationError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONTINUATION = "##"

SEG_A, SEG_B, SEG_C = 0, 1, 2
DEFAULT_MAX_LEN = 512


def fold(text: str) -> str:
    """Lower-case ASCII letters; other characters pass through."""
    return "".join(c.lower() if c.isascii() else c for c in text)


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:5]) != RESERVED:
            raise ValidationError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def id(self, token: str) -> int:
        return self.ids.get(token, UNK_ID)

    @property
    def first_regular_id(self) -> int:
        return len(RESERVED)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])

    @classmethod
    def build(cls, words: Iterable[str], min_freq: int = 1, extra: Iterable[str] = ()) -> "Vocab":
        """Whole words seen at least ``min_freq`` times, plus every character in both
        word-initial and ``##`` continuation form so any word over the seen alphabet
        tokenizes without [UNK]."""
        counts = Counter(fold(w) for w in words if w)
        chars = sorted({c for w in counts for c in w})
        pieces = list(RESERVED)
        seen = set(pieces)
        for tok in list(extra) + sorted(w for w, c in counts.items() if c >= min_freq) \
                + chars + [CONTINUATION + c for c in chars]:
            if tok not in seen:
                seen.add(tok)
                pieces.append(tok)
        return cls(pieces)


def wordpiece_tokenize(word: str, vocab: Vocab, max_chars: int = 100) -> list[int]:
    """Greedy longest-match-first; the whole word becomes [UNK] if any piece fails."""
    word = fold(word)
    if not word or len(word) > max_chars:
        return [UNK_ID]
    ids = []
    start = 0
    while start < len(word):
        end = len(word)
        piece_id = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab.ids:
                piece_id = vocab.ids[piece]
                break
            end -= 1
        if piece_id is None:
            return [UNK_ID]
        ids.append(piece_id)
        start = end
    return ids


@dataclass(frozen=True)
class SubToken:
    id: int
    box: BBox
    word_index: int
    line_id: int
    first: bool  # first piece of its word


def tokenize_words(words: Sequence[tuple[str, BBox, int]], vocab: Vocab, offset: int = 0) -> list[SubToken]:
    out = []
    for i, (text, box, line) in enumerate(words):
        for k, piece in enumerate(wordpiece_tokenize(text, vocab)):
            out.append(SubToken(piece, box, offset + i, line, k == 0))
    return out


def tokenize_document(doc: Document, vocab: Vocab) -> list[SubToken]:
    return tokenize_words([(t.text, t.box, t.line_id) for t in doc.tokens], vocab)


@dataclass
class InputSequence:
    token_ids: np.ndarray  # (L,) int64
    segments: np.ndarray  # (L,) int64, SEG_A / SEG_B; PAD positions carry SEG_A
    pos1d: np.ndarray  # (L,) int64
    boxes: np.ndarray  # (L, 4) int64, (x0, x1, y0, y1)
    source_map: list  # (word_index, line_id) per position, None for specials
    first_piece: np.ndarray  # (L,) bool

    def __len__(self):
        return len(self.token_ids)

    @property
    def attention_mask(self) -> np.ndarray:
        return self.token_ids != PAD_ID

    @property
    def is_special(self) -> np.ndarray:
        return np.array([s is None for s in self.source_map])

    def copy(self) -> "InputSequence":
        return InputSequence(self.token_ids.copy(), self.segments.copy(), self.pos1d.copy(),
                             self.boxes.copy(), list(self.source_map), self.first_piece.copy())


def truncate(segments: list[list], budget: int) -> list[list]:
    """Drop tail pieces of the longest segment (ties: the later one) until the
    total fits ``budget``."""
    segs = [list(s) for s in segments]
    while sum(len(s) for s in segs) > budget:
        longest = max(range(len(segs)), key=lambda k: (len(segs[k]), k))
        segs[longest].pop()
    return segs


def assemble(segments: Sequence[tuple[Sequence[SubToken], int]], L: int) -> InputSequence:
    """``[CLS] A [SEP] (B [SEP]) [PAD]...`` of exactly ``L`` positions."""
    if not 1 <= len(segments) <= 2:
        raise ContractError(f"expected 1 or 2 text segments, got {len(segments)}")
    n_special = 1 + len(segments)
    if L < n_special:
        raise ContractError(f"L={L} cannot hold {n_special} special tokens")
    kept = truncate([list(toks) for toks, _ in segments], L - n_special)

    empty = special_token_box().as_list()
    ids, segs, boxes, srcs, firsts = [CLS_ID], [SEG_A], [empty], [None], [False]
    for pieces, (_, tag) in zip(kept, segments):
        for p in pieces:
            ids.append(p.id)
            segs.append(tag)
            boxes.append(p.box.as_list())
            srcs.append((p.word_index, p.line_id))
            firsts.append(p.first)
        ids.append(SEP_ID)
        segs.append(tag)
        boxes.append(empty)
        srcs.append(None)
        firsts.append(False)
    pad = L - len(ids)
    ids += [PAD_ID] * pad
    segs += [SEG_A] * pad
    boxes += [empty] * pad
    srcs += [None] * pad
    firsts += [False] * pad
    return InputSequence(np.array(ids, dtype=np.int64), np.array(segs, dtype=np.int64),
                         np.arange(L, dtype=np.int64), np.array(boxes, dtype=np.int64).reshape(L, 4),
                         srcs, np.array(firsts, dtype=bool))


def detokenize(ids: Iterable[int], vocab: Vocab) -> list[str]:
    """Join continuation pieces back into words, skipping special tokens."""
    words: list[str] = []
    for i in ids:
        if i < len(RESERVED):
            continue
        piece = vocab.tokens[i]
        if piece.startswith(CONTINUATION) and words:
            words[-1] += piece[len(CONTINUATION):]
        else:
            words.append(piece)
    return words
