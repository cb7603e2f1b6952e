"""Entity-level P/R/F1, ANLS, accuracy, and Levenshtein distance."""
from __future__ import annotations

from typing import Iterable, Sequence

from .doc_model import EntitySpan
from .errors import ContractError

ANLS_THRESHOLD = 0.5


def _key(span) -> tuple:
    if isinstance(span, EntitySpan):
        return (span.start, span.end, span.category)
    return tuple(span)


def entity_prf(gold: Iterable, pred: Iterable) -> tuple[float, float, float]:
    """Exact-match (start, end, category) precision, recall and F1."""
    gold_set = {_key(s) for s in gold}
    pred_set = {_key(s) for s in pred}
    tp = len(gold_set & pred_set)
    p = tp / len(pred_set) if pred_set else 0.0
    r = tp / len(gold_set) if gold_set else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def corpus_prf(pairs: Iterable[tuple[Iterable, Iterable]]) -> tuple[float, float, float]:
    """Micro-averaged P/R/F1 over documents (spans are compared within a document)."""
    tp = n_gold = n_pred = 0
    for gold, pred in pairs:
        g = {_key(s) for s in gold}
        q = {_key(s) for s in pred}
        tp += len(g & q)
        n_gold += len(g)
        n_pred += len(q)
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls(pred: str, golds: Sequence[str], threshold: float = ANLS_THRESHOLD) -> float:
    """Best normalized Levenshtein similarity against any gold answer (case-insensitive)."""
    if not golds:
        raise ContractError("anls needs at least one gold answer")
    p = pred.lower()
    best = 0.0
    for g in golds:
        g = g.lower()
        longest = max(len(p), len(g))
        nl = levenshtein(p, g) / longest if longest else 0.0
        best = max(best, 1.0 - nl if nl < threshold else 0.0)
    return best


def mean_anls(preds: Sequence[str], golds: Sequence[Sequence[str]]) -> float:
    if len(preds) != len(golds):
        raise ContractError("predictions and gold answer lists differ in length")
    if not preds:
        return 0.0
    return sum(anls(p, g) for p, g in zip(preds, golds)) / len(preds)


def accuracy(gold: Sequence, pred: Sequence) -> float:
    if len(gold) != len(pred):
        raise ContractError(f"length mismatch: {len(gold)} gold vs {len(pred)} predicted")
    if not gold:
        return 0.0
    return sum(g == p for g, p in zip(gold, pred)) / len(gold)
