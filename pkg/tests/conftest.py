from pathlib import Path

import numpy as np
import pytest

from layoutlmv2.doc_model import BBox, Document, EntitySpan, Labels, Page, QAPair, Token
from layoutlmv2.synth_corpus import GenConfig, generate

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def funsd_pair():
    d = FIXTURES / "funsd"
    return d / "form_0001.json", d / "form_0001.png"


@pytest.fixture(scope="session")
def small_corpus():
    return generate(GenConfig(seed=3), 6)


def make_doc(words, lines=None, spans=(), qa=(), doc_class=None, size=(100, 100), doc_id="doc"):
    """Document from ``(text, (x0, x1, y0, y1))`` pairs on a white page."""
    lines = lines if lines is not None else list(range(len(words)))
    tokens = [Token(t, BBox(*b), l) for (t, b), l in zip(words, lines)]
    labels = Labels([EntitySpan(*s) for s in spans], doc_class, [QAPair(*q) for q in qa])
    return Document(doc_id, Page(np.full(size, 255, dtype=np.uint8), tokens), labels)


# acceptance verdicts, keyed by criterion id ("1", "7a", ...)
ACCEPTANCE: dict[str, str] = {}


def _criterion_order(key: str) -> tuple[int, str]:
    digits = "".join(c for c in key if c.isdigit())
    return int(digits), key[len(digits):]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=_criterion_order):
            terminalreporter.write_line(ACCEPTANCE[key])
