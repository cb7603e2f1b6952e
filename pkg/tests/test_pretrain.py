import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layoutlmv2 import numerics as nx
from layoutlmv2.doc_model import pixel_span
from layoutlmv2.errors import ContractError
from layoutlmv2.heads import IGNORE, EncoderOutput
from layoutlmv2.pretrain import (COVERED, MATCHED, NOT_COVERED, UNMATCHED, PretrainTargets, PretrainTasks,
                                 apply_mvlm, apply_tia, init_heads, make_sample, pretrain_loss, read_samples,
                                 sample_window, write_samples)
from layoutlmv2.synth_corpus import GenConfig, generate
from layoutlmv2.tokenizer import MASK_ID, SEG_A, assemble, tokenize_document
from layoutlmv2.training import build_vocab


@pytest.fixture(scope="module")
def setup():
    docs = generate(GenConfig(seed=3), 6)
    return docs, build_vocab(docs)


def _seq(doc, vocab, L=64):
    return assemble([(tokenize_document(doc, vocab), SEG_A)], L)


def test_tasks_parse():
    assert PretrainTasks.parse("mvlm, TIA").names() == ["mvlm", "tia"]
    with pytest.raises(ContractError):
        PretrainTasks.parse("mvlm,foo")


def test_sample_window():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        sample_window([], 8, rng)
    pieces = list(range(20))
    w = sample_window(pieces, 8, rng)
    assert len(w) == 6 and w == pieces[w[0]:w[0] + 6]
    assert sample_window(pieces[:3], 8, rng) == pieces[:3]


def test_mvlm_rate_one_and_zero(setup):
    docs, vocab = setup
    seq = _seq(docs[0], vocab)
    out, labels, picked = apply_mvlm(seq, np.random.default_rng(0), len(vocab), rate=0.0)
    assert len(picked) == 0 and np.all(labels == IGNORE) and np.array_equal(out.token_ids, seq.token_ids)
    out, labels, picked = apply_mvlm(seq, np.random.default_rng(0), len(vocab), rate=1.0)
    assert np.array_equal(picked, np.nonzero(~seq.is_special)[0])
    assert np.array_equal(labels[picked], seq.token_ids[picked])
    # specials never change and boxes are untouched
    assert np.array_equal(out.token_ids[seq.is_special], seq.token_ids[seq.is_special])
    assert np.array_equal(out.boxes, seq.boxes)
    assert (out.token_ids[picked] == MASK_ID).mean() > 0.5


def test_mvlm_ratios(setup):
    docs, vocab = setup
    seqs = [_seq(d, vocab) for d in docs]
    rng = np.random.default_rng(1)
    n_elig = n_pick = n_mask = n_keep = 0
    for _ in range(300):
        for seq in seqs:
            out, labels, picked = apply_mvlm(seq, rng, len(vocab))
            n_elig += int((~seq.is_special).sum())
            n_pick += len(picked)
            n_mask += int((out.token_ids[picked] == MASK_ID).sum())
            n_keep += int((out.token_ids[picked] == seq.token_ids[picked]).sum())
    assert 0.14 <= n_pick / n_elig <= 0.16
    assert abs(n_mask / n_pick - 0.8) < 0.02
    # kept includes random draws that happen to hit the original id
    assert abs(n_keep / n_pick - 0.1) < 0.02


def test_tia_labels_are_line_atomic(setup):
    docs, vocab = setup
    seq = _seq(docs[1], vocab)
    labels, raster, covered = apply_tia(seq, docs[1], np.random.default_rng(0), rate=1.0)
    real = ~seq.is_special
    assert np.all(labels[real] == COVERED) and np.all(labels[~real] == IGNORE)
    labels, raster, covered = apply_tia(seq, docs[1], np.random.default_rng(0), rate=0.0)
    assert covered == [] and np.array_equal(raster, docs[1].page.image)
    assert np.all(labels[real] == NOT_COVERED)
    for seed in range(20):
        labels, raster, covered = apply_tia(seq, docs[1], np.random.default_rng(seed), rate=0.5)
        by_line = {}
        for pos, src in enumerate(seq.source_map):
            if src is not None:
                by_line.setdefault(src[1], set()).add(int(labels[pos]))
        assert all(len(v) == 1 for v in by_line.values())
        # the raster only changes inside covered boxes
        diff = raster != docs[1].page.image
        inside = np.zeros_like(diff)
        h, w = raster.shape
        for t in docs[1].tokens:
            if t.line_id in covered:
                c0, c1 = pixel_span(t.box.x0, t.box.x1, w)
                r0, r1 = pixel_span(t.box.y0, t.box.y1, h)
                inside[r0:r1, c0:c1] = True
        assert not (diff & ~inside).any()


def test_tia_ignores_mvlm_positions(setup):
    docs, vocab = setup
    seq = _seq(docs[2], vocab)
    masked = np.nonzero(~seq.is_special)[0][:3]
    labels, _, _ = apply_tia(seq, docs[2], np.random.default_rng(0), masked, rate=1.0)
    assert np.all(labels[masked] == IGNORE)


def test_tim_negatives(setup):
    docs, vocab = setup
    kinds = {"matched": 0, "replaced": 0, "dropped": 0}
    for k in range(400):
        s = make_sample(docs, k % len(docs), vocab, 64, np.random.default_rng(k))
        kinds[s.tim_kind] += 1
        if s.tim_label == UNMATCHED:
            assert set(np.unique(s.tia_labels)) <= {COVERED, IGNORE}
        else:
            assert s.tim_label == MATCHED
        if s.tim_kind == "dropped":
            assert s.image.max() == 0
    assert kinds["replaced"] > kinds["dropped"] > 0


def test_tim_needs_two_docs_for_replacement(setup):
    docs, vocab = setup
    for seed in range(30):
        s = make_sample(docs[:1], 0, vocab, 64, np.random.default_rng(seed))
        assert s.tim_kind in ("matched", "dropped")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_masked_token_pixels_are_zero(seed):
    docs = generate(GenConfig(seed=seed % 7), 3)
    vocab = build_vocab(docs)
    s = make_sample(docs, seed % 3, vocab, 64, np.random.default_rng(seed))
    h, w = s.image.shape
    for p in s.masked_token_positions:
        x0, x1, y0, y1 = s.input.boxes[p]
        c0, c1 = pixel_span(x0, x1, w)
        r0, r1 = pixel_span(y0, y1, h)
        assert np.all(s.image[r0:r1, c0:c1] == 0)


def test_disabled_tasks_leave_ignore(setup):
    docs, vocab = setup
    s = make_sample(docs, 0, vocab, 64, np.random.default_rng(0), PretrainTasks.parse("tia"))
    assert np.all(s.mvlm_labels == IGNORE) and s.tim_label == IGNORE
    assert len(s.masked_token_positions) == 0
    s = make_sample(docs, 0, vocab, 64, np.random.default_rng(0), PretrainTasks.parse("mvlm"))
    assert np.all(s.tia_labels == IGNORE) and s.covered_line_ids == []


def test_tia_rows_at_masked_positions_get_no_gradient(setup):
    docs, vocab = setup
    rng = np.random.default_rng(0)
    store = nx.ParamStore()
    init_heads(store, 6, len(vocab), rng)
    samples = [make_sample(docs, k, vocab, 32, np.random.default_rng(k), PretrainTasks.parse("mvlm,tia"))
               for k in range(len(docs))]
    targets = PretrainTargets.from_samples(samples)
    masked = targets.mvlm != IGNORE
    assert masked.any()
    # TIA alone: MVLM and TIM targets switched off, encoder rows as leaves
    rows = nx.Tensor(rng.normal(size=(len(docs), 1 + 32, 6)), requires_grad=True)
    tia_only = PretrainTargets(np.full_like(targets.mvlm, IGNORE), targets.tia,
                               np.full(len(docs), IGNORE))
    nx.backward(pretrain_loss(store, EncoderOutput(rows, 1), tia_only).total)
    text_grad = rows.grad[:, 1:]
    assert np.all(text_grad[masked] == 0.0)
    assert np.any(text_grad[targets.tia != IGNORE] != 0.0)


def test_pretrain_loss_components():
    rng = np.random.default_rng(0)
    store = nx.ParamStore()
    init_heads(store, 6, 11, rng)
    rows = nx.Tensor(rng.normal(size=(1, 1 + 3, 6)))
    mvlm = np.array([[IGNORE, 3, IGNORE]])
    tia = np.array([[IGNORE, IGNORE, 1]])
    loss = pretrain_loss(store, EncoderOutput(rows, 1), PretrainTargets(mvlm, tia, np.array([1])))
    assert loss.counts == {"mvlm": 1, "tia": 1, "tim": 1}
    assert loss.total.item() == pytest.approx(loss.mvlm + loss.tia + loss.tim)
    # a zero-logit binary head gives ln 2
    store["heads.tim.weight"].data[:] = 0
    loss = pretrain_loss(store, EncoderOutput(rows, 1), PretrainTargets(mvlm, tia, np.array([1])))
    assert loss.tim == pytest.approx(np.log(2), rel=1e-6)


def test_sample_file_round_trip(tmp_path, setup):
    docs, vocab = setup
    samples = [make_sample(docs, k % len(docs), vocab, 48, np.random.default_rng(k)) for k in range(12)]
    write_samples(tmp_path / "s", samples, seed=5)
    back = read_samples(tmp_path / "s")
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert np.array_equal(a.input.token_ids, b.input.token_ids)
        assert np.array_equal(a.input.boxes, b.input.boxes)
        assert a.input.source_map == b.input.source_map
        assert np.array_equal(a.mvlm_labels, b.mvlm_labels) and np.array_equal(a.tia_labels, b.tia_labels)
        assert (a.tim_label, a.tim_kind, a.doc_id) == (b.tim_label, b.tim_kind, b.doc_id)
        assert np.array_equal(a.image, b.image)
        assert a.covered_line_ids == b.covered_line_ids
    blob = (tmp_path / "s.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ContractError):
        read_samples(tmp_path / "t")


def test_make_sample_is_pure(setup):
    docs, vocab = setup
    a = make_sample(docs, 3, vocab, 64, np.random.default_rng(9))
    b = make_sample(docs, 3, vocab, 64, np.random.default_rng(9))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.input.token_ids, b.input.token_ids)
    assert a.tim_label == b.tim_label


@pytest.mark.parametrize("tasks, covered, matched", [
    ("tia", 0.15, 0.8),
    ("mvlm,tia,tim", 0.8 * 0.15 + 0.2, 0.8),
])
def test_binary_heads_start_at_label_prior(tasks, covered, matched):
    store = nx.ParamStore()
    init_heads(store, 6, 11, np.random.default_rng(0), tasks=PretrainTasks.parse(tasks))
    sigmoid = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    assert sigmoid(store["heads.tia.bias"].data[0]) == pytest.approx(covered)
    assert sigmoid(store["heads.tim.bias"].data[0]) == pytest.approx(matched)


def test_heads_without_tasks_have_zero_bias():
    store = nx.ParamStore()
    init_heads(store, 6, 11, np.random.default_rng(0))
    assert store["heads.tia.bias"].data[0] == 0.0 and store["heads.tim.bias"].data[0] == 0.0
