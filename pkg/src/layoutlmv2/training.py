"""Pre-training and fine-tuning loops, evaluation, checkpoints, and the
full-model gradient check."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .doc_model import FUNSD_LABELS, Document
from .errors import ContractError, DivergenceError, ValidationError
from .heads import (IGNORE, MAX_ANSWER_LEN, best_span, bio_tags, context_positions, decode_bio,
                    doc_cls_head, has_head, init_linear, qa_head, qa_targets, seq_label_head, span_text,
                    subtoken_labels, word_predictions)
from .metrics import accuracy, corpus_prf, mean_anls
from .model import Batch, LayoutLMv2, ModelConfig, collate
from .pretrain import (PretrainLoss, PretrainSample, PretrainTargets, PretrainTasks, init_heads, make_sample,
                       pretrain_loss)
from .synth_corpus import FAMILIES
from .tokenizer import SEG_A, SEG_B, InputSequence, SubToken, Vocab, assemble, tokenize_document, tokenize_words
from .doc_model import special_token_box

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
TASKS = ("labeling", "qa", "classification")


# the base rate suits the full-size model; the desk presets need a much larger step
PRESET_LR = {"base": 2e-5, "tiny": 3e-3, "micro": 3e-3}


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    max_steps: int | None = None
    epochs: int | None = None
    lr: float | None = None  # None picks the preset default
    weight_decay: float = 1e-2
    warmup: float = 0.1
    grad_accum: int = 1
    preset: str = "tiny"
    tasks: str = "mvlm,tia,tim"
    spatial_bias: bool = True
    eval_every_epoch: bool = True

    def __post_init__(self):
        if self.lr is None:
            self.lr = PRESET_LR.get(self.preset, PRESET_LR["tiny"])
        if self.batch_size < 1:
            raise ContractError("batch size must be >= 1")
        if self.grad_accum < 1:
            raise ContractError("grad_accum must be >= 1")

    @classmethod
    def base(cls, **kw) -> "TrainConfig":
        return cls(**{"batch_size": 64, "epochs": 5, "preset": "base", **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)

    def total_steps(self, num_examples: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        per_epoch = math.ceil(num_examples / (self.batch_size * self.grad_accum))
        return per_epoch * (self.epochs or 1)


def build_vocab(docs: Sequence[Document], extra_words: Sequence[str] = ()) -> Vocab:
    words = [t.text for d in docs for t in d.tokens]
    words += [w for d in docs for qa in d.labels.qa for w in qa.question.split()]
    return Vocab.build(words + list(extra_words))


def _step_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


class _Schedule:
    """Deterministic epoch-wise shuffled batches of example indices."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self._order: list[int] = []
        self._epoch = 0

    def next(self) -> list[int]:
        out = []
        while len(out) < min(self.batch_size, self.n):
            if not self._order:
                self._order = list(_step_rng(self.seed, 0xE, self._epoch).permutation(self.n))
                self._epoch += 1
            out.append(int(self._order.pop(0)))
        return out


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    manifest: dict
    blob: bytes

    @classmethod
    def from_model(cls, model: LayoutLMv2, vocab: Vocab, step: int = 0, heads: dict | None = None,
                   extra: dict | None = None) -> "Checkpoint":
        store = model.store
        manifest = {
            "format_version": CHECKPOINT_FORMAT,
            "config": model.config.to_dict(),
            "step": step,
            "params": [{"name": n, "shape": list(p.shape)} for n, p in store.items()],
            "vocab": vocab.tokens,
            "heads": heads or {},
        }
        if extra:
            manifest.update(extra)
        return cls(manifest, store.to_bytes())

    def save(self, prefix: str | os.PathLike) -> tuple[Path, Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        mpath = prefix.with_name(prefix.name + ".manifest.json")
        wpath = prefix.with_name(prefix.name + ".weights.bin")
        with open(mpath, "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        wpath.write_bytes(self.blob)
        return mpath, wpath

    @classmethod
    def load(cls, prefix: str | os.PathLike) -> "Checkpoint":
        prefix = Path(prefix)
        mpath = prefix.with_name(prefix.name + ".manifest.json")
        wpath = prefix.with_name(prefix.name + ".weights.bin")
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("format_version") != CHECKPOINT_FORMAT:
            raise ValidationError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
        blob = wpath.read_bytes()
        expected = 4 * sum(int(np.prod(p["shape"])) for p in manifest["params"])
        if len(blob) != expected:
            raise ValidationError(f"weights blob has {len(blob)} bytes, manifest implies {expected}")
        return cls(manifest, blob)

    @staticmethod
    def exists(prefix: str | os.PathLike) -> bool:
        prefix = Path(prefix)
        return prefix.with_name(prefix.name + ".manifest.json").exists()

    def restore(self) -> tuple[LayoutLMv2, Vocab]:
        config = ModelConfig.from_dict(self.manifest["config"])
        store = nx.ParamStore()
        flat = np.frombuffer(self.blob, dtype="<f4")
        off = 0
        for p in self.manifest["params"]:
            size = int(np.prod(p["shape"]))
            store.add(p["name"], flat[off:off + size].reshape(p["shape"]).astype(nx.default_dtype()))
            off += size
        return LayoutLMv2(config, store), Vocab(self.manifest["vocab"])


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class PretrainResult:
    model: LayoutLMv2
    vocab: Vocab
    checkpoint: Checkpoint
    curves: list[dict] = field(default_factory=list)


def new_pretrain_model(config: ModelConfig, vocab: Vocab, seed: int,
                       tasks: PretrainTasks | None = None) -> LayoutLMv2:
    model = LayoutLMv2(config.with_(vocab_size=len(vocab)), seed=seed)
    init_heads(model.store, config.hidden, len(vocab), _step_rng(seed, 0x4EAD), config.init_std,
               tasks or PretrainTasks())
    return model


def pretrain_samples(corpus: Sequence[Document], indices: Sequence[int], vocab: Vocab, L: int, seed: int,
                     step: int, tasks: PretrainTasks, pieces: Sequence[Sequence[SubToken]] | None = None
                     ) -> list[PretrainSample]:
    return [make_sample(corpus, i, vocab, L, _step_rng(seed, step, k, i), tasks,
                        None if pieces is None else pieces[i])
            for k, i in enumerate(indices)]


def _batch(samples: Sequence[PretrainSample]) -> tuple[Batch, PretrainTargets]:
    batch = collate([s.input for s in samples], [s.image for s in samples]).trim()
    return batch, PretrainTargets.from_samples(samples).trim(batch.token_ids.shape[1])


def _check_finite(step: int, loss: PretrainLoss) -> None:
    for name in ("mvlm", "tia", "tim"):
        value = getattr(loss, name)
        if not math.isfinite(value):
            raise DivergenceError(step, name, value)
    if not np.isfinite(loss.total.data).all():
        raise DivergenceError(step, "total", float(loss.total.data))


def pretrain_loop(corpus: Sequence[Document], config: TrainConfig, model_config: ModelConfig | None = None,
                  vocab: Vocab | None = None, curves_path: str | os.PathLike | None = None,
                  on_step: Callable[[dict], None] | None = None) -> PretrainResult:
    """Joint MVLM/TIA/TIM pre-training with AdamW and warmup/linear decay."""
    if len(corpus) < 2:
        raise ContractError("pre-training needs at least 2 documents")
    tasks = PretrainTasks.parse(config.tasks)
    vocab = vocab or build_vocab(corpus)
    mcfg = (model_config or ModelConfig.preset(config.preset)).with_(spatial_bias=config.spatial_bias)
    model = new_pretrain_model(mcfg, vocab, config.seed, tasks)
    total = config.total_steps(len(corpus))
    state = nx.AdamState(lr=config.lr, weight_decay=config.weight_decay)
    sched = _Schedule(len(corpus), config.batch_size, config.seed)
    pieces = [tokenize_document(d, vocab) for d in corpus]
    dropout_rng = _step_rng(config.seed, 0xD0)
    curves = []
    for step in range(total):
        lr = nx.lr_schedule(step, total, config.lr, config.warmup)
        row = {"step": step, "total": 0.0, "mvlm": 0.0, "tia": 0.0, "tim": 0.0}
        for micro in range(config.grad_accum):
            idx = sched.next()
            samples = pretrain_samples(corpus, idx, vocab, mcfg.max_len, config.seed, step * config.grad_accum + micro,
                                       tasks, pieces)
            batch, targets = _batch(samples)
            loss = pretrain_loss(model.store, model.forward(batch, dropout_rng), targets)
            _check_finite(step, loss)
            scaled = nx.scale(loss.total, 1.0 / config.grad_accum)
            nx.backward(scaled, model.store, accumulate=micro > 0)
            for k in ("mvlm", "tia", "tim"):
                row[k] += getattr(loss, k) / config.grad_accum
            row["total"] += loss.total.item() / config.grad_accum
        nx.adam_step(model.store, state, lr)
        curves.append(row)
        if on_step:
            on_step(row)
    if curves_path is not None:
        write_curves(curves_path, curves)
    ckpt = Checkpoint.from_model(model, vocab, total, extra={"tasks": tasks.names()})
    return PretrainResult(model, vocab, ckpt, curves)


def write_curves(path: str | os.PathLike, curves: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total", "mvlm", "tia", "tim"])
        for r in curves:
            w.writerow([r["step"]] + [f"{r[k]:.6f}" for k in ("total", "mvlm", "tia", "tim")])


def evaluate_pretrain(model: LayoutLMv2, vocab: Vocab, corpus: Sequence[Document], seed: int = 12345,
                      rounds: int = 4, tasks: PretrainTasks = PretrainTasks(), batch_size: int = 16) -> dict:
    """Fresh seeded pre-training samples over ``corpus``: mean MVLM loss and the
    TIA / TIM / MVLM accuracies."""
    mcfg = model.config
    pieces = [tokenize_document(d, vocab) for d in corpus]
    mvlm_sum = mvlm_n = mvlm_hit = 0.0
    tia_hit = tia_n = tim_hit = tim_n = 0
    idx_all = list(range(len(corpus)))
    for r in range(rounds):
        for b in range(0, len(idx_all), batch_size):
            idx = idx_all[b:b + batch_size]
            samples = pretrain_samples(corpus, idx, vocab, mcfg.max_len, seed, r * 1000 + b, tasks, pieces)
            batch, targets = _batch(samples)
            loss = pretrain_loss(model.store, model.forward(batch), targets)
            k = loss.counts["mvlm"]
            if k:
                mvlm_sum += loss.mvlm * k
                mvlm_n += k
                gold = targets.mvlm.reshape(-1)
                gold = gold[gold != IGNORE]
                mvlm_hit += int((loss.mvlm_logits.argmax(-1) == gold).sum())
            m = targets.tia != IGNORE
            tia_hit += int(((loss.tia_logits > 0) == (targets.tia == 1))[m].sum())
            tia_n += int(m.sum())
            m = targets.tim != IGNORE
            tim_hit += int(((loss.tim_logits > 0) == (targets.tim == 1))[m].sum())
            tim_n += int(m.sum())
    return {
        "mvlm_loss": mvlm_sum / mvlm_n if mvlm_n else float("nan"),
        "mvlm_accuracy": mvlm_hit / mvlm_n if mvlm_n else float("nan"),
        "tia_accuracy": tia_hit / tia_n if tia_n else float("nan"),
        "tim_accuracy": tim_hit / tim_n if tim_n else float("nan"),
        "uniform_mvlm_loss": math.log(len(vocab)),
    }


# ---------------------------------------------------------------------------
# fine-tuning examples


@dataclass
class Example:
    seq: InputSequence
    raster: np.ndarray
    doc_index: int
    labels: np.ndarray | None = None  # labeling: (L,) tag ids
    target: int | tuple[int, int] | None = None  # classification index / QA (start, end)
    qa_index: int = -1


def labeling_examples(docs: Sequence[Document], vocab: Vocab, L: int, tags: Sequence[str]) -> list[Example]:
    out = []
    for i, d in enumerate(docs):
        if not d.labels.entities and d.tokens:
            raise ValidationError(f"document {d.id} has no entity labels for the labeling task")
        seq = assemble([(tokenize_document(d, vocab), SEG_A)], L)
        out.append(Example(seq, d.page.image, i, subtoken_labels(seq, d.labels.entities, tags)))
    return out


def classification_examples(docs: Sequence[Document], vocab: Vocab, L: int, classes: Sequence[str]) -> list[Example]:
    out = []
    for i, d in enumerate(docs):
        if d.labels.doc_class is None:
            raise ValidationError(f"document {d.id} has no class label")
        if d.labels.doc_class not in classes:
            raise ValidationError(f"document {d.id} class {d.labels.doc_class!r} not in {list(classes)}")
        seq = assemble([(tokenize_document(d, vocab), SEG_A)], L)
        out.append(Example(seq, d.page.image, i, target=list(classes).index(d.labels.doc_class)))
    return out


def question_pieces(question: str, vocab: Vocab) -> list[SubToken]:
    empty = special_token_box()
    pieces = tokenize_words([(w, empty, 0) for w in question.split()], vocab)
    # question words are not page tokens; negative word indices keep them apart
    return [SubToken(p.id, p.box, -1 - p.word_index, -1, p.first) for p in pieces]


def qa_examples(docs: Sequence[Document], vocab: Vocab, L: int) -> list[Example]:
    out = []
    for i, d in enumerate(docs):
        for q, qa in enumerate(d.labels.qa):
            seq = assemble([(question_pieces(qa.question, vocab), SEG_A),
                            (tokenize_document(d, vocab), SEG_B)], L)
            out.append(Example(seq, d.page.image, i, target=qa_targets(seq, qa.answer_start, qa.answer_end),
                               qa_index=q))
    if not out:
        raise ValidationError("no QA pairs in the corpus")
    return out


def task_examples(task: str, docs: Sequence[Document], vocab: Vocab, L: int, meta: dict) -> list[Example]:
    if task == "labeling":
        return labeling_examples(docs, vocab, L, meta["tags"])
    if task == "qa":
        return qa_examples(docs, vocab, L)
    if task == "classification":
        return classification_examples(docs, vocab, L, meta["classes"])
    raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")


def default_meta(task: str, docs: Sequence[Document]) -> dict:
    if task == "labeling":
        return {"tags": bio_tags(FUNSD_LABELS)}
    if task == "classification":
        seen = {d.labels.doc_class for d in docs if d.labels.doc_class is not None}
        classes = list(FAMILIES) if seen <= set(FAMILIES) else sorted(seen)
        return {"classes": classes}
    if task == "qa":
        return {"max_answer_len": MAX_ANSWER_LEN}
    raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")


def init_task_head(model: LayoutLMv2, task: str, meta: dict, rng: np.random.Generator) -> None:
    name = f"heads.{task}"
    for suffix in ("weight", "bias"):
        if f"{name}.{suffix}" in model.store:
            model.store.remove(f"{name}.{suffix}")
    d = model.config.hidden
    if task == "labeling":
        init_linear(model.store, name, d, len(meta["tags"]), rng, model.config.init_std)
    elif task == "qa":
        init_linear(model.store, name, d, 2, rng, model.config.init_std)
    elif task == "classification":
        init_linear(model.store, name, 3 * d, len(meta["classes"]), rng, model.config.init_std)
    else:
        raise ValidationError(f"unknown task {task!r}")


def task_loss(model: LayoutLMv2, task: str, examples: Sequence[Example], rng=None) -> tuple[nx.Tensor, object]:
    batch = collate([e.seq for e in examples], [e.raster for e in examples]).trim()
    out = model.forward(batch, rng)
    p = model.store
    if task == "labeling":
        logits = seq_label_head(p, out)
        w = batch.token_ids.shape[1]
        loss, _ = nx.cross_entropy(logits, np.stack([e.labels[:w] for e in examples]))
        return loss, logits
    if task == "qa":
        start, end = qa_head(p, out)
        tgt = np.array([e.target for e in examples])
        ls, _ = nx.cross_entropy(start, tgt[:, 0])
        le, _ = nx.cross_entropy(end, tgt[:, 1])
        return ls + le, (start, end)
    logits = doc_cls_head(p, out.pre_visual, out)
    loss, _ = nx.cross_entropy(logits, np.array([e.target for e in examples]))
    return loss, logits


# ---------------------------------------------------------------------------
# prediction and evaluation


def predict(model: LayoutLMv2, vocab: Vocab, task: str, docs: Sequence[Document], meta: dict,
            batch_size: int = 16) -> list[dict]:
    """Per-example predictions: word tags + spans, QA answers, or class probabilities."""
    L = model.config.max_len
    examples = task_examples(task, docs, vocab, L, meta) if task != "labeling" else \
        [Example(assemble([(tokenize_document(d, vocab), SEG_A)], L), d.page.image, i) for i, d in enumerate(docs)]
    preds = []
    for b in range(0, len(examples), batch_size):
        chunk = examples[b:b + batch_size]
        batch = collate([e.seq for e in chunk], [e.raster for e in chunk]).trim()
        out = model.forward(batch)
        if task == "labeling":
            logits = seq_label_head(model.store, out).data
            for e, lg in zip(chunk, logits):
                tags = [meta["tags"][k] for k in lg.argmax(-1)]
                words = word_predictions(e.seq, tags)
                doc = docs[e.doc_index]
                wt = [words.get(k, "O") for k in range(len(doc.tokens))]
                preds.append({"id": doc.id, "tags": wt, "spans": decode_bio(wt)})
        elif task == "qa":
            start, end = qa_head(model.store, out)
            for e, s, t in zip(chunk, start.data, end.data):
                doc = docs[e.doc_index]
                span = best_span(s, t, context_positions(e.seq), meta.get("max_answer_len", MAX_ANSWER_LEN))
                qa = doc.labels.qa[e.qa_index]
                preds.append({"id": f"{doc.id}/q{e.qa_index}", "question": qa.question,
                              "answer": span_text(e.seq, span, [t.text for t in doc.tokens]),
                              "gold": doc.answer_text(qa)})
        else:
            logits = doc_cls_head(model.store, out.pre_visual, out).data
            z = logits - logits.max(-1, keepdims=True)
            probs = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
            for e, pr in zip(chunk, probs):
                doc = docs[e.doc_index]
                preds.append({"id": doc.id, "probs": {c: float(v) for c, v in zip(meta["classes"], pr)},
                              "pred": meta["classes"][int(pr.argmax())], "gold": doc.labels.doc_class})
    return preds


def evaluate(model: LayoutLMv2, vocab: Vocab, task: str, docs: Sequence[Document], meta: dict) -> dict:
    preds = predict(model, vocab, task, docs, meta)
    if task == "labeling":
        p, r, f1 = corpus_prf((d.labels.entities, pr["spans"]) for d, pr in zip(docs, preds))
        return {"precision": p, "recall": r, "f1": f1}
    if task == "qa":
        return {"anls": mean_anls([pr["answer"] for pr in preds], [[pr["gold"]] for pr in preds])}
    return {"accuracy": accuracy([pr["gold"] for pr in preds], [pr["pred"] for pr in preds])}


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneResult:
    model: LayoutLMv2
    vocab: Vocab
    checkpoint: Checkpoint
    meta: dict
    history: list[dict] = field(default_factory=list)
    train_metrics: dict = field(default_factory=dict)
    eval_metrics: dict = field(default_factory=dict)


def finetune_loop(task: str, train_docs: Sequence[Document], config: TrainConfig,
                  init: Checkpoint | None = None, eval_docs: Sequence[Document] = (),
                  model_config: ModelConfig | None = None, vocab: Vocab | None = None) -> FinetuneResult:
    """Fresh task head on top of ``init`` (or a random model); all parameters are trained."""
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")
    if init is not None:
        model, vocab = init.restore()
        if model_config is not None and model_config.with_(vocab_size=model.config.vocab_size) != model.config:
            raise ContractError("init checkpoint architecture does not match the requested model config")
    else:
        vocab = vocab or build_vocab(list(train_docs) + list(eval_docs))
        mcfg = (model_config or ModelConfig.preset(config.preset)).with_(vocab_size=len(vocab),
                                                                       spatial_bias=config.spatial_bias)
        model = LayoutLMv2(mcfg, seed=config.seed)
    meta = default_meta(task, list(train_docs) + list(eval_docs))
    init_task_head(model, task, meta, _step_rng(config.seed, 0x7A5C))
    examples = task_examples(task, train_docs, vocab, model.config.max_len, meta)

    per_epoch = math.ceil(len(examples) / (config.batch_size * config.grad_accum))
    total = config.total_steps(len(examples))
    state = nx.AdamState(lr=config.lr, weight_decay=config.weight_decay)
    sched = _Schedule(len(examples), config.batch_size, config.seed)
    dropout_rng = _step_rng(config.seed, 0xD1)
    history = []
    for step in range(total):
        lr = nx.lr_schedule(step, total, config.lr, config.warmup)
        running = 0.0
        for micro in range(config.grad_accum):
            chunk = [examples[i] for i in sched.next()]
            loss, _ = task_loss(model, task, chunk, dropout_rng)
            if not np.isfinite(loss.data).all():
                raise DivergenceError(step, task, loss.item())
            nx.backward(nx.scale(loss, 1.0 / config.grad_accum), model.store, accumulate=micro > 0)
            running += loss.item() / config.grad_accum
        nx.adam_step(model.store, state, lr)
        row = {"step": step, "loss": running}
        if config.eval_every_epoch and eval_docs and (step + 1) % per_epoch == 0:
            row["eval"] = evaluate(model, vocab, task, eval_docs, meta)
        history.append(row)
    ckpt = Checkpoint.from_model(model, vocab, total, heads={task: meta}, extra={"task": task})
    result = FinetuneResult(model, vocab, ckpt, meta, history)
    result.train_metrics = evaluate(model, vocab, task, train_docs, meta)
    if eval_docs:
        result.eval_metrics = evaluate(model, vocab, task, eval_docs, meta)
    return result


# ---------------------------------------------------------------------------
# gradient check


PARAM_GROUPS = (
    ("backbone", "backbone."),
    ("visual_proj", "embeddings.visual_proj."),
    ("embeddings", "embeddings."),
    ("bias_tables", "encoder.rel_bias."),
    ("attention", ".attn."),
    ("ffn", ".ffn."),
    ("encoder_norm", "encoder.layer"),
    ("head_mvlm", "heads.mvlm."),
    ("head_tia", "heads.tia."),
    ("head_tim", "heads.tim."),
    ("head_labeling", "heads.labeling."),
    ("head_qa", "heads.qa."),
    ("head_classification", "heads.classification."),
)


def param_group(name: str) -> str:
    for group, key in PARAM_GROUPS:
        if (name.startswith(key) if not key.startswith(".") else key in name):
            return group
    return "other"


@dataclass
class GradCheckReport:
    tolerance: float
    groups: dict  # group -> max relative error
    params: dict  # param name -> relative error
    checked_entries: int

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.groups.values())

    def failures(self) -> list[str]:
        return sorted(n for n, v in self.params.items() if v >= self.tolerance)

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "passed": self.passed, "groups": self.groups,
                "params": self.params, "checked_entries": self.checked_entries, "failures": self.failures()}


def grad_check(config: ModelConfig | None = None, seed: int = 0, tolerance: float = 1e-3,
               coords_per_param: int = 10, eps: float = 1e-5) -> GradCheckReport:
    """Analytic vs central-difference gradients of the full pre-training loss plus
    every fine-tuning head loss, in double precision, on a micro model."""
    from .synth_corpus import GenConfig, generate

    config = config or ModelConfig.micro()
    with nx.precision("double"):
        docs = generate(GenConfig(seed=seed, min_tokens=6, max_tokens=10), 3)
        vocab = build_vocab(docs)
        model = new_pretrain_model(config, vocab, seed)
        meta = {t: default_meta(t, docs) for t in TASKS}
        for t in TASKS:
            init_task_head(model, t, meta[t], _step_rng(seed, 0x7A5C, TASKS.index(t)))
        model.store.cast(np.float64)
        # a batch with both a positive and a negative TIM sample
        samples = []
        for k in range(64):
            s = make_sample(docs, k % len(docs), vocab, config.max_len, _step_rng(seed, 0x6C, k))
            if len(samples) == 0 and s.tim_label == 1 or len(samples) == 1 and s.tim_label == 0:
                samples.append(s)
            if len(samples) == 2:
                break
        batch, targets = _batch(samples)
        task_ex = {t: task_examples(t, docs[:2], vocab, config.max_len, meta[t])[:2] for t in TASKS}

        def loss_fn() -> nx.Tensor:
            total = pretrain_loss(model.store, model.forward(batch), targets).total
            for t in TASKS:
                total = total + task_loss(model, t, task_ex[t])[0]
            return total

        nx.backward(loss_fn(), model.store)
        analytic = {n: p.grad.copy() for n, p in model.store.items()}
        rng = _step_rng(seed, 0x6C4)
        groups: dict[str, float] = {}
        per_param: dict[str, float] = {}
        checked = 0
        for name, p in model.store.items():
            coords = nx.pick_coords(analytic[name], coords_per_param, rng)
            num = nx.numeric_grad(lambda: loss_fn().item(), p, coords, eps)
            err = nx.relative_error(analytic[name].reshape(-1)[coords], num)
            per_param[name] = err
            g = param_group(name)
            groups[g] = max(groups.get(g, 0.0), err)
            checked += len(coords)
    return GradCheckReport(tolerance, groups, per_param, checked)
