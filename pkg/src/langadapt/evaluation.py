"""NLI evaluation: prompt-based zero-shot scoring, task adapters with a
classification head (supervised and cross-lingual), accuracy reports."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adapters import AdapterBank, bottleneck_shapes, init_bottleneck, language_adapter_params
from .errors import ConfigurationError, ContractError, DataError
from .model import ModelParams, derive_seed, forward_logits, hidden_states
from .numcore import Tensor, backward, cross_entropy, log_softmax, matmul, no_grad, seeded_init
from .tokenizer import BpeVocab
from .training import OptimState, adamw_step, lr_schedule

LABELS = ("entailment", "contradiction", "neutral")
SLOTS = ("[premise]", "[MASK]", "[hypothesis]")


@dataclass(frozen=True)
class NLIExample:
    premise: str
    hypothesis: str
    label: str

    def __post_init__(self):
        if not self.premise or not self.hypothesis:
            raise DataError("premise and hypothesis must be non-empty")
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")


@dataclass(frozen=True)
class PromptTemplate:
    pattern: str
    verbalizers: dict[str, str]

    def __post_init__(self):
        for slot in SLOTS:
            if self.pattern.count(slot) != 1:
                raise ConfigurationError(f"template must contain {slot} exactly once: {self.pattern!r}")
        if set(self.verbalizers) != set(LABELS) or not all(self.verbalizers.values()):
            raise ConfigurationError("template needs non-empty verbalizers for all three labels")
        object.__setattr__(self, "verbalizers", {k: self.verbalizers[k] for k in LABELS})

    def to_text(self) -> str:
        return self.pattern + "\n" + "".join(f"{k}\t{v}\n" for k, v in self.verbalizers.items())

    @classmethod
    def from_text(cls, text: str) -> "PromptTemplate":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) != 4:
            raise ConfigurationError(f"template file needs 4 lines, got {len(lines)}")
        verb = {}
        for ln in lines[1:]:
            label, _, word = ln.partition("\t")
            verb[label.strip()] = word.strip()
        return cls(lines[0], verb)

    @classmethod
    def load(cls, path) -> "PromptTemplate":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def builtin_template(lang: str) -> PromptTemplate:
    """The shipped en/de/ko NLI prompts."""
    text = resources.files("langadapt").joinpath("templates", f"{lang}.txt").read_text(encoding="utf-8")
    return PromptTemplate.from_text(text)


_SLOT_RE = re.compile("|".join(re.escape(slot) for slot in SLOTS))


def _pieces(template: PromptTemplate, ex: NLIExample, label: str) -> list[str]:
    # single pass, so slot markers inside the example text are left alone
    fill = {"[premise]": ex.premise, "[hypothesis]": ex.hypothesis, "[MASK]": template.verbalizers[label]}
    out, pos = [], 0
    for m in _SLOT_RE.finditer(template.pattern):
        out += [template.pattern[pos : m.start()], fill[m.group()]]
        pos = m.end()
    out.append(template.pattern[pos:])
    return out


def render_prompt(template: PromptTemplate, ex: NLIExample, label: str) -> str:
    return "".join(_pieces(template, ex, label))


def _verbalizer_span(template: PromptTemplate, ex: NLIExample, label: str) -> tuple[int, int]:
    """Byte span of the verbalizer inside the rendered prompt."""
    pieces = _pieces(template, ex, label)
    slot_order = _SLOT_RE.findall(template.pattern)
    k = 2 * slot_order.index("[MASK]") + 1
    start = len("".join(pieces[:k]).encode("utf-8"))
    return start, start + len(pieces[k].encode("utf-8"))


# ---------------------------------------------------------------------------
# Zero-shot prompting
# ---------------------------------------------------------------------------


def token_logprobs(params: ModelParams, adapters: AdapterBank | None, seqs: Sequence[Sequence[int]]) -> list[np.ndarray]:
    """log p(x_t | x_<t) for t >= 1 of every sequence, batched with right padding."""
    T = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), T), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    with no_grad():
        lp = log_softmax(forward_logits(params, adapters, ids[:, :-1])).data.astype(np.float64)
    out = []
    for i, s in enumerate(seqs):
        n = len(s)
        out.append(lp[i, np.arange(n - 1), ids[i, 1:n]])
    return out


def zero_shot_predict(
    params: ModelParams,
    adapters: AdapterBank | None,
    vocab: BpeVocab,
    template: PromptTemplate,
    ex: NLIExample,
    scoring: str = "prompt",
) -> tuple[str, dict[str, float]]:
    """Pick the verbalizer whose filled-in prompt the LM finds most likely.

    ``scoring="prompt"`` averages log-probs over every predicted token of the
    prompt; ``"verbalizer"`` averages only over tokens overlapping the
    verbalizer's bytes. Ties go to the earlier label in LABELS order.
    """
    if vocab.vocab_size > params.config.vocab_size:
        raise ConfigurationError("tokenizer vocabulary larger than the model's")
    seqs = [vocab.encode(render_prompt(template, ex, lab)) for lab in LABELS]
    if any(len(s) < 2 for s in seqs):
        raise DataError("prompt tokenizes to fewer than two tokens")
    lps = token_logprobs(params, adapters, seqs)
    scores = {}
    for lab, s, lp in zip(LABELS, seqs, lps):
        if scoring == "prompt":
            scores[lab] = float(lp.mean())
        elif scoring == "verbalizer":
            lo, hi = _verbalizer_span(template, ex, lab)
            ends = np.cumsum([len(vocab.token_bytes(t)) for t in s])
            starts = ends - [len(vocab.token_bytes(t)) for t in s]
            hit = [t for t in range(1, len(s)) if starts[t] < hi and ends[t] > lo]
            if not hit:
                raise DataError("verbalizer falls entirely inside the first token")
            scores[lab] = float(lp[[t - 1 for t in hit]].mean())
        else:
            raise ConfigurationError(f"unknown scoring {scoring!r}")
    return predict_from_scores(scores), scores


def predict_from_scores(scores: dict[str, float]) -> str:
    best = LABELS[0]
    for lab in LABELS[1:]:
        if scores[lab] > scores[best]:
            best = lab
    return best


def zero_shot_eval(params, adapters, vocab, template, examples, scoring="prompt") -> list[str]:
    return [zero_shot_predict(params, adapters, vocab, template, ex, scoring)[0] for ex in examples]


# ---------------------------------------------------------------------------
# Task head
# ---------------------------------------------------------------------------


@dataclass
class TaskHead:
    tensors: dict[str, Tensor]
    d_model: int
    n_layers: int
    reduction: int = 16


def new_task_head(d_model: int, n_layers: int, reduction: int = 16, seed: int = 0) -> TaskHead:
    b = d_model // reduction
    if b < 1:
        raise ConfigurationError(f"task reduction {reduction} leaves no bottleneck at d={d_model}")
    tensors = {}
    for i in range(n_layers):
        tensors.update(init_bottleneck(bottleneck_shapes(f"layer{i}.task.", d_model, b), derive_seed(seed, 10 + i)))
    tensors["cls.w"] = seeded_init((d_model, 3), ("normal", 0.0, 0.02), derive_seed(seed, 1))
    tensors["cls.b"] = seeded_init((3,), "zeros")
    return TaskHead(tensors, d_model, n_layers, reduction)


SEPARATOR = "\n"


def pair_ids(vocab: BpeVocab, ex: NLIExample, seq_len: int) -> list[int]:
    """premise ++ separator ++ hypothesis, truncated longest-first (premise on ties)."""
    p = vocab.encode(ex.premise)
    s = vocab.encode(SEPARATOR)
    h = vocab.encode(ex.hypothesis)
    budget = seq_len - len(s)
    if budget < 2:
        raise ConfigurationError(f"seq_len {seq_len} too small for a pair")
    while len(p) + len(h) > budget:
        if len(p) >= len(h):
            p.pop()
        else:
            h.pop()
    return p + s + h


def _batch(seqs: Sequence[list[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, np.array([len(s) - 1 for s in seqs])


def classify_logits(params: ModelParams, adapters, head: TaskHead, ids: np.ndarray, last: np.ndarray) -> Tensor:
    if head.d_model != params.config.d_model or head.n_layers != params.config.n_layers:
        raise ConfigurationError(
            f"task head built for d={head.d_model}, L={head.n_layers}; model has "
            f"d={params.config.d_model}, L={params.config.n_layers}"
        )
    h = hidden_states(params, adapters, ids, task=head.tensors)
    pooled = h[np.arange(ids.shape[0]), last]
    return matmul(pooled, head.tensors["cls.w"]) + head.tensors["cls.b"]


@dataclass(frozen=True)
class TaskHyper:
    epochs: int = 2
    batch_size: int = 32
    lr: float = 5e-5
    seq_len: int = 128
    reduction: int = 16
    seed: int = 0
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0


PAPER_TASK = TaskHyper()
DESK_TASK = TaskHyper(epochs=6, batch_size=32, lr=3e-3, seq_len=64)


def _pad_id(vocab: BpeVocab) -> int:
    return vocab.pad_id if "<pad>" in vocab.specials else 0


def train_task_head(
    params: ModelParams,
    adapters: AdapterBank | None,
    head: TaskHead,
    vocab: BpeVocab,
    dataset: Sequence[NLIExample],
    hyper: TaskHyper = PAPER_TASK,
) -> list[float]:
    """Train task adapters + classifier in place; everything else stays frozen."""
    if not dataset:
        raise DataError("empty task dataset")
    frozen = list(params.tensors.values()) + (list(adapters.tensors.values()) if adapters else [])
    for t in frozen:
        t.requires_grad = False
        t.grad = None
    for t in head.tensors.values():
        t.requires_grad = True
    encoded = [pair_ids(vocab, ex, hyper.seq_len) for ex in dataset]
    targets = np.array([LABELS.index(ex.label) for ex in dataset])
    pad = _pad_id(vocab)
    rng = np.random.default_rng(derive_seed(hyper.seed, 5))
    n_batches = math.ceil(len(dataset) / hyper.batch_size)
    total = hyper.epochs * n_batches
    state = OptimState(weight_decay=hyper.weight_decay, clip_norm=hyper.clip_norm)
    losses = []
    step = 0
    for _ in range(hyper.epochs):
        order = rng.permutation(len(dataset))
        for b in range(n_batches):
            idx = order[b * hyper.batch_size : (b + 1) * hyper.batch_size]
            ids, last = _batch([encoded[i] for i in idx], pad)
            for t in head.tensors.values():
                t.grad = None
            loss = cross_entropy(classify_logits(params, adapters, head, ids, last), targets[idx])
            backward(loss)
            adamw_step(state, head.tensors, lr_schedule("linear_decay", step, total, 0, hyper.lr))
            losses.append(float(loss.data))
            step += 1
    for t in head.tensors.values():
        t.requires_grad = False
        t.grad = None
    return losses


def predict_classes(
    params: ModelParams,
    adapters: AdapterBank | None,
    head: TaskHead,
    vocab: BpeVocab,
    examples: Sequence[NLIExample],
    seq_len: int = 128,
    batch_size: int = 64,
) -> list[str]:
    pad = _pad_id(vocab)
    out = []
    with no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i : i + batch_size]
            ids, last = _batch([pair_ids(vocab, ex, seq_len) for ex in chunk], pad)
            logits = classify_logits(params, adapters, head, ids, last).data
            out += [LABELS[j] for j in logits.argmax(axis=1)]
    return out


# ---------------------------------------------------------------------------
# Cross-lingual transfer
# ---------------------------------------------------------------------------


@dataclass
class TargetArtifacts:
    vocab: BpeVocab
    wte: Tensor
    wpe: Tensor | None
    adapters: AdapterBank | None

    @classmethod
    def from_model(cls, params: ModelParams, vocab: BpeVocab, adapters: AdapterBank | None) -> "TargetArtifacts":
        return cls(vocab, params.wte, params.wpe, adapters)


def swap_language(base: ModelParams, target: TargetArtifacts) -> ModelParams:
    """Base backbone with the target language's embeddings swapped in."""
    d = base.config.d_model
    if target.wte.shape[1] != d or (target.wpe is not None and target.wpe.shape != base.wpe.shape):
        raise ConfigurationError("target embeddings do not match the base model's dimensions")
    tensors = dict(base.tensors)
    tensors["wte"] = target.wte
    if target.wpe is not None:
        tensors["wpe"] = target.wpe
    return ModelParams(replace(base.config, vocab_size=target.wte.shape[0]), tensors)


def cross_lingual_eval(
    base: ModelParams,
    source_head: TaskHead,
    target: TargetArtifacts,
    eval_set: Sequence[NLIExample],
    seq_len: int = 128,
) -> "AccuracyReport":
    """Evaluate a source-trained head on the target language by swapping in
    the target tokenizer, embeddings and language adapters."""
    model = swap_language(base, target)
    preds = predict_classes(model, target.adapters, source_head, target.vocab, eval_set, seq_len)
    return evaluate_accuracy(preds, [ex.label for ex in eval_set])


# ---------------------------------------------------------------------------
# Metrics and files
# ---------------------------------------------------------------------------


@dataclass
class AccuracyReport:
    accuracy: float
    confusion: dict[str, dict[str, int]] = field(default_factory=dict)
    total: int = 0


def evaluate_accuracy(predictions: Sequence[str], gold: Sequence[str]) -> AccuracyReport:
    if len(predictions) != len(gold):
        raise ContractError(f"{len(predictions)} predictions for {len(gold)} gold labels")
    if not gold:
        raise ContractError("no examples to score")
    confusion = {g: {p: 0 for p in LABELS} for g in LABELS}
    hits = 0
    for p, g in zip(predictions, gold):
        confusion[g][p] += 1
        hits += p == g
    return AccuracyReport(hits / len(gold), confusion, len(gold))


def read_nli_tsv(path) -> list[NLIExample]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE), 1):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            out.append(NLIExample(*row))
    return out


def write_nli_tsv(path, examples: Iterable[NLIExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for ex in examples:
            fh.write(f"{ex.premise}\t{ex.hypothesis}\t{ex.label}\n")


RESULT_COLUMNS = ("setting", "model", "dataset", "accuracy")


def format_results(rows: Iterable[tuple[str, str, str, float]]) -> str:
    lines = ["\t".join(RESULT_COLUMNS)]
    lines += [f"{s}\t{m}\t{d}\t{acc:.4f}" for s, m, d, acc in rows]
    return "\n".join(lines) + "\n"


def capacity_report(d_model: int, n_layers: int, reductions: Sequence[int], accuracies: dict | None = None) -> str:
    """Total language-adapter capacity per reduction factor as TSV, with any
    measured accuracies alongside (the capacity-vs-accuracy plot's data)."""
    metrics = sorted({k for v in (accuracies or {}).values() for k in v})
    lines = ["\t".join(["reduction", "bottleneck", "capacity", *metrics])]
    for r in reductions:
        cap = n_layers * language_adapter_params(d_model, r)
        accs = (accuracies or {}).get(r, {})
        cells = [f"{accs[m]:.4f}" if m in accs else "" for m in metrics]
        lines.append("\t".join([str(r), str(d_model // r), str(cap), *cells]))
    return "\n".join(lines) + "\n"
