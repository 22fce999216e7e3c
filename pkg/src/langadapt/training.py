"""AdamW, learning-rate schedules, language sampling, multilingual
pretraining and the three language-adaptation strategies."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .adapters import AdapterBank, StrategySpec, new_bank, trainable_set
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigurationError, ContractError, DataError, NumericError
from .model import ModelConfig, ModelParams, build_model, derive_seed, lm_loss, with_vocab
from .numcore import Tensor, backward, no_grad
from .tokenizer import BpeVocab

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def lr_schedule(kind: str, step: int, total_steps: int, warmup_steps: int = 0, lr_peak: float = 1e-3) -> float:
    if total_steps <= 0:
        raise ContractError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if kind == "linear_decay":
        return lr_peak * (1.0 - step / total_steps)
    if kind == "cosine_with_warmup":
        if not 0 <= warmup_steps < total_steps:
            raise ContractError(f"warmup_steps {warmup_steps} must be < total_steps {total_steps}")
        if step < warmup_steps:
            return lr_peak * step / warmup_steps
        progress = (step - warmup_steps) / (total_steps - warmup_steps)
        return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))
    if kind == "constant":
        return lr_peak
    raise ConfigurationError(f"unknown schedule {kind!r}")


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def adamw_step(state: OptimState, tensors: Mapping[str, Tensor], lr: float) -> float:
    """One AdamW update of ``tensors`` (the trainable set) from their ``.grad``.

    Gradients are clipped to ``clip_norm`` by global norm first. Returns the
    pre-clip global norm. Parameters get fresh arrays, never in-place writes.
    """
    grads = {}
    for name, t in tensors.items():
        if t.grad is None:
            raise ContractError(f"tensor {name!r} has no gradient")
        if not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")
        grads[name] = t.grad.astype(np.float64)
    norm = global_norm(grads)
    if state.clip_norm is not None and norm > state.clip_norm:
        scale = state.clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in tensors.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        theta = t.data.astype(np.float64)
        theta = theta - lr * state.weight_decay * theta - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.data = theta.astype(t.data.dtype)
    return norm


# ---------------------------------------------------------------------------
# Language sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingTable:
    probs: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if isinstance(self.probs, Mapping):
            object.__setattr__(self, "probs", tuple(self.probs.items()))
        if not self.probs:
            raise ConfigurationError("empty sampling table")
        ps = np.array([p for _, p in self.probs], dtype=np.float64)
        if np.any(ps < 0) or not np.all(np.isfinite(ps)):
            raise ConfigurationError("sampling probabilities must be finite and >= 0")
        if abs(ps.sum() - 1.0) > 1e-6:
            raise ConfigurationError(f"sampling probabilities sum to {ps.sum():.8f}, not 1")

    @property
    def languages(self) -> list[str]:
        return [k for k, _ in self.probs]

    def as_dict(self) -> dict[str, float]:
        return dict(self.probs)

    @property
    def cdf(self) -> np.ndarray:
        c = np.cumsum([p for _, p in self.probs])
        c[-1] = 1.0
        return c


# Pretraining sampling probabilities of the 13 languages.
PRETRAIN_MIX = SamplingTable(
    (
        ("Indonesian", 0.0554),
        ("Basque", 0.0184),
        ("Vietnamese", 0.0684),
        ("Chinese", 0.1339),
        ("Urdu", 0.0267),
        ("Spanish", 0.1118),
        ("Catalan", 0.0395),
        ("Portuguese", 0.0867),
        ("French", 0.1110),
        ("English", 0.2107),
        ("Hindi", 0.0398),
        ("Arabic", 0.0638),
        ("Bengali", 0.0339),
    )
)


def sample_language(table: SamplingTable, rng: np.random.Generator) -> str:
    i = int(np.searchsorted(table.cdf, rng.random(), side="right"))
    return table.probs[min(i, len(table.probs) - 1)][0]


def sample_languages(table: SamplingTable, rng: np.random.Generator, n: int) -> list[str]:
    """Vectorised equivalent of ``n`` successive :func:`sample_language` calls."""
    idx = np.minimum(np.searchsorted(table.cdf, rng.random(n), side="right"), len(table.probs) - 1)
    langs = table.languages
    return [langs[i] for i in idx]


# ---------------------------------------------------------------------------
# Plans and presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainPlan:
    steps: int = 500
    batch_size: int = 8
    seq_len: int = 64
    lr_peak: float = 1e-3
    schedule: str = "linear_decay"
    warmup_steps: int = 0
    checkpoint_every: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.seq_len < 2:
            raise ConfigurationError("plan needs steps >= 0, batch_size >= 1, seq_len >= 2")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 1")

    def optim_state(self) -> OptimState:
        return OptimState(self.beta1, self.beta2, self.eps, self.weight_decay, self.clip_norm)

    def checkpoint_steps(self) -> list[int]:
        every = self.checkpoint_every or self.steps
        if self.steps == 0:
            return []
        steps = list(range(every, self.steps + 1, every))
        if not steps or steps[-1] != self.steps:
            steps.append(self.steps)
        return steps


# Pretraining: batch 512, peak 2e-4, cosine decay over 16,927,083 samples with
# 216,320 warmup samples (converted to steps at 512 samples/step), wd 0.1, clip 1.0.
PAPER_PRETRAIN = TrainPlan(
    steps=round(16_927_083 / 512),
    batch_size=512,
    seq_len=1024,
    lr_peak=2e-4,
    schedule="cosine_with_warmup",
    warmup_steps=round(216_320 / 512),
    checkpoint_every=500,
    weight_decay=0.1,
    clip_norm=1.0,
)
# Adaptation: AdamW defaults, batch 8, lr 1e-3 linear decay, 1,024 tokens, 50,000 steps.
PAPER_ADAPT = TrainPlan(steps=50_000, batch_size=8, seq_len=1024, lr_peak=1e-3, schedule="linear_decay")
PAPER_CHECKPOINTS = (12_000, 100_500, 118_500)

DESK_PRETRAIN = TrainPlan(
    steps=2000,
    batch_size=8,
    seq_len=64,
    lr_peak=3e-3,
    schedule="cosine_with_warmup",
    warmup_steps=100,
    checkpoint_every=500,
    weight_decay=0.1,
    clip_norm=1.0,
)
DESK_ADAPT = TrainPlan(steps=500, batch_size=8, seq_len=64, lr_peak=1e-2, schedule="linear_decay")

PRESETS = {
    "paper": {"pretrain": PAPER_PRETRAIN, "adapt": PAPER_ADAPT},
    "desk": {"pretrain": DESK_PRETRAIN, "adapt": DESK_ADAPT},
}


# ---------------------------------------------------------------------------
# Data pipeline
# ---------------------------------------------------------------------------


def chunk_stream(ids: Sequence[int] | np.ndarray, seq_len: int) -> np.ndarray:
    """Non-overlapping ``seq_len`` windows of a concatenated token stream."""
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids) // seq_len
    return ids[: n * seq_len].reshape(n, seq_len)


@dataclass
class TrainResult:
    params: ModelParams
    adapters: AdapterBank | None
    losses: list[float]
    checkpoints: list[tuple[int, Path]] = field(default_factory=list)
    phase_boundaries: list[int] = field(default_factory=list)


def _set_trainable(tensors: Mapping[str, Tensor], names: set[str]) -> dict[str, Tensor]:
    for name, t in tensors.items():
        t.requires_grad = name in names
        t.grad = None
    return {n: tensors[n] for n in tensors if n in names}


def _train_loop(
    loss_fn: Callable[[np.ndarray], Tensor],
    trainable: dict[str, Tensor],
    batches: Callable[[int], np.ndarray],
    plan: TrainPlan,
    steps: int,
    on_step: Callable[[int, float], None] | None = None,
    step_offset: int = 0,
) -> list[float]:
    state = plan.optim_state()
    losses = []
    for s in range(steps):
        batch = batches(s)
        for t in trainable.values():
            t.grad = None
        try:
            loss = loss_fn(batch)
            backward(loss)
            lr = lr_schedule(plan.schedule, s, steps, min(plan.warmup_steps, max(steps - 1, 0)), plan.lr_peak)
            adamw_step(state, trainable, lr)
        except NumericError as exc:
            raise NumericError(f"training diverged at step {step_offset + s + 1}: {exc}") from exc
        losses.append(float(loss.data))
        if on_step is not None:
            on_step(step_offset + s + 1, losses[-1])
    for t in trainable.values():
        t.grad = None
        t.requires_grad = False
    return losses


def pretrain(
    config: ModelConfig,
    corpora: Mapping[str, Sequence[int] | np.ndarray],
    table: SamplingTable,
    plan: TrainPlan,
    out_dir,
    vocab: BpeVocab | None = None,
) -> TrainResult:
    """Causal-LM training from scratch, drawing each sequence's language from
    ``table`` and saving a checkpoint every ``plan.checkpoint_every`` steps."""
    chunks = {}
    for lang, p in table.probs:
        if p == 0:
            continue
        if lang not in corpora:
            raise DataError(f"no corpus for sampled language {lang!r}")
        c = chunk_stream(corpora[lang], plan.seq_len)
        if len(c) == 0:
            raise DataError(f"corpus for language {lang!r} is shorter than one sequence")
        chunks[lang] = c
    if vocab is not None and vocab.vocab_size != config.vocab_size:
        raise ConfigurationError("vocab size does not match model config")

    out_dir = Path(out_dir)
    params = build_model(config)
    rng = np.random.default_rng(derive_seed(plan.seed, 1))
    trainable = _set_trainable(params.tensors, set(params.tensors))

    def batches(_s):
        langs = sample_languages(table, rng, plan.batch_size)
        rows = [chunks[lang][rng.integers(len(chunks[lang]))] for lang in langs]
        return np.stack(rows)

    saved: list[tuple[int, Path]] = []
    due = set(plan.checkpoint_steps())

    def on_step(step, loss):
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f", step, loss)
        if step in due:
            path = save_checkpoint(params, None, step, out_dir / f"step-{step:07d}", vocab)
            saved.append((step, path))

    losses = _train_loop(lambda b: lm_loss(params, None, b), trainable, batches, plan, plan.steps, on_step)
    return TrainResult(params, None, losses, saved)


def adapt(
    base: Checkpoint | ModelParams,
    new_vocab: BpeVocab,
    corpus: Sequence[int] | np.ndarray,
    spec: StrategySpec,
    plan: TrainPlan,
    out_dir=None,
    language_tag: str = "",
    phase_hook: Callable[[int, str, ModelParams, AdapterBank | None], None] | None = None,
) -> TrainResult:
    """Adapt a pretrained model to a new language.

    ``wte`` is re-drawn for ``new_vocab``; ``wpe`` starts from the pretrained
    values. Each strategy phase trains only its trainable set with a fresh
    optimizer and its own schedule. The two-phase strategy injects adapters
    at the start of its second phase. ``phase_hook(phase, "start"|"end",
    params, adapters)`` observes the phase boundaries.
    """
    base_params = base.params if isinstance(base, Checkpoint) else base
    base_step = base.step if isinstance(base, Checkpoint) else 0
    if new_vocab.vocab_size < 1:
        raise ConfigurationError("empty vocabulary")
    params = with_vocab(base_params, new_vocab.vocab_size, derive_seed(plan.seed, 2))
    if params.wte.shape != (new_vocab.vocab_size, params.config.d_model):
        raise ConfigurationError("embedding size does not match new vocabulary")
    if plan.seq_len > params.config.max_positions:
        raise ConfigurationError(f"seq_len {plan.seq_len} exceeds max_positions {params.config.max_positions}")
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size and corpus.max() >= new_vocab.vocab_size:
        raise ConfigurationError("corpus ids exceed the new vocabulary size")
    chunks = chunk_stream(corpus, plan.seq_len)
    budgets = spec.phase_steps(plan.steps)
    if len(chunks) == 0 and sum(budgets) > 0:
        raise DataError("adaptation corpus is shorter than one sequence")

    rng = np.random.default_rng(derive_seed(plan.seed, 3))
    adapters = None
    losses: list[float] = []
    boundaries = []
    done = 0
    for phase, steps in enumerate(budgets):
        if adapters is None and spec.adapters_present(phase):
            c = params.config
            adapters = new_bank(c.d_model, c.n_layers, spec.adapter_config, derive_seed(plan.seed, 4), language_tag)
            params.adapter_bank = adapters
        names = trainable_set(spec, phase, adapters.tensors if adapters is not None else ())
        everything = dict(params.tensors)
        if adapters is not None:
            everything.update(adapters.tensors)
        trainable = _set_trainable(everything, names)
        if phase_hook is not None:
            phase_hook(phase, "start", params, adapters)

        def batches(_s):
            return chunks[rng.integers(len(chunks), size=plan.batch_size)]

        bank = adapters
        losses += _train_loop(
            lambda b: lm_loss(params, bank, b), trainable, batches, plan, steps, step_offset=done
        )
        if phase_hook is not None:
            phase_hook(phase, "end", params, adapters)
        done += steps
        boundaries.append(done)
        log.info("adapt %s phase %d done after %d steps", spec.strategy.value, phase, done)

    result = TrainResult(params, adapters, losses, phase_boundaries=boundaries)
    if out_dir is not None:
        meta = {
            "strategy": spec.strategy.value,
            "embedding_set": list(spec.embedding_set),
            "adapt_steps": done,
            "language": language_tag,
        }
        path = save_checkpoint(params, adapters, base_step, out_dir, new_vocab, meta)
        result.checkpoints.append((base_step, path))
    return result


# ---------------------------------------------------------------------------
# Held-out evaluation
# ---------------------------------------------------------------------------


@dataclass
class Perplexity:
    nll_sum: float
    n_tokens: int
    n_bytes: int

    @property
    def token_ppl(self) -> float:
        return math.exp(self.nll_sum / self.n_tokens)

    @property
    def byte_ppl(self) -> float:
        """exp(nats per byte): comparable across tokenizers of the same text."""
        return math.exp(self.nll_sum / self.n_bytes)


def heldout_perplexity(
    params: ModelParams,
    adapters: AdapterBank | None,
    ids: Sequence[int] | np.ndarray,
    seq_len: int,
    vocab: BpeVocab | None = None,
    batch_size: int = 16,
) -> Perplexity:
    """Perplexity over non-overlapping windows; the first token of each window
    is context only. ``vocab`` enables the per-byte normalisation."""
    chunks = chunk_stream(ids, seq_len)
    if len(chunks) == 0:
        raise DataError("held-out stream is shorter than one sequence")
    nll = 0.0
    n_tok = 0
    with no_grad():
        for i in range(0, len(chunks), batch_size):
            b = chunks[i : i + batch_size]
            loss = float(lm_loss(params, adapters, b).data)
            k = b.shape[0] * (b.shape[1] - 1)
            nll += loss * k
            n_tok += k
    if vocab is not None:
        lengths = np.array([len(vocab.token_bytes(i)) for i in range(vocab.n_tokens)] + [0] * len(vocab.specials))
        n_bytes = int(lengths[chunks[:, 1:]].sum())
    else:
        n_bytes = n_tok
    return Perplexity(nll, n_tok, n_bytes)
