"""Config-driven runs: one adaptation + evaluation per ExperimentConfig, and
the grid runner that turns a list of configs into a results table."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, Strategy, StrategySpec
from .checkpoint import load_checkpoint
from .config import BUILTIN_TEMPLATES, ExperimentConfig
from .errors import ConfigurationError, DataError, LangAdaptError
from .evaluation import (
    DESK_TASK,
    PAPER_TASK,
    PromptTemplate,
    TargetArtifacts,
    TaskHyper,
    builtin_template,
    cross_lingual_eval,
    evaluate_accuracy,
    new_task_head,
    predict_classes,
    read_nli_tsv,
    train_task_head,
    zero_shot_eval,
)
from .tokenizer import BpeVocab, encode_corpus, train_bpe
from .training import PRESETS, TrainPlan, adapt

log = logging.getLogger(__name__)

GRID_COLUMNS = (
    "run_id",
    "strategy",
    "ckpt_step",
    "emb_set",
    "reduction",
    "zeroshot_acc",
    "crosslingual_acc",
    "supervised_acc",
)


def read_lines(path) -> list[bytes]:
    with open(path, "rb") as fh:
        return fh.readlines()


def plan_from_config(cfg: ExperimentConfig, phase: str = "adapt") -> TrainPlan:
    if cfg.plan.preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {cfg.plan.preset!r}")
    plan = PRESETS[cfg.plan.preset][phase]
    p = cfg.plan
    overrides = {
        "steps": p.steps,
        "batch_size": p.batch_size,
        "seq_len": p.seq_len,
        "lr_peak": p.lr,
        "schedule": p.schedule,
        "warmup_steps": p.warmup_steps,
        "checkpoint_every": p.checkpoint_every,
        "weight_decay": p.weight_decay,
        "clip_norm": p.clip_norm,
    }
    return replace(plan, seed=cfg.seed, **{k: v for k, v in overrides.items() if v is not None})


def task_hyper_from_config(cfg: ExperimentConfig) -> TaskHyper:
    presets = {"paper": PAPER_TASK, "desk": DESK_TASK}
    if cfg.eval.task_preset not in presets:
        raise ConfigurationError(f"unknown task preset {cfg.eval.task_preset!r}")
    e = cfg.eval
    overrides = {
        "epochs": e.task_epochs,
        "batch_size": e.task_batch_size,
        "lr": e.task_lr,
        "seq_len": e.task_seq_len,
        "reduction": e.task_reduction,
    }
    return replace(presets[e.task_preset], seed=cfg.seed, **{k: v for k, v in overrides.items() if v is not None})


def strategy_from_config(cfg: ExperimentConfig) -> StrategySpec:
    s = cfg.strategy
    try:
        name = Strategy(s.name)
    except ValueError:
        raise ConfigurationError(f"unknown strategy {s.name!r}") from None
    return StrategySpec(name, s.embeddings, AdapterConfig(s.reduction, s.inv_reduction))


def load_template(value: str) -> PromptTemplate:
    if value in BUILTIN_TEMPLATES:
        return builtin_template(value)
    return PromptTemplate.load(value)


def target_vocab(cfg: ExperimentConfig) -> BpeVocab:
    if cfg.data.vocab:
        return BpeVocab.load(cfg.data.vocab)
    if not cfg.data.corpus:
        raise ConfigurationError("data.vocab or data.corpus is required")
    specials = [s for s in cfg.tokenizer.specials.split(",") if s]
    return train_bpe(read_lines(cfg.data.corpus), cfg.tokenizer.vocab_size, specials, cfg.tokenizer.pretokenize)


@dataclass
class RunResult:
    run_id: str
    spec: StrategySpec
    ckpt_step: int
    zeroshot: float | None = None
    crosslingual: float | None = None
    supervised: float | None = None
    adapted_path: Path | None = None

    def row(self) -> list[str]:
        def fmt(x):
            return "-" if x is None else f"{x:.4f}"

        red = "-" if self.spec.adapter_config is None else str(self.spec.adapter_config.reduction)
        return [
            self.run_id,
            self.spec.strategy.label,
            str(self.ckpt_step),
            ",".join(self.spec.embedding_set),
            red,
            fmt(self.zeroshot),
            fmt(self.crosslingual),
            fmt(self.supervised),
        ]


def run_experiment(cfg: ExperimentConfig, workdir, run_id: str = "") -> RunResult:
    """Adapt the base checkpoint and run the configured evaluation settings."""
    if not cfg.data.base:
        raise ConfigurationError("data.base (pretrained checkpoint) is required")
    workdir = Path(workdir)
    base = load_checkpoint(cfg.data.base)
    vocab = target_vocab(cfg)
    if not cfg.data.corpus:
        raise ConfigurationError("data.corpus (target-language text) is required")
    ids = np.array(encode_corpus(vocab, read_lines(cfg.data.corpus)), dtype=np.int64)
    spec = strategy_from_config(cfg)
    plan = plan_from_config(cfg)
    adapted = adapt(base, vocab, ids, spec, plan, workdir / "checkpoints" / "adapted", language_tag=run_id)
    result = RunResult(run_id or cfg.run.id, spec, base.step, adapted_path=adapted.checkpoints[0][1])

    settings = {s.strip() for s in cfg.eval.settings.split(",") if s.strip()}
    unknown = settings - {"zeroshot", "crosslingual", "supervised"}
    if unknown:
        raise ConfigurationError(f"unknown eval settings {sorted(unknown)}")
    hyper = task_hyper_from_config(cfg)
    test = read_nli_tsv(cfg.data.target_test) if cfg.data.target_test else None
    if settings and test is None:
        raise ConfigurationError("data.target_test is required for evaluation")
    gold = [ex.label for ex in test] if test else []
    params, bank = adapted.params, adapted.adapters

    if "zeroshot" in settings:
        if not cfg.data.template:
            raise ConfigurationError("data.template is required for zero-shot evaluation")
        preds = zero_shot_eval(params, bank, vocab, load_template(cfg.data.template), test, cfg.eval.scoring)
        result.zeroshot = evaluate_accuracy(preds, gold).accuracy
    if "crosslingual" in settings:
        if not cfg.data.source_train:
            raise ConfigurationError("data.source_train is required for cross-lingual evaluation")
        if base.vocab is None:
            raise DataError("base checkpoint carries no vocab.bpe for the source language")
        head = new_task_head(base.params.config.d_model, base.params.config.n_layers, hyper.reduction, cfg.seed)
        train_task_head(base.params, None, head, base.vocab, read_nli_tsv(cfg.data.source_train), hyper)
        target = TargetArtifacts.from_model(params, vocab, bank)
        result.crosslingual = cross_lingual_eval(base.params, head, target, test, hyper.seq_len).accuracy
    if "supervised" in settings:
        if not cfg.data.target_train:
            raise ConfigurationError("data.target_train is required for supervised evaluation")
        head = new_task_head(params.config.d_model, params.config.n_layers, hyper.reduction, cfg.seed)
        train_task_head(params, bank, head, vocab, read_nli_tsv(cfg.data.target_train), hyper)
        preds = predict_classes(params, bank, head, vocab, test, hyper.seq_len)
        result.supervised = evaluate_accuracy(preds, gold).accuracy
    return result


def read_grid(path) -> list[tuple[str, ExperimentConfig]]:
    """Grid file: one config path per line (relative to the grid file); '#' comments."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"grid file not found: {path}")
    runs = []
    seen = set()
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        cfg_path = Path(line)
        if not cfg_path.is_absolute():
            cfg_path = path.parent / cfg_path
        cfg = ExperimentConfig.load(cfg_path)
        run_id = cfg.run.id or cfg_path.stem
        if run_id in seen:
            raise ConfigurationError(f"duplicate run id {run_id!r} in grid")
        seen.add(run_id)
        runs.append((run_id, cfg))
    if not runs:
        raise ConfigurationError("grid file lists no configs")
    return runs


def run_grid(runs: list[tuple[str, ExperimentConfig]], workdir) -> str:
    """Run every config in order; failures become rows with ERROR markers."""
    workdir = Path(workdir)
    rows = ["\t".join(GRID_COLUMNS)]
    for run_id, cfg in runs:
        log.info("grid run %s", run_id)
        try:
            res = run_experiment(cfg, workdir / run_id, run_id)
            rows.append("\t".join(res.row()))
        except (LangAdaptError, OSError) as exc:
            log.error("run %s failed: %s", run_id, exc)
            marker = f"ERROR:{getattr(exc, 'kind', 'io')}"
            s = cfg.strategy
            red = "-" if s.name == Strategy.EMB_ONLY.value else str(s.reduction)
            rows.append("\t".join([run_id, s.name, "-", s.embeddings, red, marker, marker, marker]))
    return "\n".join(rows) + "\n"
