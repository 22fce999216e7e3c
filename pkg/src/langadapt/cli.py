"""``langadapt`` command line.

Every subcommand writes into ``<runs-dir>/<config-hash>-<timestamp>/`` with
the resolved config, a log and (where relevant) checkpoints and results.tsv.
A run directory still holding an ``INCOMPLETE`` marker did not finish.
Errors print one line, ``error kind=<kind> msg=<message>``, and exit 2 for
usage/configuration problems, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adapters import Strategy, StrategySpec
from .checkpoint import load_checkpoint
from .config import ExperimentConfig
from .errors import ConfigurationError, LangAdaptError
from .evaluation import (
    TargetArtifacts,
    cross_lingual_eval,
    evaluate_accuracy,
    format_results,
    new_task_head,
    predict_classes,
    read_nli_tsv,
    train_task_head,
    zero_shot_eval,
)
from .experiment import (
    load_template,
    plan_from_config,
    read_grid,
    read_lines,
    run_grid,
    strategy_from_config,
    target_vocab,
    task_hyper_from_config,
)
from .model import PAPER_CONFIG, ModelConfig, count_params
from .tokenizer import BpeVocab, encode_corpus, train_bpe
from .training import SamplingTable, adapt, pretrain

log = logging.getLogger("langadapt")

USAGE_EXIT = 2
RUNTIME_EXIT = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class RunDir:
    MARKER = "INCOMPLETE"

    def __init__(self, root, cfg: ExperimentConfig):
        stamp = time.strftime("%Y%m%dT%H%M%S")
        base = Path(root) / f"{cfg.digest()}-{stamp}"
        path, n = base, 1
        while path.exists():
            path = base.with_name(f"{base.name}.{n}")
            n += 1
        self.path = path
        self.path.mkdir(parents=True)
        (self.path / self.MARKER).touch()
        (self.path / "config").write_text(cfg.to_text(), encoding="utf-8")
        self._handler = logging.FileHandler(self.path / "log", encoding="utf-8")
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        logging.getLogger("langadapt").addHandler(self._handler)

    @property
    def checkpoints(self) -> Path:
        return self.path / "checkpoints"

    def close(self, ok: bool) -> None:
        logging.getLogger("langadapt").removeHandler(self._handler)
        self._handler.close()
        if ok:
            (self.path / self.MARKER).unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=("paper", "desk"))
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("-v", "--verbose", action="store_true")


def _strategy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--embeddings", help="wte or wte,wpe")
    p.add_argument("--reduction", type=int)
    p.add_argument("--inv-reduction", type=int)


def _task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--task-reduction", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="langadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-tokenizer", help="train a byte-level BPE vocab")
    _common(p)
    p.add_argument("--corpus", action="append", required=True)
    p.add_argument("--vocab", type=int, required=True, help="target vocab size")
    p.add_argument("--out", required=True)
    p.add_argument("--specials", default="", help="comma-separated special tokens, e.g. <pad>")
    p.add_argument("--pretokenize", action="store_true")

    p = sub.add_parser("pretrain", help="multilingual causal-LM pretraining")
    _common(p)
    p.add_argument("--corpus", action="append", default=[], metavar="LANG=PATH")
    p.add_argument("--sampling", help="LANG:P,... (default uniform over corpora)")
    p.add_argument("--vocab", help="vocab file the corpora are tokenized with")
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--lr", type=float)
    for name in ("n-layers", "n-heads", "d-model", "d-ffn", "max-positions"):
        p.add_argument(f"--{name}", type=int)

    p = sub.add_parser("adapt", help="adapt a pretrained checkpoint to a new language")
    _common(p)
    _strategy_flags(p)
    p.add_argument("--base")
    p.add_argument("--corpus", help="target-language text")
    p.add_argument("--vocab", help="target vocab file (trained from --corpus if absent)")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--language", default="")

    p = sub.add_parser("eval-zeroshot", help="prompt-based zero-shot NLI")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="NLI TSV to score")
    p.add_argument("--template", required=True, help="template file or en/de/ko")
    p.add_argument("--scoring", choices=("prompt", "verbalizer"), default="prompt")

    p = sub.add_parser("eval-crosslingual", help="source-trained task adapters on the target language")
    _common(p)
    _task_flags(p)
    p.add_argument("--base", required=True, help="source-language (pretrained) checkpoint")
    p.add_argument("--target", required=True, help="adapted target-language checkpoint")
    p.add_argument("--source-train", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("eval-supervised", help="task adapters trained on the target language")
    _common(p)
    _task_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("params", help="parameter accounting")
    _common(p)
    _strategy_flags(p)
    p.add_argument("--checkpoint", help="checkpoint to count (default: --preset model config)")
    p.add_argument("--no-invertible", action="store_true")

    p = sub.add_parser("grid", help="run a list of experiment configs")
    _common(p)
    p.add_argument("--grid", required=True, help="file listing config paths")
    p.add_argument("--out", help="also write the results TSV here")
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.preset is not None:
        cfg.plan.preset = args.preset
        cfg.eval.task_preset = args.preset
    for flag, (section, key) in {
        "strategy": ("strategy", "name"),
        "embeddings": ("strategy", "embeddings"),
        "reduction": ("strategy", "reduction"),
        "inv_reduction": ("strategy", "inv_reduction"),
        "steps": ("plan", "steps"),
        "checkpoint_every": ("plan", "checkpoint_every"),
        "epochs": ("eval", "task_epochs"),
        "task_reduction": ("eval", "task_reduction"),
        "vocab_size": ("tokenizer", "vocab_size"),
        "n_layers": ("model", "n_layers"),
        "n_heads": ("model", "n_heads"),
        "d_model": ("model", "d_model"),
        "d_ffn": ("model", "d_ffn"),
        "max_positions": ("model", "max_positions"),
    }.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    # flags shared between LM plans and task training
    if args.command in ("eval-crosslingual", "eval-supervised"):
        for flag, key in (("batch_size", "task_batch_size"), ("lr", "task_lr"), ("seq_len", "task_seq_len")):
            if getattr(args, flag, None) is not None:
                setattr(cfg.eval, key, getattr(args, flag))
    else:
        for flag, key in (("batch_size", "batch_size"), ("lr", "lr"), ("seq_len", "seq_len")):
            if getattr(args, flag, None) is not None:
                setattr(cfg.plan, key, getattr(args, flag))
    if args.command == "adapt":
        for flag in ("base", "corpus", "vocab"):
            value = getattr(args, flag)
            if value:
                setattr(cfg.data, flag, str(_existing(value)))
    elif args.command == "pretrain" and args.vocab:
        cfg.data.vocab = str(_existing(args.vocab))
    return cfg


def _existing(path) -> Path:
    p = Path(path).resolve()
    if not p.exists():
        raise ConfigurationError(f"path does not exist: {path}")
    return p


def _read_vocab_for(ckpt, path) -> BpeVocab:
    if ckpt.vocab is None:
        raise ConfigurationError(f"{path} carries no vocab.bpe")
    return ckpt.vocab


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train_tokenizer(args, cfg, run: RunDir) -> None:
    lines = []
    for c in args.corpus:
        lines += read_lines(_existing(c))
    specials = [s for s in args.specials.split(",") if s]
    vocab = train_bpe(lines, args.vocab, specials, args.pretokenize)
    vocab.save(args.out)
    vocab.save(run.path / "vocab.bpe")
    print(f"vocab_size\t{vocab.vocab_size}\nmerges\t{len(vocab.merges)}\nout\t{args.out}")


def cmd_pretrain(args, cfg, run: RunDir) -> None:
    corpora_paths = cfg.pretrain_corpora()
    for item in args.corpus:
        lang, sep, path = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--corpus expects LANG=PATH, got {item!r}")
        corpora_paths[lang] = str(_existing(path))
    if not corpora_paths:
        raise ConfigurationError("pretrain needs at least one corpus")
    if not cfg.data.vocab:
        raise ConfigurationError("pretrain needs --vocab (or data.vocab)")
    vocab = BpeVocab.load(cfg.data.vocab)
    if args.sampling:
        cfg.data.sampling = args.sampling
    probs = cfg.sampling() or {lang: 1.0 / len(corpora_paths) for lang in corpora_paths}
    table = SamplingTable(probs)
    corpora = {lang: np.array(encode_corpus(vocab, read_lines(p))) for lang, p in corpora_paths.items()}
    m = cfg.model
    config = ModelConfig(m.n_layers, m.n_heads, m.d_model, m.d_ffn, vocab.vocab_size, m.max_positions, cfg.seed)
    plan = plan_from_config(cfg, "pretrain")
    result = pretrain(config, corpora, table, plan, run.checkpoints, vocab)
    for step, path in result.checkpoints:
        print(f"checkpoint\t{step}\t{path}")
    print(f"final_loss\t{result.losses[-1]:.4f}" if result.losses else "final_loss\t-")


def cmd_adapt(args, cfg, run: RunDir) -> None:
    if not cfg.data.base:
        raise ConfigurationError("adapt needs --base (or data.base)")
    if not cfg.data.corpus:
        raise ConfigurationError("adapt needs --corpus (or data.corpus)")
    base = load_checkpoint(cfg.data.base)
    vocab = target_vocab(cfg)
    ids = np.array(encode_corpus(vocab, read_lines(cfg.data.corpus)), dtype=np.int64)
    spec = strategy_from_config(cfg)
    plan = plan_from_config(cfg)
    result = adapt(base, vocab, ids, spec, plan, run.checkpoints / "adapted", args.language)
    print(f"adapted\t{result.checkpoints[0][1]}")
    if result.losses:
        print(f"final_loss\t{result.losses[-1]:.4f}")


def _write_results(run: RunDir, rows) -> None:
    text = format_results(rows)
    (run.path / "results.tsv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_eval_zeroshot(args, cfg, run: RunDir) -> None:
    ckpt = load_checkpoint(_existing(args.checkpoint))
    vocab = _read_vocab_for(ckpt, args.checkpoint)
    data = read_nli_tsv(_existing(args.data))
    template = load_template(args.template if args.template in ("en", "de", "ko") else str(_existing(args.template)))
    preds = zero_shot_eval(ckpt.params, ckpt.adapters, vocab, template, data, args.scoring)
    acc = evaluate_accuracy(preds, [ex.label for ex in data]).accuracy
    _write_results(run, [("zeroshot", Path(args.checkpoint).name, Path(args.data).name, acc)])


def cmd_eval_supervised(args, cfg, run: RunDir) -> None:
    ckpt = load_checkpoint(_existing(args.checkpoint))
    vocab = _read_vocab_for(ckpt, args.checkpoint)
    hyper = task_hyper_from_config(cfg)
    c = ckpt.params.config
    head = new_task_head(c.d_model, c.n_layers, hyper.reduction, cfg.seed)
    train_task_head(ckpt.params, ckpt.adapters, head, vocab, read_nli_tsv(_existing(args.train)), hyper)
    data = read_nli_tsv(_existing(args.data))
    preds = predict_classes(ckpt.params, ckpt.adapters, head, vocab, data, hyper.seq_len)
    acc = evaluate_accuracy(preds, [ex.label for ex in data]).accuracy
    _write_results(run, [("supervised", Path(args.checkpoint).name, Path(args.data).name, acc)])


def cmd_eval_crosslingual(args, cfg, run: RunDir) -> None:
    base = load_checkpoint(_existing(args.base))
    target = load_checkpoint(_existing(args.target))
    hyper = task_hyper_from_config(cfg)
    c = base.params.config
    head = new_task_head(c.d_model, c.n_layers, hyper.reduction, cfg.seed)
    train_task_head(
        base.params, None, head, _read_vocab_for(base, args.base), read_nli_tsv(_existing(args.source_train)), hyper
    )
    artifacts = TargetArtifacts.from_model(target.params, _read_vocab_for(target, args.target), target.adapters)
    data = read_nli_tsv(_existing(args.data))
    acc = cross_lingual_eval(base.params, head, artifacts, data, hyper.seq_len).accuracy
    _write_results(run, [("crosslingual", Path(args.target).name, Path(args.data).name, acc)])


def cmd_params(args, cfg, run: RunDir) -> None:
    if args.checkpoint:
        ckpt = load_checkpoint(_existing(args.checkpoint))
        config = ckpt.params.config
    elif args.preset == "paper":
        config = PAPER_CONFIG
    else:
        m = cfg.model
        config = ModelConfig(m.n_layers, m.n_heads, m.d_model, m.d_ffn, cfg.tokenizer.vocab_size, m.max_positions)
    spec = None
    adapter_config = None
    if args.strategy or args.config:
        spec = strategy_from_config(cfg)
        if spec.adapter_config is not None:
            adapter_config = replace(spec.adapter_config, invertible=not args.no_invertible)
            spec = StrategySpec(spec.strategy, spec.embedding_set, adapter_config)
    counts = count_params(config, adapter_config, spec)
    lines = [f"total\t{counts.total}", f"trainable\t{counts.trainable}", f"frozen\t{counts.frozen}"]
    lines += [f"group.{k}\t{v}" for k, v in counts.by_group.items()]
    text = "\n".join(lines) + "\n"
    (run.path / "params.tsv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_grid(args, cfg, run: RunDir) -> None:
    runs = read_grid(args.grid)
    text = run_grid(runs, run.path / "runs")
    (run.path / "results.tsv").write_text(text, encoding="utf-8")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


COMMANDS = {
    "train-tokenizer": cmd_train_tokenizer,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval-zeroshot": cmd_eval_zeroshot,
    "eval-crosslingual": cmd_eval_crosslingual,
    "eval-supervised": cmd_eval_supervised,
    "params": cmd_params,
    "grid": cmd_grid,
}


def _fail(kind: str, msg: str, code: int) -> int:
    msg = " ".join(str(msg).split())
    print(f"error kind={kind} msg={msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, USAGE_EXIT)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load_config(args)
    except LangAdaptError as exc:
        return _fail(exc.kind, exc, USAGE_EXIT)
    run = RunDir(args.runs_dir, cfg)
    ok = False
    try:
        COMMANDS[args.command](args, cfg, run)
        ok = True
    except ConfigurationError as exc:
        return _fail(exc.kind, exc, USAGE_EXIT)
    except LangAdaptError as exc:
        return _fail(exc.kind, exc, RUNTIME_EXIT)
    except OSError as exc:
        return _fail("io", exc, RUNTIME_EXIT)
    finally:
        run.close(ok)
    return 0


if __name__ == "__main__":
    sys.exit(main())
