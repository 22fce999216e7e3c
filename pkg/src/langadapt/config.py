"""Experiment config files: INI-style ``key = value`` sections.

Unknown sections or keys are rejected, relative paths resolve against the
config file's directory, and every referenced input must exist at parse time.
"""

from __future__ import annotations

import configparser
import hashlib
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError

BUILTIN_TEMPLATES = ("en", "de", "ko")


def _path(default=""):
    return field(default=default, metadata={"path": True})


@dataclass
class RunSection:
    id: str = ""
    seed: int = 0


@dataclass
class ModelSection:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ffn: int = 256
    max_positions: int = 128


@dataclass
class TokenizerSection:
    vocab_size: int = 512
    pretokenize: bool = False
    specials: str = ""


@dataclass
class DataSection:
    base: str = _path()
    vocab: str = _path()
    corpus: str = _path()
    heldout: str = _path()
    pretrain_corpora: str = ""
    sampling: str = ""
    source_train: str = _path()
    target_train: str = _path()
    target_test: str = _path()
    template: str = _path()


@dataclass
class StrategySection:
    name: str = "emb-and-adpt"
    embeddings: str = "wte"
    reduction: int = 16
    inv_reduction: int = 2


@dataclass
class PlanSection:
    preset: str = "desk"
    steps: typing.Optional[int] = None
    batch_size: typing.Optional[int] = None
    seq_len: typing.Optional[int] = None
    lr: typing.Optional[float] = None
    schedule: typing.Optional[str] = None
    warmup_steps: typing.Optional[int] = None
    checkpoint_every: typing.Optional[int] = None
    weight_decay: typing.Optional[float] = None
    clip_norm: typing.Optional[float] = None


@dataclass
class EvalSection:
    settings: str = "zeroshot,crosslingual,supervised"
    scoring: str = "prompt"
    task_preset: str = "desk"
    task_epochs: typing.Optional[int] = None
    task_batch_size: typing.Optional[int] = None
    task_lr: typing.Optional[float] = None
    task_seq_len: typing.Optional[int] = None
    task_reduction: typing.Optional[int] = None


SECTIONS = {
    "run": RunSection,
    "model": ModelSection,
    "tokenizer": TokenizerSection,
    "data": DataSection,
    "strategy": StrategySection,
    "plan": PlanSection,
    "eval": EvalSection,
}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    data: DataSection = field(default_factory=DataSection)
    strategy: StrategySection = field(default_factory=StrategySection)
    plan: PlanSection = field(default_factory=PlanSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def to_text(self) -> str:
        out = []
        for name in SECTIONS:
            out.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                value = getattr(section, f.name)
                out.append(f"{f.name} = {_format(value)}")
            out.append("")
        return "\n".join(out)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:12]

    def pretrain_corpora(self) -> dict[str, str]:
        return _pairs(self.data.pretrain_corpora, "=")

    def sampling(self) -> dict[str, float]:
        return {k: float(v) for k, v in _pairs(self.data.sampling, ":").items()}

    @classmethod
    def parse(cls, text: str, base_dir=".", check_paths: bool = True) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config: {exc}".splitlines()[0]) from None
        base_dir = Path(base_dir).resolve()
        cfg = cls()
        for sname in cp.sections():
            if sname not in SECTIONS:
                raise ConfigurationError(f"unknown section [{sname}]")
            section = getattr(cfg, sname)
            known = {f.name: f for f in fields(section)}
            hints = typing.get_type_hints(type(section))
            for key, raw in cp.items(sname):
                if key not in known:
                    raise ConfigurationError(f"unknown key '{key}' in [{sname}]")
                value = _coerce(raw, hints[key], f"{sname}.{key}")
                if known[key].metadata.get("path") and value:
                    value = _resolve(value, base_dir, f"{sname}.{key}", check_paths)
                setattr(section, key, value)
        if cfg.data.pretrain_corpora:
            resolved = {
                lang: _resolve(p, base_dir, f"data.pretrain_corpora[{lang}]", check_paths)
                for lang, p in cfg.pretrain_corpora().items()
            }
            cfg.data.pretrain_corpora = ",".join(f"{k}={v}" for k, v in resolved.items())
        return cfg

    @classmethod
    def load(cls, path, check_paths: bool = True) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        return cls.parse(path.read_text(encoding="utf-8"), path.parent, check_paths)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(raw: str, tp, where: str):
    raw = raw.strip()
    optional = typing.get_origin(tp) is typing.Union
    if optional:
        if raw == "":
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {raw!r} as {tp.__name__}") from None
    return raw


def _resolve(value: str, base_dir: Path, where: str, check: bool) -> str:
    if where == "data.template" and value in BUILTIN_TEMPLATES:
        return value
    p = Path(value)
    if not p.is_absolute():
        p = base_dir / p
    p = p.resolve()
    if check and not p.exists():
        raise ConfigurationError(f"{where}: path does not exist: {p}")
    return str(p)


def _pairs(text: str, sep: str) -> dict[str, str]:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        key, found, value = item.partition(sep)
        if not found or not key.strip() or not value.strip():
            raise ConfigurationError(f"expected 'key{sep}value', got {item!r}")
        out[key.strip()] = value.strip()
    return out
