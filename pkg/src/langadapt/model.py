"""GPT-style decoder with learned positions and a head tied to ``wte``."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from . import adapters as adp
from .errors import ConfigurationError, ContractError
from .numcore import (
    Tensor,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    matmul,
    seeded_init,
    softmax,
    transpose,
)

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ffn: int = 256
    vocab_size: int = 512
    max_positions: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ffn", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


DESK_CONFIG = ModelConfig()
# 24 layers, 16 heads, d=2048, ffn=8192, 130k vocab; context 1024 is the adaptation length.
PAPER_CONFIG = ModelConfig(
    n_layers=24, n_heads=16, d_model=2048, d_ffn=8192, vocab_size=130_000, max_positions=1024
)


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every backbone tensor, in canonical order."""
    d, f = config.d_model, config.d_ffn
    shapes = {"wte": (config.vocab_size, d), "wpe": (config.max_positions, d)}
    for i in range(config.n_layers):
        p = f"layer{i}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        for m in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{m}.w"] = (d, d)
            shapes[f"{p}.attn.{m}.b"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.ffn.in.w"] = (d, f)
        shapes[f"{p}.ffn.in.b"] = (f,)
        shapes[f"{p}.ffn.out.w"] = (f, d)
        shapes[f"{p}.ffn.out.b"] = (d,)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    return shapes


def _init_scheme(name: str):
    if name.endswith(".g"):
        return "ones"
    if name.endswith(".b"):
        return "zeros"
    return ("normal", 0.0, INIT_STD)


def derive_seed(seed: int, *salt: int) -> int:
    return int(np.random.SeedSequence([seed, *salt]).generate_state(1, np.uint64)[0])


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    adapter_bank: "adp.AdapterBank | None" = field(default=None, repr=False)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def wte(self) -> Tensor:
        return self.tensors["wte"]

    @property
    def wpe(self) -> Tensor:
        return self.tensors["wpe"]

    def copy(self) -> "ModelParams":
        """Deep copy of the backbone; any adapter bank is not carried over."""
        return ModelParams(self.config, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()})


def build_model(config: ModelConfig) -> ModelParams:
    tensors = {}
    for i, (name, shape) in enumerate(tensor_shapes(config).items()):
        tensors[name] = seeded_init(shape, _init_scheme(name), derive_seed(config.seed, i))
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _check_ids(config: ModelConfig, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ContractError(f"ids must be [batch, seq], got shape {ids.shape}")
    if ids.shape[1] > config.max_positions:
        raise ContractError(f"sequence length {ids.shape[1]} exceeds max_positions {config.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ContractError(f"token id out of range [0, {config.vocab_size})")
    return ids


def _attention(t: Mapping[str, Tensor], p: str, h: Tensor, config: ModelConfig) -> Tensor:
    B, T, d = h.shape
    H, hd = config.n_heads, config.head_dim

    def heads(m):
        x = matmul(h, t[f"{p}.attn.{m}.w"]) + t[f"{p}.attn.{m}.b"]
        return x.reshape(B, T, H, hd).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    probs = softmax(scores, axis=-1, mask=np.tril(np.ones((T, T), dtype=bool)))
    ctx = matmul(probs, v).transpose(0, 2, 1, 3).reshape(B, T, d)
    return matmul(ctx, t[f"{p}.attn.o.w"]) + t[f"{p}.attn.o.b"]


def hidden_states(
    params: ModelParams,
    adapters: "adp.AdapterBank | None",
    ids,
    task: "Mapping[str, Tensor] | None" = None,
) -> Tensor:
    """Final hidden states [batch, seq, d] just before the tied head.

    ``task`` holds stacked task-adapter tensors (``layer{i}.task.*``) used by
    classification heads; they run after the language adapter in each layer.
    """
    config = params.config
    ids = _check_ids(config, ids)
    t = params.tensors
    T = ids.shape[1]
    x = embedding(t["wte"], ids) + t["wpe"][:T]
    if adapters is not None and adapters.config.invertible:
        x = adp.invertible_forward(adapters, x)
    for i in range(config.n_layers):
        p = f"layer{i}"
        x = x + _attention(t, p, layer_norm(x, t[f"{p}.ln1.g"], t[f"{p}.ln1.b"]), config)
        h = layer_norm(x, t[f"{p}.ln2.g"], t[f"{p}.ln2.b"])
        f = matmul(gelu(matmul(h, t[f"{p}.ffn.in.w"]) + t[f"{p}.ffn.in.b"]), t[f"{p}.ffn.out.w"])
        f = f + t[f"{p}.ffn.out.b"]
        if adapters is not None and adapters.config.language:
            f = adp.bottleneck_forward(adapters.layer(i), f)
        if task is not None:
            f = adp.bottleneck_forward(adp.prefixed(task, f"{p}.task."), f)
        x = x + f
    x = layer_norm(x, t["lnf.g"], t["lnf.b"])
    if adapters is not None and adapters.config.invertible:
        x = adp.invertible_inverse(adapters, x)
    return x


def forward_logits(params: ModelParams, adapters, ids) -> Tensor:
    h = hidden_states(params, adapters, ids)
    return matmul(h, transpose(params.wte))


def lm_loss(params: ModelParams, adapters, ids) -> Tensor:
    """Mean next-token cross-entropy over every position of every row."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[1] < 2:
        raise ContractError("lm_loss needs sequences of length >= 2")
    logits = forward_logits(params, adapters, ids[:, :-1])
    return cross_entropy(logits, ids[:, 1:])


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------

GROUPS = ("wte", "wpe", "transformer", "invertible_adapter", "language_adapters")


def param_group(name: str) -> str:
    if name in ("wte", "wpe"):
        return name
    if name.startswith("inv."):
        return "invertible_adapter"
    if ".adpt." in name:
        return "language_adapters"
    return "transformer"


@dataclass
class ParamCount:
    total: int
    trainable: int
    by_group: dict[str, int]

    @property
    def frozen(self) -> int:
        return self.total - self.trainable


def count_params(
    params: ModelParams | ModelConfig,
    adapters=None,
    trainable_filter=None,
    phase: int | None = None,
) -> ParamCount:
    """Exact parameter counts; the tied head is never counted separately.

    ``params`` may be a bare :class:`ModelConfig` (nothing is allocated), and
    ``adapters`` an :class:`AdapterConfig` in that case. ``trainable_filter`` is
    a :class:`StrategySpec` (``phase=None`` takes the union over its phases) or
    an explicit collection of tensor names.
    """
    if isinstance(params, ModelConfig):
        shapes = dict(tensor_shapes(params))
        if adapters is not None:
            shapes.update(adp.adapter_shapes(params.d_model, params.n_layers, adapters))
    else:
        shapes = {k: v.shape for k, v in params.tensors.items()}
        if adapters is not None:
            shapes.update({k: v.shape for k, v in adapters.tensors.items()})
    sizes = {k: int(np.prod(s, dtype=np.int64)) for k, s in shapes.items()}

    by_group = dict.fromkeys(GROUPS, 0)
    for name, n in sizes.items():
        by_group[param_group(name)] += n
    total = sum(sizes.values())

    if trainable_filter is None:
        trainable = total
    else:
        if isinstance(trainable_filter, adp.StrategySpec):
            phases = range(trainable_filter.n_phases) if phase is None else [phase]
            names: set[str] = set()
            adapter_names = [k for k in sizes if param_group(k) in ("invertible_adapter", "language_adapters")]
            for ph in phases:
                names |= adp.trainable_set(trainable_filter, ph, adapter_names)
        else:
            names = set(trainable_filter)
        trainable = sum(n for k, n in sizes.items() if k in names)
    return ParamCount(total, trainable, by_group)


def with_vocab(params: ModelParams, vocab_size: int, seed: int) -> ModelParams:
    """Copy of ``params`` whose ``wte`` is freshly drawn for a new vocabulary."""
    config = replace(params.config, vocab_size=vocab_size)
    tensors = {k: Tensor(v.data.copy()) for k, v in params.tensors.items()}
    tensors["wte"] = seeded_init((vocab_size, config.d_model), ("normal", 0.0, INIT_STD), seed)
    return ModelParams(config, tensors)


def checksum(tensors: Mapping[str, Tensor], names: Iterable[str] | None = None) -> dict[str, str]:
    names = tensors.keys() if names is None else names
    return {n: hashlib.sha256(np.ascontiguousarray(tensors[n].data).tobytes()).hexdigest() for n in names}
