"""Bottleneck language adapters, the invertible embedding adapter, and the
strategy bookkeeping that decides which tensors train in which phase."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterable, Mapping

from .errors import ConfigurationError, ContractError
from .numcore import Tensor, concat, matmul, relu, seeded_init

if TYPE_CHECKING:
    from .model import ModelParams

INIT_STD = 0.02
EMBEDDINGS = ("wte", "wpe")


@dataclass(frozen=True)
class AdapterConfig:
    reduction: int = 16
    inv_reduction: int = 2
    invertible: bool = True
    language: bool = True

    def __post_init__(self):
        if self.reduction < 1 or self.inv_reduction < 1:
            raise ConfigurationError("reduction factors must be positive integers")

    def bottleneck(self, d_model: int) -> int:
        return d_model // self.reduction

    def coupling_width(self, d_model: int) -> int:
        return (d_model // 2) // self.inv_reduction

    def validate(self, d_model: int) -> None:
        if self.language and self.bottleneck(d_model) < 1:
            raise ConfigurationError(f"reduction {self.reduction} leaves no bottleneck at d={d_model}")
        if self.invertible:
            if d_model % 2:
                raise ConfigurationError(f"invertible adapter needs even d_model, got {d_model}")
            if self.coupling_width(d_model) < 1:
                raise ConfigurationError(
                    f"inv_reduction {self.inv_reduction} leaves no coupling width at d={d_model}"
                )


def bottleneck_shapes(prefix: str, d: int, b: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}down": (d, b),
        f"{prefix}down_b": (b,),
        f"{prefix}up": (b, d),
        f"{prefix}up_b": (d,),
    }


def adapter_shapes(d_model: int, n_layers: int, config: AdapterConfig) -> dict[str, tuple[int, ...]]:
    config.validate(d_model)
    shapes: dict[str, tuple[int, ...]] = {}
    if config.invertible:
        half, c = d_model // 2, config.coupling_width(d_model)
        for net in ("F", "G"):
            shapes.update(bottleneck_shapes(f"inv.{net}.", half, c))
    if config.language:
        b = config.bottleneck(d_model)
        for i in range(n_layers):
            shapes.update(bottleneck_shapes(f"layer{i}.adpt.", d_model, b))
    return shapes


def language_adapter_params(d_model: int, reduction: int) -> int:
    """Closed-form size of one bottleneck adapter: 2*d*b + b + d."""
    b = d_model // reduction
    return 2 * d_model * b + b + d_model


def prefixed(tensors: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}


def init_bottleneck(shapes: Mapping[str, tuple[int, ...]], seed: int) -> dict[str, Tensor]:
    """Down-projections ~ N(0, 0.02); up-projection and both biases zero."""
    out = {}
    for i, (name, shape) in enumerate(shapes.items()):
        scheme = ("normal", 0.0, INIT_STD) if name.endswith("down") else "zeros"
        out[name] = seeded_init(shape, scheme, seed + i)
    return out


@dataclass
class AdapterBank:
    config: AdapterConfig
    tensors: dict[str, Tensor]
    d_model: int
    n_layers: int
    language_tag: str = ""

    def layer(self, i: int) -> dict[str, Tensor]:
        return prefixed(self.tensors, f"layer{i}.adpt.")

    def net(self, name: str) -> dict[str, Tensor]:
        return prefixed(self.tensors, f"inv.{name}.")

    def copy(self) -> "AdapterBank":
        return AdapterBank(
            self.config,
            {k: Tensor(v.data.copy()) for k, v in self.tensors.items()},
            self.d_model,
            self.n_layers,
            self.language_tag,
        )


def new_bank(d_model: int, n_layers: int, config: AdapterConfig, seed: int, language_tag: str = "") -> AdapterBank:
    shapes = adapter_shapes(d_model, n_layers, config)
    return AdapterBank(config, init_bottleneck(shapes, seed), d_model, n_layers, language_tag)


# ---------------------------------------------------------------------------
# Forward maps
# ---------------------------------------------------------------------------


def bottleneck_net(adapter: Mapping[str, Tensor], h: Tensor) -> Tensor:
    """up(relu(down(h))) without the residual."""
    return matmul(relu(matmul(h, adapter["down"]) + adapter["down_b"]), adapter["up"]) + adapter["up_b"]


def bottleneck_forward(adapter: Mapping[str, Tensor], h: Tensor) -> Tensor:
    d = adapter["down"].shape[0]
    if h.shape[-1] != d:
        raise ContractError(f"adapter expects last dim {d}, got {h.shape[-1]}")
    return h + bottleneck_net(adapter, h)


Coupling = Callable[[Tensor], Tensor]


def coupling_forward(e: Tensor, F: Coupling, G: Coupling) -> Tensor:
    d = e.shape[-1]
    if d % 2:
        raise ConfigurationError(f"coupling needs even width, got {d}")
    half = d // 2
    e1, e2 = e[..., :half], e[..., half:]
    v1 = e1 + F(e2)
    v2 = e2 + G(v1)
    return concat([v1, v2], axis=-1)


def coupling_inverse(v: Tensor, F: Coupling, G: Coupling) -> Tensor:
    d = v.shape[-1]
    if d % 2:
        raise ConfigurationError(f"coupling needs even width, got {d}")
    half = d // 2
    v1, v2 = v[..., :half], v[..., half:]
    e2 = v2 - G(v1)
    e1 = v1 - F(e2)
    return concat([e1, e2], axis=-1)


def _nets(bank: AdapterBank) -> tuple[Coupling, Coupling]:
    if bank.d_model % 2:
        raise ConfigurationError(f"invertible adapter needs even d_model, got {bank.d_model}")
    F, G = bank.net("F"), bank.net("G")
    return (lambda x: bottleneck_net(F, x)), (lambda x: bottleneck_net(G, x))


def invertible_forward(bank: AdapterBank, e: Tensor) -> Tensor:
    if e.shape[-1] != bank.d_model:
        raise ContractError(f"invertible adapter expects last dim {bank.d_model}, got {e.shape[-1]}")
    return coupling_forward(e, *_nets(bank))


def invertible_inverse(bank: AdapterBank, v: Tensor) -> Tensor:
    if v.shape[-1] != bank.d_model:
        raise ContractError(f"invertible adapter expects last dim {bank.d_model}, got {v.shape[-1]}")
    return coupling_inverse(v, *_nets(bank))


def inject_adapters(params: "ModelParams", config: AdapterConfig, seed: int, language_tag: str = "") -> AdapterBank:
    """Attach a freshly initialised bank; the model's outputs are unchanged
    until the zero-initialised up-projections move."""
    if params.adapter_bank is not None:
        raise ConfigurationError("model already carries an adapter bank")
    bank = new_bank(params.config.d_model, params.config.n_layers, config, seed, language_tag)
    params.adapter_bank = bank
    return bank


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------


class Strategy(str, enum.Enum):
    EMB_ONLY = "emb-only"
    EMB_THEN_ADPT = "emb-then-adpt"
    EMB_AND_ADPT = "emb-and-adpt"

    @property
    def label(self) -> str:
        return {"emb-only": "Emb", "emb-then-adpt": "Emb->Adpt", "emb-and-adpt": "Emb+Adpt"}[self.value]


def parse_embedding_set(text: str | Iterable[str]) -> tuple[str, ...]:
    items = [s.strip() for s in text.split(",")] if isinstance(text, str) else list(text)
    items = [s for s in items if s]
    bad = [s for s in items if s not in EMBEDDINGS]
    if bad or "wte" not in items:
        raise ConfigurationError(f"embedding set must be 'wte' or 'wte,wpe', got {items}")
    return tuple(e for e in EMBEDDINGS if e in items)


@dataclass(frozen=True)
class StrategySpec:
    strategy: Strategy
    embedding_set: tuple[str, ...] = ("wte", "wpe")
    adapter_config: AdapterConfig | None = field(default_factory=AdapterConfig)

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "embedding_set", parse_embedding_set(self.embedding_set))
        if self.strategy is Strategy.EMB_ONLY:
            object.__setattr__(self, "adapter_config", None)
        elif self.adapter_config is None:
            raise ConfigurationError(f"{self.strategy.value} needs an adapter config")

    @property
    def n_phases(self) -> int:
        return 2 if self.strategy is Strategy.EMB_THEN_ADPT else 1

    @property
    def uses_adapters(self) -> bool:
        return self.adapter_config is not None

    def phase_steps(self, total: int) -> tuple[int, ...]:
        """Split a step budget into phases; the two-phase strategy halves it."""
        if self.n_phases == 2:
            return (total // 2, total - total // 2)
        return (total,)

    def adapters_present(self, phase: int) -> bool:
        if not self.uses_adapters:
            return False
        return self.strategy is Strategy.EMB_AND_ADPT or phase == 1


def trainable_set(spec: StrategySpec, phase: int, adapter_names: Iterable[str] = ()) -> set[str]:
    if not 0 <= phase < spec.n_phases:
        raise ContractError(f"phase {phase} invalid for {spec.strategy.value}")
    emb = set(spec.embedding_set)
    adapters = set(adapter_names)
    if spec.strategy is Strategy.EMB_ONLY:
        return emb
    if spec.strategy is Strategy.EMB_THEN_ADPT:
        return emb if phase == 0 else adapters
    return emb | adapters
