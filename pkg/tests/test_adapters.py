import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from langadapt.adapters import (
    AdapterConfig,
    AdapterBank,
    Strategy,
    StrategySpec,
    adapter_shapes,
    bottleneck_forward,
    bottleneck_net,
    coupling_forward,
    inject_adapters,
    invertible_forward,
    invertible_inverse,
    language_adapter_params,
    new_bank,
    trainable_set,
)
from langadapt.errors import ConfigurationError, ContractError
from langadapt.model import DESK_CONFIG, build_model, checksum, count_params, forward_logits, lm_loss
from langadapt.numcore import Tensor, backward, no_grad
from langadapt.training import OptimState, adamw_step


def hand_adapter(down, up, d):
    down = np.asarray(down, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    return {
        "down": Tensor(down),
        "down_b": Tensor(np.zeros(down.shape[1])),
        "up": Tensor(up),
        "up_b": Tensor(np.zeros(d)),
    }


def random_bank(d, seed, gain=1.0):
    """Every coupling weight redrawn with std gain/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    bank = new_bank(d, 1, AdapterConfig(inv_reduction=2, language=False), seed)
    for t in bank.tensors.values():
        std = gain / np.sqrt(t.shape[0]) if t.ndim == 2 else gain
        t.data = (std * rng.standard_normal(t.shape)).astype(np.float32)
    return bank


# --- bottleneck ---------------------------------------------------------------------


def test_bottleneck_hand_example():
    down = [[1, 0], [0, 1], [0, 0], [0, 0]]
    adapter = hand_adapter(down, np.ones((2, 4)), 4)
    out = bottleneck_forward(adapter, Tensor([1.0, -2.0, 3.0, 4.0]))
    assert out.data.tolist() == [2.0, -1.0, 4.0, 5.0]


def test_bottleneck_zero_up_is_identity(rng):
    adapter = hand_adapter(rng.standard_normal((8, 2)), np.zeros((2, 8)), 8)
    h = Tensor(rng.standard_normal((3, 5, 8)))
    assert bottleneck_forward(adapter, h).data.tobytes() == h.data.tobytes()


def test_bottleneck_residual_in_span_of_up(rng):
    up = rng.standard_normal((2, 6))
    adapter = hand_adapter(rng.standard_normal((6, 2)), up, 6)
    h = Tensor(rng.standard_normal((10, 6)))
    delta = (bottleneck_forward(adapter, h).data - h.data).astype(np.float64)
    coef, *_ = np.linalg.lstsq(up.T, delta.T, rcond=None)
    np.testing.assert_allclose(up.T @ coef, delta.T, atol=1e-5)


def test_batched_vector_inputs_agree(rng):
    adapter = hand_adapter(rng.standard_normal((4, 2)), rng.standard_normal((2, 4)), 4)
    h = rng.standard_normal((3, 4))
    rows = [bottleneck_forward(adapter, Tensor(r)).data for r in h]
    np.testing.assert_allclose(np.stack(rows), bottleneck_forward(adapter, Tensor(h)).data, atol=1e-6)


def test_bottleneck_shape_mismatch(rng):
    adapter = hand_adapter(np.ones((4, 2)), np.ones((2, 4)), 4)
    with pytest.raises(ContractError):
        bottleneck_forward(adapter, Tensor(np.ones(5)))


# --- invertible coupling ----------------------------------------------------------------


def test_coupling_hand_example():
    F = hand_adapter(np.eye(2), np.eye(2), 2)
    out = coupling_forward(Tensor([1.0, 2.0, 3.0, 4.0]), lambda x: bottleneck_net(F, x), lambda x: x * 0.0)
    assert out.data.tolist() == [4.0, 6.0, 3.0, 4.0]


def test_coupling_hand_example_through_bank():
    # inv_reduction=1 gives c = d/2 = 2: identity down/up realise F(x)=x for x >= 0
    bank = new_bank(4, 1, AdapterConfig(inv_reduction=1, language=False), 0)
    bank.tensors["inv.F.down"].data = np.eye(2, dtype=np.float32)
    bank.tensors["inv.F.up"].data = np.eye(2, dtype=np.float32)
    bank.tensors["inv.G.down"].data[:] = 0
    v = invertible_forward(bank, Tensor([1.0, 2.0, 3.0, 4.0]))
    assert v.data.tolist() == [4.0, 6.0, 3.0, 4.0]
    assert invertible_inverse(bank, v).data.tolist() == [1.0, 2.0, 3.0, 4.0]


def test_zero_coupling_is_identity(rng):
    bank = new_bank(64, 2, AdapterConfig(), 5)
    e = Tensor(rng.standard_normal((4, 64)))
    assert invertible_forward(bank, e).data.tobytes() == e.data.tobytes()


def test_odd_width_rejected():
    with pytest.raises(ConfigurationError):
        coupling_forward(Tensor(np.ones(3)), lambda x: x, lambda x: x)
    with pytest.raises(ConfigurationError):
        AdapterConfig().validate(63)


# unit-scale inputs and fan-in scaled weights; f32 rounding grows with |v|
@given(st.integers(0, 2**32 - 1), st.sampled_from([4, 16, 64, 256]), st.floats(0.01, 1.0))
def test_invertibility_property(seed, d, gain):
    bank = random_bank(d, seed, gain)
    e = np.random.default_rng(seed + 1).standard_normal((32, d))
    back = invertible_inverse(bank, invertible_forward(bank, Tensor(e))).data
    assert np.max(np.abs(back - e.astype(np.float32))) < 1e-5


# --- injection -------------------------------------------------------------------


def test_inject_is_identity(desk_params, rng):
    ids = rng.integers(512, size=(3, 12))
    with no_grad():
        base = forward_logits(desk_params, None, ids).data
        bank = inject_adapters(desk_params, AdapterConfig(16), seed=1)
        adapted = forward_logits(desk_params, bank, ids).data
    assert np.max(np.abs(adapted - base)) < 1e-6


def test_inject_twice_rejected(desk_params):
    inject_adapters(desk_params, AdapterConfig(), 0)
    with pytest.raises(ConfigurationError):
        inject_adapters(desk_params, AdapterConfig(), 1)


def test_inject_adds_closed_form_count(desk_params):
    bank = inject_adapters(desk_params, AdapterConfig(16), 0)
    before = count_params(desk_params).total
    after = count_params(desk_params, bank).total
    assert after - before == 1_160 + 2_144
    assert sum(t.size for t in bank.tensors.values()) == 3_304


def test_adapter_names_and_shapes():
    shapes = adapter_shapes(64, 2, AdapterConfig(16))
    assert shapes["inv.F.down"] == (32, 16) and shapes["inv.G.up"] == (16, 32)
    assert shapes["layer1.adpt.down"] == (64, 4) and shapes["layer0.adpt.up_b"] == (64,)
    per_layer = sum(int(np.prod(s)) for k, s in shapes.items() if k.startswith("layer0."))
    assert per_layer == 580 == 64 * 4 + 4 + 4 * 64 + 64


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        AdapterConfig(reduction=0)
    with pytest.raises(ConfigurationError):
        AdapterConfig(reduction=128).validate(64)
    with pytest.raises(ConfigurationError):
        AdapterConfig(inv_reduction=64).validate(64)


@given(st.integers(1, 2048), st.integers(1, 2048))
def test_capacity_monotone_in_reduction(r1, r2):
    lo, hi = sorted((r1, r2))
    assert language_adapter_params(2048, hi) <= language_adapter_params(2048, lo)


def test_bank_is_one_adapter_per_layer():
    bank = new_bank(64, 3, AdapterConfig(), 0)
    assert {k.split(".")[0] for k in bank.tensors if k.startswith("layer")} == {"layer0", "layer1", "layer2"}
    assert {k: v.shape for k, v in bank.net("F").items()} == {k: v.shape for k, v in bank.net("G").items()}


# --- strategies and freezing ---------------------------------------------------------------

ADAPTER_NAMES = list(adapter_shapes(64, 2, AdapterConfig()))


def test_emb_only_wte_wpe():
    spec = StrategySpec(Strategy.EMB_ONLY, ("wte", "wpe"))
    assert trainable_set(spec, 0, ADAPTER_NAMES) == {"wte", "wpe"}
    assert spec.adapter_config is None and spec.n_phases == 1


def test_emb_and_adpt_wte():
    spec = StrategySpec(Strategy.EMB_AND_ADPT, "wte")
    assert trainable_set(spec, 0, ADAPTER_NAMES) == {"wte"} | set(ADAPTER_NAMES)


def test_emb_then_adpt_disjoint_phases():
    spec = StrategySpec(Strategy.EMB_THEN_ADPT, "wte,wpe")
    p0, p1 = trainable_set(spec, 0, ADAPTER_NAMES), trainable_set(spec, 1, ADAPTER_NAMES)
    assert p0 == {"wte", "wpe"} and p1 == set(ADAPTER_NAMES) and not p0 & p1
    assert spec.phase_steps(500) == (250, 250)
    assert spec.phase_steps(50_000) == (25_000, 25_000)


def test_invalid_phase():
    with pytest.raises(ContractError):
        trainable_set(StrategySpec(Strategy.EMB_ONLY), 1)


@pytest.mark.parametrize("emb", ["", "wpe", "wte,xyz"])
def test_bad_embedding_set(emb):
    with pytest.raises(ConfigurationError):
        StrategySpec(Strategy.EMB_ONLY, emb)


def test_ten_steps_freeze_everything_else(rng):
    params = build_model(DESK_CONFIG)
    bank = inject_adapters(params, AdapterConfig(), 0)
    spec = StrategySpec(Strategy.EMB_AND_ADPT, "wte")
    everything = {**params.tensors, **bank.tensors}
    names = trainable_set(spec, 0, bank.tensors)
    before = checksum(everything)
    for n, t in everything.items():
        t.requires_grad = n in names
    trainable = {n: everything[n] for n in names}
    state = OptimState(weight_decay=0.1)
    for _ in range(10):
        for t in trainable.values():
            t.grad = None
        backward(lm_loss(params, bank, rng.integers(512, size=(2, 16))))
        adamw_step(state, trainable, 1e-2)
    after = checksum(everything)
    changed = {n for n in everything if before[n] != after[n]}
    assert changed <= names
    assert "wte" in changed and "layer0.adpt.up" in changed


def test_bank_copy_independent():
    bank = new_bank(64, 2, AdapterConfig(), 0)
    c = bank.copy()
    c.tensors["inv.F.up"].data[:] = 1
    assert np.all(bank.tensors["inv.F.up"].data == 0)
    assert isinstance(c, AdapterBank)
