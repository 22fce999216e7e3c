import json

import numpy as np
import pytest

from langadapt.adapters import AdapterConfig, inject_adapters
from langadapt.checkpoint import MANIFEST, WEIGHTS, load_checkpoint, save_checkpoint
from langadapt.errors import FormatError
from langadapt.model import checksum
from langadapt.tokenizer import PAD, train_bpe


@pytest.fixture
def saved(desk_params, tmp_path):
    bank = inject_adapters(desk_params, AdapterConfig(16), seed=3, language_tag="b")
    bank.tensors["layer1.adpt.up"].data[:] = 0.25
    vocab = train_bpe([b"abcabc abc"], 260, [PAD])
    path = save_checkpoint(desk_params, bank, 500, tmp_path / "ck", vocab, {"note": "x"})
    return desk_params, bank, vocab, path


def test_bitwise_roundtrip(saved):
    params, bank, vocab, path = saved
    ck = load_checkpoint(path)
    p2, b2, step = ck
    assert step == 500 and ck.meta == {"note": "x"} and ck.vocab == vocab
    assert p2.config == params.config
    for name, t in params.tensors.items():
        assert p2.tensors[name].data.tobytes() == t.data.tobytes()
    assert checksum(b2.tensors) == checksum(bank.tensors)
    assert b2.language_tag == "b" and b2.config == bank.config


def test_without_adapters(desk_params, tmp_path):
    p, b, s = load_checkpoint(save_checkpoint(desk_params, None, 0, tmp_path / "c"))
    assert b is None and s == 0
    assert checksum(p.tensors) == checksum(desk_params.tensors)


def test_steps_tagged_independently(desk_params, tmp_path):
    for step in (100, 500, 1000):
        save_checkpoint(desk_params, None, step, tmp_path / f"s{step}")
    assert [load_checkpoint(tmp_path / f"s{s}").step for s in (100, 500, 1000)] == [100, 500, 1000]


def test_manifest_layout(saved):
    _, _, _, path = saved
    m = json.loads((path / MANIFEST).read_text())
    assert m["pretrain_step"] == 500
    offsets = [e["offset"] for e in m["tensors"]]
    assert offsets == sorted(offsets) and offsets[0] == 0
    assert all(e["dtype"] == "f32" for e in m["tensors"])
    names = [e["name"] for e in m["tensors"]]
    assert "inv.F.down" in names and "layer1.adpt.up" in names
    size = (path / WEIGHTS).stat().st_size
    assert size == sum(e["nbytes"] for e in m["tensors"])


def test_weights_little_endian_f32(saved):
    params, _, _, path = saved
    m = json.loads((path / MANIFEST).read_text())
    e = next(e for e in m["tensors"] if e["name"] == "wpe")
    raw = (path / WEIGHTS).read_bytes()[e["offset"] : e["offset"] + e["nbytes"]]
    assert np.array_equal(np.frombuffer(raw, "<f4").reshape(e["shape"]), params.wpe.data)


@pytest.mark.parametrize("pos", [0, 1234, -1])
def test_single_byte_corruption(saved, pos):
    path = saved[3] / WEIGHTS
    blob = bytearray(path.read_bytes())
    blob[pos] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum"):
        load_checkpoint(saved[3])


def test_truncated_blob(saved):
    path = saved[3] / WEIGHTS
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(saved[3])


def test_trailing_bytes(saved):
    path = saved[3] / WEIGHTS
    path.write_bytes(path.read_bytes() + b"\0" * 4)
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(saved[3])


def _edit_manifest(path, fn):
    m = json.loads((path / MANIFEST).read_text())
    fn(m)
    (path / MANIFEST).write_text(json.dumps(m))


def test_unknown_tensor_name(saved):
    _edit_manifest(saved[3], lambda m: m["tensors"][3].update(name="mystery"))
    with pytest.raises(FormatError, match="mystery"):
        load_checkpoint(saved[3])


def test_missing_tensor(saved):
    _edit_manifest(saved[3], lambda m: m["tensors"].pop())
    with pytest.raises(FormatError):
        load_checkpoint(saved[3])


def test_shape_mismatch(saved):
    _edit_manifest(saved[3], lambda m: m["tensors"][0].update(shape=[1, 1]))
    with pytest.raises(FormatError, match="wte"):
        load_checkpoint(saved[3])


def test_other_format_version_rejected(saved):
    _edit_manifest(saved[3], lambda m: m.update(format="langadapt-checkpoint-v0"))
    with pytest.raises(FormatError, match="format"):
        load_checkpoint(saved[3])


def test_bad_config_rejected(saved):
    _edit_manifest(saved[3], lambda m: m["config"].update(bogus=1))
    with pytest.raises(FormatError):
        load_checkpoint(saved[3])


def test_missing_directory(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "nothing")


def test_overwrite_is_atomic_replace(desk_params, tmp_path):
    path = tmp_path / "ck"
    save_checkpoint(desk_params, None, 1, path)
    save_checkpoint(desk_params, None, 2, path)
    assert load_checkpoint(path).step == 2
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ck"]
