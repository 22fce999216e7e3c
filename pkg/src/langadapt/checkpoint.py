"""Checkpoint directories: ``manifest.json`` + ``weights.bin`` (+ ``vocab.bpe``).

``weights.bin`` is every tensor as little-endian float32, row-major,
concatenated in manifest order. Each manifest entry carries the byte offset
and a sha256 of its bytes, so truncation and corruption are caught per tensor.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adapters import AdapterBank, AdapterConfig, adapter_shapes
from .errors import ConfigurationError, FormatError
from .model import ModelConfig, ModelParams, tensor_shapes
from .numcore import Tensor
from .tokenizer import BpeVocab

FORMAT = "langadapt-checkpoint-v1"
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
VOCAB = "vocab.bpe"


@dataclass
class Checkpoint:
    params: ModelParams
    adapters: AdapterBank | None
    step: int
    vocab: BpeVocab | None = None
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``params, adapters, step = load_checkpoint(path)``
        return iter((self.params, self.adapters, self.step))


def save_checkpoint(
    params: ModelParams,
    adapters: AdapterBank | None,
    step: int,
    path,
    vocab: BpeVocab | None = None,
    meta: dict | None = None,
) -> Path:
    path = Path(path)
    named = list(params.tensors.items())
    if adapters is not None:
        named += list(adapters.tensors.items())
    table = []
    offset = 0
    blobs = []
    for name, t in named:
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        table.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "config": params.config.to_dict(),
        "pretrain_step": int(step),
        "adapter_config": asdict(adapters.config) if adapters is not None else None,
        "language_tag": adapters.language_tag if adapters is not None else None,
        "meta": meta or {},
        "tensors": table,
    }

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        with open(tmp / WEIGHTS, "wb") as fh:
            for raw in blobs:
                fh.write(raw)
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
        if vocab is not None:
            vocab.save(tmp / VOCAB)
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}/{MANIFEST}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        config = ModelConfig(**manifest["config"])
        adapter_config = manifest.get("adapter_config")
        adapter_config = AdapterConfig(**adapter_config) if adapter_config else None
    except (KeyError, TypeError, ConfigurationError) as exc:
        raise FormatError(f"{path}: bad config in manifest: {exc}") from None

    expected = dict(tensor_shapes(config))
    if adapter_config is not None:
        expected.update(adapter_shapes(config.d_model, config.n_layers, adapter_config))

    blob = (path / WEIGHTS).read_bytes() if (path / WEIGHTS).exists() else None
    if blob is None:
        raise FormatError(f"{path}: no {WEIGHTS}")
    loaded: dict[str, Tensor] = {}
    end = 0
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in expected:
            raise FormatError(f"unknown tensor name {name!r}")
        if entry.get("dtype") != "f32":
            raise FormatError(f"tensor {name!r}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        if shape != tuple(expected[name]):
            raise FormatError(f"tensor {name!r}: shape {shape} does not match config {expected[name]}")
        off, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"tensor {name!r}: byte count {nbytes} does not match shape")
        if off + nbytes > len(blob):
            raise FormatError(f"tensor {name!r}: blob truncated")
        raw = blob[off : off + nbytes]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise FormatError(f"tensor {name!r}: checksum mismatch")
        loaded[name] = Tensor(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape))
        end = max(end, off + nbytes)
    missing = [n for n in expected if n not in loaded]
    if missing:
        raise FormatError(f"tensor {missing[0]!r} missing from manifest")
    if end != len(blob):
        raise FormatError(f"{path}/{WEIGHTS}: {len(blob) - end} trailing bytes")

    backbone = {n: loaded[n] for n in tensor_shapes(config)}
    params = ModelParams(config, backbone)
    adapters = None
    if adapter_config is not None:
        bank_tensors = {n: loaded[n] for n in expected if n not in backbone}
        adapters = AdapterBank(
            adapter_config, bank_tensors, config.d_model, config.n_layers, manifest.get("language_tag") or ""
        )
        params.adapter_bank = adapters
    vocab = BpeVocab.load(path / VOCAB) if (path / VOCAB).exists() else None
    return Checkpoint(params, adapters, int(manifest["pretrain_step"]), vocab, manifest.get("meta", {}))
