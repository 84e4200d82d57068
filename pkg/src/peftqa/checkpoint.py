"""Binary checkpoints for full models and adapter-only deltas.

Layout (little-endian)::

    b"PFTF" | u16 version | u32 n | n bytes UTF-8 JSON header | u32 record count | records

Each record is ``u8 kind | u16 name length | name | payload``. Dense payloads
are ``u8 dtype tag | u8 ndim | u32 dims... | raw values``; quantized payloads
are ``u32 length | QuantizedTensor.to_bytes()``.

An adapter-only checkpoint stores just the trainable tensors. The frozen base
is rebuilt from the recorded config and seed, which reproduces it exactly
because base weights are never updated.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import EncoderModel, ModelConfig, attach_adapters, build_model
from .quant import QuantizedTensor
from .text import Vocab

__all__ = ["MAGIC", "VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint", "read_header"]

MAGIC = b"PFTF"
VERSION = 1
_DENSE, _QUANT = 0, 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


def _dense_record(name: str, arr: np.ndarray) -> bytes:
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    nb = name.encode("utf-8")
    head = struct.pack("<BH", _DENSE, len(nb)) + nb + struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def _quant_record(name: str, q: QuantizedTensor) -> bytes:
    nb = name.encode("utf-8")
    blob = q.to_bytes()
    return struct.pack("<BH", _QUANT, len(nb)) + nb + struct.pack("<I", len(blob)) + blob


def save_checkpoint(model: EncoderModel, path: str | Path, vocab: Vocab | None = None,
                    adapter_only: bool = False, extra: dict | None = None) -> None:
    if adapter_only and model.method in (None, "FullFT"):
        raise CheckpointError("adapter-only checkpoints need a model with adapters attached")
    header = {
        "kind": "adapter" if adapter_only else "full",
        "model": model.config.to_dict(),
        "seed": model.seed,
        "method": model.method,
        "adapter": model.adapter_config,
        "vocab": vocab.to_list() if vocab is not None else None,
        "extra": extra or {},
    }
    records = []
    for name, p in model.named_parameters():
        if adapter_only and not p.requires_grad:
            continue
        records.append(_dense_record(name, p.data))
    if not adapter_only:
        records += [_quant_record(name, q) for name, q in model.named_quantized()]
    hb = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    blob = MAGIC + struct.pack("<HI", VERSION, len(hb)) + hb + struct.pack("<I", len(records)) + b"".join(records)
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, buf: bytes, where: str):
        self.buf, self.pos, self.where = buf, 0, where

    def take(self, fmt: str) -> tuple:
        try:
            out = struct.unpack_from(fmt, self.buf, self.pos)
        except struct.error:
            raise CheckpointError(f"{self.where}: truncated at byte {self.pos}") from None
        self.pos += struct.calcsize(fmt)
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.where}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def _parse(buf: bytes, where: str) -> tuple[dict, dict[str, np.ndarray], dict[str, QuantizedTensor]]:
    r = _Reader(buf, where)
    if r.raw(4) != MAGIC:
        raise CheckpointError(f"{where}: not a checkpoint (bad magic)")
    version, hlen = r.take("<HI")
    if version != VERSION:
        raise CheckpointError(f"{where}: unsupported version {version}")
    try:
        header = json.loads(r.raw(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{where}: corrupt header ({exc})") from None
    (count,) = r.take("<I")
    dense: dict[str, np.ndarray] = {}
    quant: dict[str, QuantizedTensor] = {}
    for _ in range(count):
        kind, nlen = r.take("<BH")
        name = r.raw(nlen).decode("utf-8")
        if kind == _DENSE:
            tag, ndim = r.take("<BB")
            if tag not in _DTYPES:
                raise CheckpointError(f"{where}: {name}: unknown dtype tag {tag}")
            shape = r.take(f"<{ndim}I")
            dt = _DTYPES[tag]
            n = int(np.prod(shape)) * dt.itemsize
            dense[name] = np.frombuffer(r.raw(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        elif kind == _QUANT:
            (n,) = r.take("<I")
            quant[name] = QuantizedTensor.from_bytes(r.raw(n))
        else:
            raise CheckpointError(f"{where}: {name}: unknown record kind {kind}")
    if r.pos != len(buf):
        raise CheckpointError(f"{where}: {len(buf) - r.pos} trailing bytes")
    return header, dense, quant


def read_header(path: str | Path) -> dict:
    header, _, _ = _parse(Path(path).read_bytes(), str(path))
    return header


def _set_quantized(model: EncoderModel, name: str, q: QuantizedTensor) -> None:
    *parents, attr = name.split(".")
    obj = model
    for part in parents:
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    if not isinstance(getattr(obj, attr, None), QuantizedTensor):
        raise CheckpointError(f"{name}: model has no quantized tensor there")
    setattr(obj, attr, q)


def load_checkpoint(path: str | Path) -> tuple[EncoderModel, Vocab | None, dict]:
    """Rebuild the model (and vocabulary, if stored); returns (model, vocab, header)."""
    header, dense, quant = _parse(Path(path).read_bytes(), str(path))
    cfg = ModelConfig(**header["model"])
    model = build_model(cfg, seed=header["seed"])
    if header["method"] is not None:
        ad_cfg = header.get("adapter") or {}
        attach_adapters(model, header["method"], **ad_cfg)
    params = dict(model.named_parameters())
    unknown = sorted(set(dense) - set(params))
    if unknown:
        raise CheckpointError(f"{path}: tensors not in model: {', '.join(unknown[:10])}")
    if header["kind"] == "full":
        missing = sorted(set(params) - set(dense))
        if missing:
            raise CheckpointError(f"{path}: missing tensors: {', '.join(missing[:10])}")
    for name, arr in dense.items():
        p = params[name]
        if p.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} does not match model {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    for name, q in quant.items():
        _set_quantized(model, name, q)
    vocab = Vocab.from_list(header["vocab"]) if header.get("vocab") else None
    model.eval()
    return model, vocab, header
