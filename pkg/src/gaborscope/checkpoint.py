"""Named-tensor checkpoint files.

Layout (little-endian)::

    magic      4s  b"GSCK"
    version    u4
    meta_len   u4
    meta       utf-8 JSON (kind, first_layer, param_count, free-form extras)
    n_tensors  u4
    per tensor:
      name_len u2, name utf-8, ndim u1, dims u4[ndim], payload f4[prod(dims)]

Gabor banks are stored as their ``{eeg,eog}_gabor.{u,sigma,f}`` triples and
batch-norm running statistics as ``bn{i}.running_{mean,var}``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import MultiEpochNet, SingleEpochNet

MAGIC = b"GSCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensors(model) -> dict[str, np.ndarray]:
    out = {name: t.data for name, t in model.parameters().items()}
    out.update(model.buffers())
    return out


def save(path, model, extra: dict | None = None) -> None:
    kind = "single" if isinstance(model, SingleEpochNet) else "multi"
    meta = {"kind": kind, "param_count": model.param_count()}
    if kind == "single":
        meta["first_layer"] = model.first_layer_kind
        meta["dropout"] = model.dropout
    meta.update(extra or {})
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks += [struct.pack("<I", len(meta_bytes)), meta_bytes]
    tensors = _tensors(model)
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode()
        chunks.append(struct.pack("<HB", len(nb), arr.ndim) + nb)
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (meta_len,) = struct.unpack_from("<I", raw, 8)
        off = 12
        meta = json.loads(raw[off:off + meta_len])
        off += meta_len
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = {}
        for _ in range(n):
            name_len, ndim = struct.unpack_from("<HB", raw, off)
            off += 3
            name = raw[off:off + name_len].decode()
            off += name_len
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(raw, "<f4", count, off).reshape(shape).copy()
            off += 4 * count
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return meta, tensors


def load(path, dtype=None):
    """Rebuild a model from ``path``; returns ``(model, meta)``."""
    meta, tensors = read(path)
    if meta["kind"] == "single":
        model = SingleEpochNet(dtype=dtype or np.float32, first_layer=meta["first_layer"],
                               dropout=meta.get("dropout", 0.5))
        expected = SingleEpochNet.expected_param_count(meta["first_layer"])
    elif meta["kind"] == "multi":
        model = MultiEpochNet(dtype=dtype or np.float64)
        expected = model.param_count()
    else:
        raise CheckpointError(f"{path}: unknown model kind {meta['kind']!r}")
    if meta["param_count"] != expected:
        raise CheckpointError(f"{path}: parameter count {meta['param_count']} != architecture's {expected}")
    params = model.parameters()
    for name, t in params.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {t.shape}")
        t.data = tensors[name].astype(model.dtype)
    model.load_buffers({k: v for k, v in tensors.items() if k not in params})
    return model, meta
