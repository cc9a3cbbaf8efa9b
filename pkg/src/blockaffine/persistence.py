"""Checkpoint and loss-log files.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"BAFCKPT1"
    8 bytes   uint64 manifest length L
    L bytes   manifest, UTF-8 JSON
    ...       blob: raw tensor buffers, little-endian, C order

The manifest is ``{"tensors": [{name, shape, dtype, byte_offset,
byte_length}, ...], "metadata": {...}}`` with offsets relative to the blob
start. Keys are sorted so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .tensor import DTYPES, Tensor

MAGIC = b"BAFCKPT1"
_HEADER = struct.Struct("<8sQ")


class CheckpointError(Exception):
    pass


class MalformedManifestError(CheckpointError):
    pass


class OffsetOverlapError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


def _atomic_write(path: Path, payload: bytes | str, mode: str = "wb") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors: Mapping[str, Tensor | np.ndarray], metadata: Mapping | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        dtype = Tensor._wrap(arr).dtype if arr.dtype in DTYPES.values() else None
        if dtype is None:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "byte_offset": offset, "byte_length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "metadata": dict(metadata or {})},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    _atomic_write(Path(path), _HEADER.pack(MAGIC, len(manifest)) + manifest + b"".join(chunks))


def _parse_manifest(raw: bytes) -> tuple[list[dict], dict]:
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), list):
        raise MalformedManifestError("manifest must be an object with a 'tensors' list")
    metadata = manifest.get("metadata", {})
    if not isinstance(metadata, dict):
        raise MalformedManifestError("manifest 'metadata' must be an object")
    for e in manifest["tensors"]:
        try:
            ok = (isinstance(e["name"], str) and e["dtype"] in DTYPES
                  and all(isinstance(d, int) and d >= 0 for d in e["shape"])
                  and isinstance(e["byte_offset"], int) and e["byte_offset"] >= 0
                  and isinstance(e["byte_length"], int))
        except (KeyError, TypeError):
            ok = False
        if not ok:
            raise MalformedManifestError(f"bad tensor entry {e!r}")
        expect = int(np.prod(e["shape"], dtype=np.int64)) * DTYPES[e["dtype"]].itemsize
        if e["byte_length"] != expect:
            raise MalformedManifestError(f"tensor {e['name']!r}: byte_length {e['byte_length']} != {expect}")
    return manifest["tensors"], metadata


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise MalformedManifestError("file too short for a checkpoint header")
    magic, mlen = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MalformedManifestError(f"bad magic {magic!r}")
    start = _HEADER.size + mlen
    if len(buf) < start:
        raise MalformedManifestError("manifest extends past end of file")
    entries, metadata = _parse_manifest(buf[_HEADER.size:start])
    blob = memoryview(buf)[start:]

    spans = sorted((e["byte_offset"], e["byte_offset"] + e["byte_length"], e["name"]) for e in entries)
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise OffsetOverlapError(f"tensors {an!r} and {bn!r} overlap in the blob")

    tensors: dict[str, Tensor] = {}
    for e in entries:
        lo, hi = e["byte_offset"], e["byte_offset"] + e["byte_length"]
        if hi > len(blob):
            raise TruncatedBlobError(f"tensor {e['name']!r} needs bytes [{lo}, {hi}) but blob has {len(blob)}")
        if e["name"] in tensors:
            raise MalformedManifestError(f"duplicate tensor name {e['name']!r}")
        dt = DTYPES[e["dtype"]].newbyteorder("<")
        arr = np.frombuffer(blob[lo:hi], dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
        tensors[e["name"]] = Tensor(arr)
    return tensors, metadata


# --------------------------------------------------------------------------
# model export

def model_tensors(model) -> dict[str, Tensor]:
    """Named tensors of a (possibly adapted) model: ``layers.{i}.weight`` and ``layers.{i}.adapter.{name}``."""
    out = {}
    for i, lay in enumerate(model.layers):
        out[f"layers.{i}.weight"] = lay.weight
        if model.adapters is not None:
            for name, t in model.adapters[i].tensors.items():
                out[f"layers.{i}.adapter.{name}"] = t
    return out


def export_merged(path, model, states=None, metadata: Mapping | None = None) -> None:
    """Write ``W + dW`` for every layer as a plain checkpoint."""
    if states is not None:
        model = type(model)(model.layers, model.config, tuple(states))
    merged = model.merged()
    meta = {"kind": "merged", "nonlinearities": [lay.nonlinearity for lay in merged.layers]}
    meta.update(metadata or {})
    save_checkpoint(path, {f"layers.{i}.weight": lay.weight for i, lay in enumerate(merged.layers)}, meta)


def load_model(path):
    """Rebuild a model (adapted or merged) from a checkpoint written here."""
    from .adapters import AdapterConfig, AdapterState
    from .model import FrozenLinearModel, Layer

    tensors, meta = load_checkpoint(path)
    nls = meta.get("nonlinearities")
    count = sum(1 for k in tensors if k.endswith(".weight"))
    if nls is None or len(nls) != count:
        raise MalformedManifestError("checkpoint metadata lacks per-layer nonlinearities")
    layers = tuple(Layer(tensors[f"layers.{i}.weight"], nls[i]) for i in range(count))
    if "adapter" not in meta:
        return FrozenLinearModel(layers), meta
    config = AdapterConfig.from_dict(meta["adapter"])
    states = []
    for i in range(count):
        prefix = f"layers.{i}.adapter."
        states.append(AdapterState({k[len(prefix):]: Tensor(v.data, requires_grad=True)
                                    for k, v in tensors.items() if k.startswith(prefix)}))
    return FrozenLinearModel(layers, config, tuple(states)), meta


# --------------------------------------------------------------------------
# loss logs

def write_loss_log(path, log: Iterable[tuple[int, float]]) -> None:
    lines = ["step,loss"]
    last = None
    for step, loss in log:
        if last is not None and step <= last:
            raise ValueError(f"steps must increase strictly ({last} then {step})")
        last = step
        lines.append(f"{int(step)},{float(loss):.9g}")
    _atomic_write(Path(path), "\n".join(lines) + "\n", mode="w")


def read_loss_log(path) -> list[tuple[int, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["step", "loss"]:
            raise ValueError(f"{path}: expected header 'step,loss', got {reader.fieldnames}")
        return [(int(row["step"]), float(row["loss"])) for row in reader]
