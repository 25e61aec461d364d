"""Checkpoint container.

Layout::

    b"AMPP" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | f32 blob

The manifest carries the config echo, step, RNG state and a tensor index
(name, dtype, shape, offset, nbytes) into the little-endian f32 blob.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"AMPP"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic or unreadable manifest."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Tensor names or shapes disagree with the expected model."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config: dict = field(default_factory=dict)
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _tensors(ck: Checkpoint):
    for prefix, group in (("param", ck.params), ("adam_m", ck.opt_m), ("adam_v", ck.opt_v)):
        for name, arr in group.items():
            yield f"{prefix}/{name}", arr


def save_checkpoint(path, ck: Checkpoint) -> None:
    index, chunks, offset = [], [], 0
    for name, arr in _tensors(ck):
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "dtype": "f32", "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = {
        "step": int(ck.step),
        "config": ck.config,
        "rng_state": ck.rng_state,
        "extra": ck.extra,
        "tensors": index,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(mbytes)))
        fh.write(mbytes)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def read_manifest(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unknown format version {version}")
    end = _HEADER.size + mlen
    if len(data) < end:
        raise CheckpointTruncatedError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(data[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest ({exc})") from exc
    return manifest, data[end:]


def load_checkpoint(path, expected_shapes: dict[str, tuple] | None = None, dtype=np.float32) -> Checkpoint:
    """Load and validate; ``expected_shapes`` maps parameter names to shapes."""
    manifest, blob = read_manifest(path)
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for t in manifest["tensors"]:
        if t["dtype"] != "f32":
            raise CheckpointFormatError(f"{path}: unsupported dtype {t['dtype']} for {t['name']}")
        start, n = t["offset"], t["nbytes"]
        if start + n > len(blob):
            raise CheckpointTruncatedError(f"{path}: tensor {t['name']} runs past end of file")
        shape = tuple(t["shape"])
        if n != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointFormatError(f"{path}: byte length of {t['name']} disagrees with shape")
        prefix, name = t["name"].split("/", 1)
        arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=start).reshape(shape)
        groups[prefix][name] = arr.astype(dtype)
    if expected_shapes is not None:
        got = groups["param"]
        missing = sorted(set(expected_shapes) - set(got))
        unexpected = sorted(set(got) - set(expected_shapes))
        if missing or unexpected:
            raise CheckpointMismatchError(
                f"{path}: tensor names differ (missing {missing[:3]}, unexpected {unexpected[:3]})"
            )
        for name, shape in expected_shapes.items():
            for g in groups.values():
                if name in g and g[name].shape != tuple(shape):
                    raise CheckpointMismatchError(
                        f"{path}: shape mismatch for {name}: file {g[name].shape}, model {tuple(shape)}"
                    )
    return Checkpoint(groups["param"], groups["adam_m"], groups["adam_v"], manifest["step"],
                      manifest["config"], manifest["rng_state"], manifest.get("extra", {}))
