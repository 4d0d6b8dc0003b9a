"""Binary checkpoint format.

Layout: ``b"MCRASP01"``, an unsigned 64-bit little-endian header length, a
UTF-8 JSON header ``{"schema_version", "config", "tensors": [{name, dtype,
shape}, ...]}``, then each tensor's raw little-endian bytes in manifest order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelWeights, weights_from_named

MAGIC = b"MCRASP01"
SCHEMA_VERSION = 1
_DTYPES = {"f64": "<f8", "f32": "<f4"}


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        # mkstemp creates 0600; give the file the mode a plain open() would
        mask = os.umask(0)
        os.umask(mask)
        os.chmod(tmp, 0o666 & ~mask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_checkpoint(config: ModelConfig, weights: ModelWeights) -> bytes:
    manifest, payload = [], []
    for name, tensor in weights.named_tensors():
        code = "f64" if tensor.dtype == np.float64 else "f32"
        manifest.append({"name": name, "dtype": code, "shape": list(tensor.shape)})
        payload.append(np.ascontiguousarray(tensor, dtype=_DTYPES[code]).tobytes())
    header = json.dumps({"schema_version": SCHEMA_VERSION, "config": config.to_dict(),
                         "tensors": manifest}, sort_keys=True).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(header)), header, *payload])


def save_checkpoint(config: ModelConfig, weights: ModelWeights, path) -> None:
    atomic_write_bytes(path, dumps_checkpoint(config, weights))


def loads_checkpoint(blob: bytes) -> tuple[ModelConfig, ModelWeights]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic: not an MCRASP01 checkpoint")
    if len(blob) < 16:
        raise CheckpointError("truncated header")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported schema version {header.get('schema_version')}")
    config = ModelConfig.from_dict(header["config"])
    offset = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * dt.itemsize
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(
                f"shape mismatch: tensor {entry['name']} needs {nbytes} bytes, "
                f"payload has {len(chunk)}")
        # native-order, writable copy
        tensors[entry["name"]] = np.frombuffer(chunk, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"shape mismatch: {len(blob) - offset} trailing bytes")
    try:
        weights = weights_from_named(config, tensors)
    except ValueError as exc:
        raise CheckpointError(f"shape mismatch: {exc}") from exc
    return config, weights


def load_checkpoint(path) -> tuple[ModelConfig, ModelWeights]:
    return loads_checkpoint(Path(path).read_bytes())
