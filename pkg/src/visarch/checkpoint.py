"""Binary checkpoint format.

Layout, all integers little-endian:

    bytes 0-3   magic "VSFM"
    bytes 4-5   format version (u16)
    bytes 6-9   header length (u32)
    header      UTF-8 JSON: {"config": ..., "extra": ..., "tensors": [...]}
    payloads    one per directory entry, float32 little-endian, in order
    trailer     CRC32 (u32) over every preceding byte

Directory entries are {"path", "rank", "dims"} sorted by path; paths are
namespaced "param.", "buffer.", "optim.". Tensors are stored as float32, so
round trips are bit-exact for float32 models (the training dtype).
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from . import models
from .tensor import Tensor

MAGIC = b"VSFM"
VERSION = 1


class CheckpointError(Exception):
    """Base for unreadable checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def _collect(model: models.Model, extra_tensors: dict | None) -> dict:
    out = {}
    for path, t in model.params.items():
        out[f"param.{path}"] = t.data
    for path, arr in model.buffers.items():
        out[f"buffer.{path}"] = arr
    for path, arr in (extra_tensors or {}).items():
        if not path.startswith("optim."):
            raise ValueError(f"extra tensor path must start with 'optim.': '{path}'")
        out[path] = arr
    return out


def save_bytes(model: models.Model, extra: dict | None = None,
               extra_tensors: dict | None = None) -> bytes:
    tensors = _collect(model, extra_tensors)
    directory = []
    payloads = []
    for path in sorted(tensors):
        arr = np.ascontiguousarray(tensors[path], dtype="<f4")
        directory.append({"path": path, "rank": arr.ndim, "dims": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"config": models.config_to_dict(model.config),
         "extra": dict(extra or {}),
         "tensors": directory},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    body = b"".join([MAGIC, struct.pack("<HI", VERSION, len(header)), header,
                     *payloads])
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_save(model: models.Model, path, extra: dict | None = None,
                    extra_tensors: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(save_bytes(model, extra, extra_tensors))


def load_bytes(data: bytes) -> dict:
    """Parse and verify; returns {"config", "extra", "tensors"} with float32
    arrays keyed by namespaced path."""
    if len(data) < 4:
        raise ChecksumError("file truncated before the magic bytes")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 10:
        raise ChecksumError("file truncated inside the fixed prologue")
    version, header_len = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise VersionError(f"format version {version}, expected {VERSION}")
    if len(data) < 10 + header_len + 4:
        raise ChecksumError("file truncated inside the header")
    header = json.loads(data[10:10 + header_len].decode("utf-8"))
    offset = 10 + header_len
    sizes = [int(np.prod(e["dims"], dtype=np.int64)) * 4 for e in header["tensors"]]
    if len(data) != offset + sum(sizes) + 4:
        raise ChecksumError(f"payload length mismatch: file has {len(data)} bytes")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumError("CRC32 mismatch")
    tensors = {}
    for entry, size in zip(header["tensors"], sizes):
        arr = np.frombuffer(data[offset:offset + size], dtype="<f4")
        tensors[entry["path"]] = arr.reshape(entry["dims"]).copy()
        offset += size
    return {"config": models.config_from_dict(header["config"]),
            "extra": header["extra"], "tensors": tensors}


def checkpoint_load(path) -> dict:
    with open(path, "rb") as f:
        return load_bytes(f.read())


def model_from_checkpoint(loaded: dict) -> models.Model:
    """Rebuild a Model whose params/buffers are the stored bits."""
    config = loaded["config"]
    model = models.build(config, seed=int(loaded["extra"].get("seed", 0)))
    for path, t in model.params.items():
        arr = loaded["tensors"][f"param.{path}"]
        if tuple(arr.shape) != t.data.shape:
            raise CheckpointError(f"shape mismatch for param '{path}'")
        t.data = arr.astype(model.dtype)
    for path in model.buffers:
        model.buffers[path] = loaded["tensors"][f"buffer.{path}"].astype(model.dtype)
    return model


def optim_tensors(loaded: dict) -> dict:
    return {p: a for p, a in loaded["tensors"].items() if p.startswith("optim.")}
