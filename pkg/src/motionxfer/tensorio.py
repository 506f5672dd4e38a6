"""Named-tensor bundles on disk.

Two container flavours share one layout:

    magic (4 bytes) | u32 version | u32 header length | JSON header | payload

``PGT1`` bundles carry a JSON list directory of ``{name, dtype, shape, offset}``
records. ``PGTC`` checkpoints carry a JSON object with the same directory under
``"tensors"`` plus free-form metadata (config echo, RNG state, counters).
Payloads are raw little-endian float32, channel-major, offsets relative to the
start of the payload block.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

BUNDLE_MAGIC = b"PGT1"
CHECKPOINT_MAGIC = b"PGTC"
FORMAT_VERSION = 1

_PREFIX = struct.Struct("<4sII")


class CorruptFileError(ValueError):
    """Raised when a bundle or checkpoint cannot be decoded."""


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack(tensors: Mapping[str, Any]) -> tuple[list[dict], bytes]:
    directory = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value, dtype="<f4", order="C")
        raw = arr.tobytes()
        directory.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    return directory, b"".join(chunks)


def _unpack(directory: list[dict], payload: bytes, path: Any) -> dict[str, np.ndarray]:
    out = {}
    for rec in directory:
        if rec.get("dtype") != "f32":
            raise CorruptFileError(f"{path}: unsupported dtype {rec.get('dtype')!r} for {rec.get('name')!r}")
        shape = tuple(int(s) for s in rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(rec["offset"])
        stop = start + 4 * count
        if start < 0 or stop > len(payload):
            raise CorruptFileError(f"{path}: tensor {rec['name']!r} runs past end of file (truncated?)")
        out[rec["name"]] = np.frombuffer(payload[start:stop], dtype="<f4").reshape(shape).copy()
    return out


def _encode(magic: bytes, header: Any, payload: bytes) -> bytes:
    hdr = _canonical_json(header)
    return _PREFIX.pack(magic, FORMAT_VERSION, len(hdr)) + hdr + payload


def _decode(blob: bytes, magic: bytes, path: Any) -> tuple[Any, bytes]:
    if len(blob) < _PREFIX.size:
        raise CorruptFileError(f"{path}: file too short to hold a header")
    got_magic, version, hlen = _PREFIX.unpack_from(blob)
    if got_magic != magic:
        raise CorruptFileError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptFileError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    if start + hlen > len(blob):
        raise CorruptFileError(f"{path}: header runs past end of file (truncated?)")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable JSON header ({exc})") from exc
    return header, blob[start + hlen:]


def encode_bundle(tensors: Mapping[str, Any]) -> bytes:
    directory, payload = _pack(tensors)
    return _encode(BUNDLE_MAGIC, directory, payload)


def decode_bundle(blob: bytes, path: Any = "<bytes>") -> dict[str, np.ndarray]:
    directory, payload = _decode(blob, BUNDLE_MAGIC, path)
    if not isinstance(directory, list):
        raise CorruptFileError(f"{path}: bundle directory must be a list")
    return _unpack(directory, payload, path)


def save_bundle(path: str | Path, tensors: Mapping[str, Any]) -> None:
    Path(path).write_bytes(encode_bundle(tensors))


def load_bundle(path: str | Path) -> dict[str, np.ndarray]:
    return decode_bundle(Path(path).read_bytes(), path)


def encode_checkpoint(tensors: Mapping[str, Any], meta: Mapping[str, Any]) -> bytes:
    directory, payload = _pack(tensors)
    header = dict(meta)
    header["tensors"] = directory
    return _encode(CHECKPOINT_MAGIC, header, payload)


def decode_checkpoint(blob: bytes, path: Any = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    header, payload = _decode(blob, CHECKPOINT_MAGIC, path)
    if not isinstance(header, dict) or "tensors" not in header:
        raise CorruptFileError(f"{path}: checkpoint header lacks a tensor directory")
    tensors = _unpack(header.pop("tensors"), payload, path)
    return tensors, header
