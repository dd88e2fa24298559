"""Binary tensor files: little-endian float32 payload preceded by a JSON
header (tensor names, shapes, byte offsets) with a u64 length prefix."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via temp file + rename so readers never see partial output."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def serialize_tensors(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = {}
    payload = bytearray()
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "offset": len(payload)}
        payload += arr.tobytes()
    header = json.dumps({"meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + bytes(payload)


def save_tensors(path: str, tensors: dict[str, np.ndarray],
                 meta: dict | None = None) -> None:
    atomic_write_bytes(path, serialize_tensors(tensors, meta))


def deserialize_tensors(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 8:
        raise CheckpointError("truncated tensor file: missing header length")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if len(blob) < 8 + hlen:
        raise CheckpointError("truncated tensor file: header cut short")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
        entries = header["tensors"]
        meta = header.get("meta", {})
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"bad tensor file header: {exc}") from exc
    body = blob[8 + hlen:]
    tensors = {}
    for name, ent in entries.items():
        shape = tuple(int(s) for s in ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(ent["offset"])
        end = start + 4 * count
        if end > len(body):
            raise CheckpointError(f"truncated tensor file: {name} payload missing")
        tensors[name] = np.frombuffer(body[start:end], dtype="<f4").reshape(shape).copy()
    return tensors, meta


def load_tensors(path: str) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return deserialize_tensors(blob)


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def bytes_sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()
