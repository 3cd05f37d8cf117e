"""Named-tensor container: JSON manifest followed by a raw little-endian payload.

File layout::

    b"MTADAPT-TENSORS\\n"
    8-byte little-endian unsigned manifest length
    manifest (UTF-8 JSON)
    payload (tensors concatenated in manifest order)

Every manifest entry records dtype, shape, byte offset, byte length and the
SHA-256 of the tensor bytes. Floating tensors are stored as ``float32``;
integer tensors (masks, labels) as ``int32``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..exceptions import CorruptCheckpointError

MAGIC = b"MTADAPT-TENSORS\n"
_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}


def _as_storable(value):
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype.kind in "fc":
        name = "float32"
    elif arr.dtype.kind in "iub":
        name = "int32"
        if arr.size and (arr.min() < np.iinfo(np.int32).min or arr.max() > np.iinfo(np.int32).max):
            raise ValueError("integer tensor out of int32 range")
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return name, np.ascontiguousarray(arr, dtype=_DTYPES[name])


def tensor_digest(value) -> str:
    """SHA-256 hex digest of a tensor's stored (float32/int32) bytes plus its shape."""
    name, arr = _as_storable(value)
    h = hashlib.sha256()
    h.update(f"{name}:{arr.shape}".encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_tensors(path, tensors: dict, meta: dict | None = None):
    """Write ``tensors`` (name -> array/tensor) and free-form ``meta`` atomically."""
    entries = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        dtype, arr = _as_storable(value)
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": 1, "tensors": entries, "payload_bytes": offset, "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks))
    return manifest


def read_manifest(path):
    with open(path, "rb") as fh:
        manifest, _ = _read_header(fh, path)
    return manifest


def _read_header(fh, path):
    if fh.read(len(MAGIC)) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic header")
    raw_len = fh.read(8)
    if len(raw_len) != 8:
        raise CorruptCheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw_len)
    head = fh.read(n)
    if len(head) != n:
        raise CorruptCheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable manifest") from exc
    return manifest, len(MAGIC) + 8 + n


def load_tensors(path):
    """Return ``(tensors, meta)``; every tensor digest is verified."""
    path = Path(path)
    with open(path, "rb") as fh:
        manifest, _ = _read_header(fh, path)
        payload = fh.read()
    if len(payload) != manifest["payload_bytes"]:
        raise CorruptCheckpointError(
            f"{path}: payload has {len(payload)} bytes, manifest expects {manifest['payload_bytes']}"
        )
    tensors = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"] or hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CorruptCheckpointError(f"{path}: digest mismatch for tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return tensors, manifest.get("meta", {})
