"""Binary checkpoints.

Layout::

    8 bytes   magic b"CLPLCKPT"
    8 bytes   header length H, little-endian uint64
    H bytes   UTF-8 JSON header
    rest      payload: little-endian float64 buffers in manifest order

Header keys: ``version``, ``config_hash``, ``tensors`` (list of
``{name, shape, offset}`` with byte offsets into the payload),
``payload_bytes``, ``payload_sha256`` and free-form ``meta``. Saving writes a
temporary file and renames it into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CLPLCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None, config_hash: str = "") -> Path:
    path = Path(path)
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = {
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        "tensors": manifest,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen))


def load_checkpoint(path, verify: bool = False) -> tuple[dict[str, np.ndarray], dict]:
    """Return (tensors, header). ``verify`` also checks the payload hash."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    payload = raw[16 + hlen :]
    expected = 0
    for entry in header["tensors"]:
        if entry["offset"] != expected:
            raise CheckpointError("manifest offsets are not increasing and contiguous")
        expected += 8 * int(np.prod(entry["shape"], dtype=np.int64))
    if expected != header["payload_bytes"]:
        raise CheckpointError(f"manifest describes {expected} bytes but header says {header['payload_bytes']}")
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"payload length {len(payload)} does not match manifest total {header['payload_bytes']}")
    if verify and hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload hash mismatch")
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return tensors, header
