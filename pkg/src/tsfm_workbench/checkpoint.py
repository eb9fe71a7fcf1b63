"""Binary checkpoint format.

Layout: 4-byte magic, uint32 format version, uint32 header length, UTF-8 JSON
header, then one contiguous little-endian float32 payload.  The header lists
(name, shape, offset) per tensor in name order plus a provenance block
(model kind, config, config hash, seed, step).  Offsets are validated to be
ascending, non-overlapping, and in-bounds, and the payload length must match
exactly, so truncation is detected before any weight is read.  Save -> load ->
save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError, ShapeError

MAGIC = b"TSWB"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict          # name -> float32 ndarray
    provenance: dict

    @property
    def n_tensors(self):
        return len(self.tensors)

    @property
    def n_params(self):
        return int(sum(v.size for v in self.tensors.values()))


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, tensors: dict, provenance: dict):
    """Write parameters (Tensors or arrays) plus provenance to ``path``."""
    arrays = {}
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arrays[name] = np.ascontiguousarray(arr, dtype="<f4")
    entries = []
    offset = 0
    for name in sorted(arrays):
        entries.append({"name": name, "shape": list(arrays[name].shape), "offset": offset})
        offset += arrays[name].nbytes
    header = json.dumps({"provenance": provenance, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for name in sorted(arrays):
            fh.write(arrays[name].tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(blob) < 12 + header_len:
        raise CheckpointError(f"{path} is truncated inside the header")
    header = json.loads(blob[12:12 + header_len].decode())
    payload = blob[12 + header_len:]
    entries = header["tensors"]
    expected = 0
    for entry in entries:
        size = int(np.prod(entry["shape"])) * 4 if entry["shape"] else 4
        if entry["offset"] != expected:
            raise CheckpointError(f"tensor {entry['name']!r} offset {entry['offset']} "
                                  f"overlaps or skips bytes (expected {expected})")
        expected += size
    if len(payload) != expected:
        raise CheckpointError(f"{path} payload holds {len(payload)} bytes, "
                              f"header requires {expected}")
    tensors = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        tensors[entry["name"]] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=start).reshape(shape).copy()
    return Checkpoint(tensors, header["provenance"])


def load_into_params(params: dict, ckpt: Checkpoint, dtype=None) -> dict:
    """Replace every parameter with its checkpoint tensor of the same name.

    Raises ShapeError on the first (name-ordered) missing or mis-shaped
    tensor, so loading into a mismatched configuration fails loudly.
    """
    out = {}
    for name in sorted(params):
        if name not in ckpt.tensors:
            raise ShapeError(f"checkpoint is missing tensor {name!r}")
        stored = ckpt.tensors[name]
        if stored.shape != params[name].shape:
            raise ShapeError(f"tensor {name!r}: checkpoint shape {stored.shape} "
                             f"does not match model shape {params[name].shape}")
        out[name] = Tensor(stored, requires_grad=True,
                           dtype=dtype or params[name].dtype)
    return out
