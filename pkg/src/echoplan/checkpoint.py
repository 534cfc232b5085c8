"""Checkpoint files: a named-tensor table plus a JSON manifest.

``tensors.bin`` layout (little-endian): magic ``EPC1``, uint32 tensor count,
then per tensor: uint32 name length, utf-8 name, uint32 ndim, uint32 dims,
float32 payload.  ``manifest.json`` carries the config, its hash, the branch
order, loss history and RNG state.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"EPC1"


class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_tensors(tensors: dict, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = np.ascontiguousarray(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_tensors(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    (count,) = struct.unpack_from("<I", blob, 4)
    off = 8
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, off)
            name = blob[off + 4 : off + 4 + n].decode()
            off += 4 + n
            (ndim,) = struct.unpack_from("<I", blob, off)
            dims = struct.unpack_from(f"<{ndim}I", blob, off + 4)
            off += 4 + 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if off + size > len(blob):
                raise CheckpointError(f"tensor {name!r} payload truncated")
            out[name] = torch.from_numpy(np.frombuffer(blob, dtype="<f4", count=size // 4, offset=off).reshape(dims).copy())
            off += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint {path}") from exc
    return out


def save(directory, tensors: dict, manifest: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensors(tensors, directory / "tensors.bin")
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    for name in ("tensors.bin", "manifest.json"):
        if not (directory / name).is_file():
            raise CheckpointError(f"missing {name} in {directory}")
    return read_tensors(directory / "tensors.bin"), json.loads((directory / "manifest.json").read_text())
