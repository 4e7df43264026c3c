"""Binary checkpoint format: named little-endian float32 tensor blobs.

Layout::

    b"DPCK" | u32 version | u64 header_len | header JSON | raw blobs

The header JSON is canonical (sorted keys, no whitespace) and tensors are
stored in name order, so save -> load -> save is byte-identical. Training
checkpoints hold *only* trainable tensors plus the classifier; frozen
backbone weights are excluded by construction and rebuilt from config.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"DPCK"
VERSION = 1

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "verify_names"]


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed or does not match the model."""


def _tensor_data(t):
    return t.data if hasattr(t, "data") else np.asarray(t, dtype=np.float32)


def save_checkpoint(path, tensors, config=None, step=0):
    """Write a named tensor map; ``tensors`` maps name -> Tensor or ndarray.

    The write is atomic (temp file + rename) so an interrupted save leaves
    any previous checkpoint intact.
    """
    names = sorted(tensors)
    entries = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(_tensor_data(tensors[name]), dtype="<f4")
        nbytes = arr.nbytes
        entries.append({
            "name": name,
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": nbytes,
        })
        blobs.append(arr.tobytes())
        offset += nbytes
    header = {
        "version": VERSION,
        "step": int(step),
        "config": config,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns ``(tensors, config, step)``.

    ``tensors`` maps name -> float32 ndarray.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        expect = int(np.prod(e["shape"])) if e["shape"] else 1
        if arr.size != expect:
            raise CheckpointError(
                f"{path}: tensor {e['name']} has {arr.size} values, "
                f"expected {expect} for shape {tuple(e['shape'])}"
            )
        tensors[e["name"]] = arr.reshape(e["shape"])
    return tensors, header.get("config"), header.get("step", 0)


def verify_names(loaded, expected_shapes):
    """Check a loaded tensor map against expected ``{name: shape}``.

    Raises :class:`CheckpointError` naming the first offending parameter.
    """
    for name in sorted(expected_shapes):
        if name not in loaded:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        got = tuple(loaded[name].shape)
        want = tuple(expected_shapes[name])
        if got != want:
            raise CheckpointError(
                f"parameter {name} has shape {got}, expected {want}"
            )
    for name in sorted(loaded):
        if name not in expected_shapes:
            raise CheckpointError(f"checkpoint has unexpected parameter {name}")
