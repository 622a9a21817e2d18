"""Versioned binary checkpoints.

Layout: 8-byte magic, little-endian uint32 format version, uint64 header
length, a UTF-8 JSON header, then the parameter payload as little-endian
float64.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ESTLOCO\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    """Unreadable, truncated or mismatched checkpoint."""


@dataclass
class Checkpoint:
    header: dict
    params: np.ndarray

    @property
    def group(self) -> str:
        return self.header["group"]


def save_checkpoint(path, header: dict, params: np.ndarray) -> None:
    params = np.ascontiguousarray(params, dtype="<f8")
    header = dict(header, format_version=FORMAT_VERSION, n_params=int(params.size))
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint")
    magic, version, length = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    payload = data[start + length:]
    n = header.get("n_params")
    if n is None or len(payload) != 8 * n:
        raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, header promises {n} parameters")
    return Checkpoint(header, np.frombuffer(payload, dtype="<f8").astype(float))


def dump_checkpoint_csv(ckpt: Checkpoint, path, layout: dict | None = None) -> None:
    """One row per parameter: block name, index within block, value."""
    layout = layout or {"params": (0, ckpt.params.size)}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "index", "value"])
        for name, (a, b) in layout.items():
            for i, v in enumerate(ckpt.params[a:b]):
                writer.writerow([name, i, repr(float(v))])
