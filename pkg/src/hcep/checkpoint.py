"""Checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic b"HCEPCKPT"
    bytes 8..11   uint32 format version (1)
    bytes 12..19  uint64 header length in bytes
    header        UTF-8 JSON: net config, hierarchy spec hash, and an
                  ordered entry list [{"name", "shape"}, ...]
    data          concatenated little-endian float32 arrays, entry order

Byte-for-byte reproducible for identical parameter values: the header is
serialized with sorted keys and entries are sorted by name.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import IoError

MAGIC = b"HCEPCKPT"
VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray], config: dict | None = None,
                    hierarchy_hash: str = ""):
    names = sorted(state)
    entries = []
    blobs = []
    for name in names:
        # asarray, not ascontiguousarray: the latter promotes 0-d scalars
        # to shape (1,) and would break exact round-trips
        arr = np.asarray(state[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"config": config or {}, "hierarchy_hash": hierarchy_hash, "entries": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise IoError(f"no checkpoint at {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise IoError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise IoError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 12)
    header = json.loads(raw[20 : 20 + header_len].decode("utf-8"))
    offset = 20 + header_len
    state = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[entry["name"]] = arr.copy()
        offset += count * 4
    if offset != len(raw):
        raise IoError(f"{path}: trailing bytes after parameter data")
    return state, header


def save_model(path, model, hierarchy=None):
    """Serialize a torch module's parameters and buffers."""
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    config = asdict(model.cfg) if hasattr(model, "cfg") else {}
    hh = hierarchy.spec_hash() if hierarchy is not None else ""
    save_checkpoint(path, state, config=config, hierarchy_hash=hh)


def load_model(path, model):
    """Load a checkpoint's parameters into an existing torch module."""
    import torch

    state, header = load_checkpoint(path)
    model.load_state_dict(
        {k: torch.as_tensor(v) for k, v in state.items()}, strict=True
    )
    return header
