"""VCKP checkpoint files.

Layout (little-endian)::

    b"VCKP" | version u16 | meta_len u32 | meta (UTF-8 JSON)
    | n_entries u32 | entries...

    entry := name_len u16 | name (UTF-8) | ndim u8 | dims u32 * ndim
             | float32 payload, C order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_raw)), meta_raw,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Return ``(tensors, meta)``; tensors is an ordered name -> float32 array dict."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if raw[:4] != MAGIC:
            raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
        version, meta_len = struct.unpack_from("<HI", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 10
        meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nl].decode("utf-8")
            pos += nl
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            end = pos + 4 * count
            if end > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos = end
        if pos != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return tensors, meta


def load_into(module, tensors: dict, prefix: str = "", strict: bool = True) -> None:
    """Copy ``prefix``-scoped entries into ``module``, validating names and shapes."""
    sub = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    try:
        module.load_state_dict(sub, strict=strict)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
