"""Checkpoint files: a versioned header and named little-endian float32 blobs.

Layout::

    b"ILCK"  u16 version  32-byte sha256 of the run config
    u32 meta_len  meta (UTF-8 JSON)
    u32 n_blobs
    repeated: u16 name_len  name  u8 ndim  u32[ndim] shape  f32le[prod(shape)]
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ILCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_hash: str
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}


def bundle(pg_state: dict, ee_state: dict) -> dict[str, np.ndarray]:
    out = {f"pg/{k}": v for k, v in pg_state.items()}
    out.update({f"ee/{k}": v for k, v in ee_state.items()})
    return out


def to_bytes(ck: Checkpoint) -> bytes:
    try:
        digest = bytes.fromhex(ck.config_hash)
    except ValueError:
        raise CheckpointError("config hash must be hex") from None
    if len(digest) != 32:
        raise CheckpointError("config hash must be a sha256 digest")
    meta = json.dumps(ck.meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<H", VERSION), digest, struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(ck.params))]
    for name in sorted(ck.params):
        arr = np.asarray(ck.params[name])
        if not np.issubdtype(arr.dtype, np.floating):
            raise CheckpointError(f"{name}: non-float parameter")
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 6
    digest = raw[off:off + 32].hex()
    off += 32
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off:off + mlen])
    off += mlen
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + ln].decode()
            off += ln
            (nd,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", raw, off)
            off += 4 * nd
            count = int(np.prod(shape)) if nd else 1
            if off + 4 * count > len(raw):
                raise CheckpointError(f"{name}: truncated blob")
            params[name] = np.frombuffer(raw, "<f4", count, off).reshape(shape).astype(np.float32)
            off += 4 * count
    except struct.error:
        raise CheckpointError("truncated checkpoint") from None
    if off != len(raw):
        raise CheckpointError("trailing bytes after last blob")
    return Checkpoint(digest, params, meta)


def save(ck: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(path)


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
