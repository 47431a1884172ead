"""Binary checkpoint format.

Layout (all integers and floats little-endian):

    magic   4 bytes  b"IRCN"
    version u32
    time    f64      wall-clock save time (zeroed by the determinism hash)
    config  u32 length + UTF-8 JSON (run config echo, includes model config)
    params  u32 count, then per tensor:
              u16 name length + name bytes
              u8 dtype tag (0 = float32, 1 = float64)
              4 x u32 dims (shapes shorter than rank 4 are left-padded with 1s)
              raw little-endian elements
    opt     u32 length + UTF-8 JSON scalar state (t, d, f_prev, optimizer echo)
            u32 count + tensor entries (same encoding; names carry m:/v:/vel: prefixes)
    stats   u32 length + UTF-8 JSON normalization statistics
    rng     u32 length + UTF-8 JSON generator states + epoch counter

Loading preserves the stored timestamp, so save -> load -> save reproduces the
file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"IRCN"
VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TIME_OFFSET = 8  # magic + version


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    opt_scalars: dict = field(default_factory=dict)
    opt_tensors: dict[str, np.ndarray] = field(default_factory=dict)
    norm_stats: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    version: int = VERSION
    timestamp: float = 0.0


def _pack_json(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode()
    return struct.pack("<I", len(raw)) + raw


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    dims = (1,) * (4 - arr.ndim) + arr.shape
    if len(dims) != 4:
        raise DataError(f"checkpoint tensor {name!r} has rank > 4: {arr.shape}")
    tag = _TAG_OF[np.dtype(arr.dtype)]
    data = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
    return (struct.pack("<H", len(nb)) + nb + struct.pack("<B", tag)
            + struct.pack("<4I", *dims) + data)


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    out += [_pack_tensor(n, a) for n, a in tensors.items()]
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataError(f"truncated checkpoint: {self.path}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (n,) = self.u("<I")
        return json.loads(self.take(n).decode())

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.u("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.u("<H")
            name = self.take(nlen).decode()
            (tag,) = self.u("<B")
            if tag not in _DTYPE_TAGS:
                raise DataError(f"unknown dtype tag {tag} in checkpoint {self.path}")
            dims = self.u("<4I")
            dt = _DTYPE_TAGS[tag]
            n_elem = int(np.prod(dims))
            arr = np.frombuffer(self.take(n_elem * dt.itemsize), dtype=dt).reshape(dims)
            out[name] = arr.astype(dt.newbyteorder("="))
        return out


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    blob = b"".join([
        MAGIC,
        struct.pack("<I", ck.version),
        struct.pack("<d", ck.timestamp),
        _pack_json(ck.config),
        _pack_tensors(ck.params),
        _pack_json(ck.opt_scalars),
        _pack_tensors(ck.opt_tensors),
        _pack_json(ck.norm_stats),
        _pack_json(ck.rng_state),
    ])
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {raw[:4]!r}, expected {MAGIC!r}")
    r = _Reader(raw, path)
    r.take(4)
    (version,) = r.u("<I")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (timestamp,) = r.u("<d")
    return Checkpoint(
        version=version,
        timestamp=timestamp,
        config=r.json(),
        params=r.tensors(),
        opt_scalars=r.json(),
        opt_tensors=r.tensors(),
        norm_stats=r.json(),
        rng_state=r.json(),
    )


def determinism_hash(path: str | Path) -> str:
    """SHA-256 of the checkpoint bytes with the timestamp field zeroed."""
    raw = bytearray(Path(path).read_bytes())
    raw[_TIME_OFFSET:_TIME_OFFSET + 8] = bytes(8)
    return hashlib.sha256(bytes(raw)).hexdigest()
