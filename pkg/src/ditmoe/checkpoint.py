"""Binary checkpoint serialization.

Layout, all little-endian:

    magic b"DSMK" | u32 version | five length-prefixed sections

Each section is u64 byte-length + payload:

    1. header JSON: {"config": <config-file dict>, "step": int}
    2. weights table (trainable parameters + router biases)
    3. optimizer: u64 step | first-moment table | second-moment table
    4. EMA table
    5. RNG-state JSON

A table is u32 entry-count, then per entry, sorted by name: u16 name
byte-length, name utf-8, u8 ndim, u32 per dim, raw float64 values.  All
serialization is canonical (sorted keys, fixed JSON separators), so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DSMK"
VERSION = 1

__all__ = [
    "CheckpointBundle",
    "CheckpointError",
    "CorruptCheckpointError",
    "VersionMismatchError",
    "save_checkpoint",
    "load_checkpoint",
    "MAGIC",
    "VERSION",
]


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CorruptCheckpointError(CheckpointError):
    """The file does not decode as a complete checkpoint."""


class VersionMismatchError(CheckpointError):
    """The file's format version is not the one this code writes."""


@dataclass
class CheckpointBundle:
    config: dict                  # full config-file dict (name/model/train)
    step: int
    weights: dict
    opt_step: int
    opt_m: dict
    opt_v: dict
    ema: dict
    rng_state: dict
    version: int = VERSION


def _canon_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _encode_table(table: dict) -> bytes:
    parts = [struct.pack("<I", len(table))]
    for name in sorted(table):
        # np.ascontiguousarray would promote 0-d entries to 1-d.
        arr = np.asarray(table[name]).astype("<f8", copy=False)
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        if arr.ndim:
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Cursor:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.blob)


def _decode_table(cur: _Cursor) -> dict:
    (count,) = cur.unpack("<I")
    table = {}
    for _ in range(count):
        (name_len,) = cur.unpack("<H")
        name = cur.read(name_len).decode()
        (ndim,) = cur.unpack("<B")
        shape = cur.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(cur.read(8 * size), dtype="<f8")
        table[name] = values.reshape(shape).astype(np.float64)
    return table


def save_checkpoint(bundle: CheckpointBundle, path):
    header = _canon_json({"config": bundle.config, "step": bundle.step})
    optimizer = (struct.pack("<Q", bundle.opt_step)
                 + _encode_table(bundle.opt_m) + _encode_table(bundle.opt_v))
    sections = [
        header,
        _encode_table(bundle.weights),
        optimizer,
        _encode_table(bundle.ema),
        _canon_json(bundle.rng_state),
    ]
    out = [MAGIC, struct.pack("<I", bundle.version)]
    for payload in sections:
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


def load_checkpoint(path) -> CheckpointBundle:
    blob = Path(path).read_bytes()
    cur = _Cursor(blob)
    if cur.read(4) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    (version,) = cur.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, this build reads {VERSION}")

    sections = []
    for _ in range(5):
        (length,) = cur.unpack("<Q")
        sections.append(cur.read(length))
    if not cur.exhausted:
        raise CorruptCheckpointError(
            f"{path}: {len(blob) - cur.pos} trailing bytes after last section")

    try:
        header = json.loads(sections[0].decode())
        rng_state = json.loads(sections[4].decode())
    except (ValueError, UnicodeDecodeError) as err:
        raise CorruptCheckpointError(f"{path}: undecodable JSON section: {err}") from err
    if not isinstance(header, dict) or "config" not in header or "step" not in header:
        raise CorruptCheckpointError(f"{path}: malformed header section")

    def one_table(payload: bytes, label: str) -> dict:
        cur = _Cursor(payload)
        table = _decode_table(cur)
        if not cur.exhausted:
            raise CorruptCheckpointError(f"{path}: trailing bytes in {label} section")
        return table

    weights = one_table(sections[1], "weights")
    opt_cur = _Cursor(sections[2])
    (opt_step,) = opt_cur.unpack("<Q")
    opt_m = _decode_table(opt_cur)
    opt_v = _decode_table(opt_cur)
    if not opt_cur.exhausted:
        raise CorruptCheckpointError(f"{path}: trailing bytes in optimizer section")
    ema = one_table(sections[3], "EMA")

    return CheckpointBundle(config=header["config"], step=int(header["step"]),
                            weights=weights, opt_step=opt_step, opt_m=opt_m,
                            opt_v=opt_v, ema=ema, rng_state=rng_state,
                            version=version)
