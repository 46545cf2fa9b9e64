"""Single-file binary checkpoints.

Layout (all integers little-endian):

    magic  b"DIVC"
    u32    format version (currently 1)
    32B    SHA-256 digest of the resolved config text
    u64    training step
    u32    number of blocks
    block* each:
        u16  name length, then UTF-8 name
        u8   dtype tag: 0 = float64, 1 = int64, 2 = raw bytes
        u8   ndim, then ndim x u64 dims (absent for raw bytes)
        u64  payload byte length
        ...  payload (f64/i64 stored little-endian)
        u32  CRC-32 of the payload

Numeric payloads round-trip bit-exactly on any platform. Writes go to a
temp file in the target directory followed by an atomic rename.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"DIVC"
FORMAT_VERSION = 1

_DTYPE_F64 = 0
_DTYPE_I64 = 1
_DTYPE_BYTES = 2


@dataclass
class CheckpointState:
    step: int
    config_digest: bytes
    arrays: dict = field(default_factory=dict)  # name -> np.ndarray (f64/i64)
    meta: dict = field(default_factory=dict)    # name -> str

    @property
    def config_text(self) -> str:
        return self.meta.get("config_text", "")


def _write_block(buf, name: str, payload: bytes, dtype: int, shape=None):
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", dtype))
    if dtype != _DTYPE_BYTES:
        buf.write(struct.pack("<B", len(shape)))
        for dim in shape:
            buf.write(struct.pack("<Q", dim))
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)
    buf.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def save_checkpoint(path, state: CheckpointState) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    digest = state.config_digest
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    buf.write(digest)
    buf.write(struct.pack("<Q", state.step))
    n_blocks = len(state.arrays) + len(state.meta)
    buf.write(struct.pack("<I", n_blocks))
    for name, arr in state.arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float64:
            tag, wire = _DTYPE_F64, "<f8"
        elif arr.dtype == np.int64:
            tag, wire = _DTYPE_I64, "<i8"
        else:
            raise CheckpointError(
                f"block '{name}': unsupported dtype {arr.dtype} (use f64/i64)")
        _write_block(buf, name, arr.astype(wire).tobytes(), tag, arr.shape)
    for name, text in state.meta.items():
        _write_block(buf, "meta/" + name, text.encode("utf-8"), _DTYPE_BYTES)

    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".divc.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))[0]


def load_checkpoint(path) -> CheckpointState:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint '{path}': {e}") from e
    r = _Reader(data, path)
    if r.read(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.unpack("<I", "version")
    if version > FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} is newer than this build "
            f"({FORMAT_VERSION})")
    digest = r.read(32, "config digest")
    step = r.unpack("<Q", "step")
    n_blocks = r.unpack("<I", "block count")
    state = CheckpointState(step=step, config_digest=digest)
    for _ in range(n_blocks):
        name_len = r.unpack("<H", "block name length")
        name = r.read(name_len, "block name").decode("utf-8")
        tag = r.unpack("<B", f"dtype of block '{name}'")
        shape = None
        if tag != _DTYPE_BYTES:
            ndim = r.unpack("<B", f"ndim of block '{name}'")
            shape = tuple(r.unpack("<Q", f"shape of block '{name}'")
                          for _ in range(ndim))
        nbytes = r.unpack("<Q", f"length of block '{name}'")
        payload = r.read(nbytes, f"payload of block '{name}'")
        crc = r.unpack("<I", f"checksum of block '{name}'")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise CheckpointError(
                f"{path}: block '{name}' failed its checksum (corrupt data)")
        if tag == _DTYPE_BYTES:
            state.meta[name.removeprefix("meta/")] = payload.decode("utf-8")
            continue
        wire = "<f8" if tag == _DTYPE_F64 else "<i8"
        expected = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if shape is not None and len(payload) != expected:
            raise CheckpointError(
                f"{path}: block '{name}' length {len(payload)} != expected {expected}")
        arr = np.frombuffer(payload, dtype=wire).reshape(shape)
        state.arrays[name] = arr.astype(np.float64 if tag == _DTYPE_F64 else np.int64)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return state
