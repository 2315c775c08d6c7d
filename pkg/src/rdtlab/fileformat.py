"""Little-endian binary containers for datasets ("RDT1") and weights ("RDTW").

Both formats share the same skeleton: 4-byte magic, u32 version, a
length-prefixed canonical-JSON blob, then payload sections. Writers emit
canonical JSON (sorted keys, compact separators) so that save(load(path))
reproduces the original bytes exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

DATASET_MAGIC = b"RDT1"
WEIGHTS_MAGIC = b"RDTW"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed file; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


class Reader:
    """Cursor over an in-memory buffer with offset-aware errors."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: wanted {n} bytes, have {len(self.buf) - self.pos}",
                              self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64_array(self, count: int) -> np.ndarray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8", count=count).astype(np.float64)

    def json_blob(self):
        n = self.u32()
        start = self.pos
        raw = self.take(n)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad JSON blob: {exc}", start) from exc

    def expect_magic(self, magic: bytes):
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"wrong magic: expected {magic!r}, got {got!r}", 0)

    def expect_version(self, version: int):
        at = self.pos
        got = self.u32()
        if got != version:
            raise FormatError(f"unsupported version {got}, expected {version}", at)

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


class Writer:
    def __init__(self):
        self.chunks = []

    def raw(self, b: bytes):
        self.chunks.append(b)

    def u32(self, v: int):
        self.chunks.append(struct.pack("<I", v))

    def f64_array(self, arr: np.ndarray):
        self.chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def json_blob(self, obj):
        raw = canonical_json(obj)
        self.u32(len(raw))
        self.chunks.append(raw)

    def getvalue(self) -> bytes:
        return b"".join(self.chunks)


def save_weights(path, kind: str, config: dict, arrays: dict[str, np.ndarray]):
    """Write a named-array checkpoint in the RDTW container."""
    w = Writer()
    w.raw(WEIGHTS_MAGIC)
    w.u32(FORMAT_VERSION)
    w.json_blob({"kind": kind, "config": config})
    names = sorted(arrays)
    w.u32(len(names))
    for name in names:
        raw = name.encode("utf-8")
        w.u32(len(raw))
        w.raw(raw)
        arr = np.asarray(arrays[name], dtype=np.float64)
        w.u32(arr.ndim)
        for dim in arr.shape:
            w.u32(dim)
        w.f64_array(arr)
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def load_weights(path):
    """Read an RDTW checkpoint; returns (kind, config, {name: array})."""
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    r.expect_magic(WEIGHTS_MAGIC)
    r.expect_version(FORMAT_VERSION)
    blob = r.json_blob()
    if not isinstance(blob, dict) or "kind" not in blob or "config" not in blob:
        raise FormatError("weights blob must carry 'kind' and 'config'", 8)
    arrays = {}
    n = r.u32()
    for _ in range(n):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = r.f64_array(count).reshape(shape)
    r.done()
    return blob["kind"], blob["config"], arrays
