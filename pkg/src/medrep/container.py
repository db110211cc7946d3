"""Little-endian binary containers shared by the artifact formats.

Each artifact (``MREP`` matrices, ``MNBR`` neighbor tables, ``MTRJ``
trajectory datasets) starts with its own fixed header and payload and ends
with a common trailer::

    b"TRLR" | u32 n_arrays | n_arrays x array-record | u32 meta_len | JSON

An array record is ``u16 name_len | name | u8 dtype | u8 ndim | u64 dims | data``.
The JSON metadata is serialized with sorted keys and no whitespace so that
identical inputs produce byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np

from .errors import ContainerError, IoError

TRAILER_MAGIC = b"TRLR"

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<u4"),
    4: np.dtype("i1"),
    5: np.dtype("u1"),
    6: np.dtype("<i4"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


def dtype_code(dtype) -> int:
    dt = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    try:
        return _CODES[dt]
    except KeyError:
        raise ContainerError(f"unsupported dtype {dtype}") from None


def code_dtype(code: int) -> np.dtype:
    try:
        return _DTYPES[code]
    except KeyError:
        raise ContainerError(f"unknown dtype code {code}") from None


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Reader:
    """Bounds-checked cursor over an in-memory file image."""

    def __init__(self, data: bytes, source: str = "<bytes>"):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(f"{self.source}: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = self.take(dt.itemsize * count)
        return np.frombuffer(raw, dtype=dt, count=count).copy()

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def read_file(path) -> Reader:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return Reader(data, str(path))


def expect_magic(reader: Reader, magic: bytes) -> None:
    got = reader.take(len(magic)) if len(reader.data) >= len(magic) else reader.data
    if got != magic:
        raise ContainerError(f"{reader.source}: bad magic {got!r}, expected {magic!r}")


def write_array(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = dtype_code(arr.dtype)
    f.write(np.ascontiguousarray(arr, dtype=code_dtype(code)).tobytes())


def write_trailer(f: BinaryIO, meta: dict | None = None, arrays: dict[str, np.ndarray] | None = None) -> None:
    arrays = arrays or {}
    f.write(TRAILER_MAGIC)
    f.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        raw_name = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw_name)))
        f.write(raw_name)
        f.write(struct.pack("<BB", dtype_code(arr.dtype), arr.ndim))
        for dim in arr.shape:
            f.write(struct.pack("<Q", dim))
        write_array(f, arr)
    blob = canonical_json(meta or {})
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)


def read_trailer(reader: Reader) -> tuple[dict, dict[str, np.ndarray]]:
    if reader.take(4) != TRAILER_MAGIC:
        raise ContainerError(f"{reader.source}: missing trailer")
    (count,) = reader.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        shape = tuple(reader.unpack("<Q")[0] for _ in range(ndim))
        arrays[name] = reader.array(code_dtype(code), int(np.prod(shape, dtype=np.int64))).reshape(shape)
    (meta_len,) = reader.unpack("<I")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{reader.source}: corrupt metadata") from exc
    if not reader.at_end():
        raise ContainerError(f"{reader.source}: trailing bytes after metadata")
    return meta, arrays


# -- TSV text escaping -------------------------------------------------------

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def escape_text(text: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in text)


def unescape_text(text: str) -> str:
    if "\\" not in text:
        return text
    out = []
    it = iter(text)
    for ch in it:
        if ch == "\\":
            nxt = next(it, "")
            out.append(_UNESCAPES.get(nxt, "\\" + nxt))
        else:
            out.append(ch)
    return "".join(out)
