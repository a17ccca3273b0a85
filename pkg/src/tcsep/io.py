"""TCSF binary tensor files and named-tensor containers.

Single-tensor layout (normative, little-endian throughout):
  magic ``TCSF`` (4 bytes) | version u32 = 1 | dtype u8 (1 = f32, 2 = f64)
  | ndim u8 | dims as u64 each | row-major payload.

A container is a concatenation of records until EOF, each record being
  name_len u32 | name UTF-8 bytes | a complete single-tensor blob.
Containers hold model checkpoints and multi-array outputs.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"TCSF"
VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def _tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float64)
    code = _DTYPE_CODES[arr.dtype]
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return header + dims + payload


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated TCSF file while reading {what}")
    return buf


def _tensor_from(f) -> np.ndarray:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, code, ndim = struct.unpack("<IBB", _read_exact(f, 6, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported TCSF version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim, "dims")) if ndim else ()
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = _read_exact(f, count * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(_tensor_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = _tensor_from(f)
        if f.read(1):
            raise FormatError("trailing bytes after tensor payload")
    return arr


def write_container(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors in the dict's iteration order."""
    with open(path, "wb") as f:
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(_tensor_bytes(arr))


def read_container(path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("truncated container record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "record name").decode("utf-8")
            tensors[name] = _tensor_from(f)
    return tensors


def write_kv_text(path, items: dict[str, object]) -> None:
    """Plain-text ``key = value`` sidecar, one pair per line, LF endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key, value in items.items():
            f.write(f"{key} = {value}\n")


def read_kv_text(path) -> dict[str, str]:
    items: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            items[key.strip()] = value.strip()
    return items
