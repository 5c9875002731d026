"""Binary and JSON encodings shared by checkpoints, samples and reports.

``DGT1`` tensor record (little-endian)::

    b"DGT1" | u32 rank | u64 dim * rank | u8 dtype (0=f32, 1=f64) | raw data

Container files (checkpoints, samples) start with their own 4-byte magic, a
u32 version and a length-prefixed (u32) canonical JSON header, followed by
DGT1 records in a fixed order.
"""

import json
import struct

import numpy as np

from .errors import CorruptFile

TENSOR_MAGIC = b"DGT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def tensor_to_bytes(array):
    array = np.asarray(array)
    if array.dtype not in _CODES:
        array = array.astype(np.float64)
    code = _CODES[array.dtype]
    head = TENSOR_MAGIC + struct.pack("<I", array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    head += struct.pack("<B", code)
    return head + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CorruptFile(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh):
    if _read_exact(fh, 4, "tensor magic") != TENSOR_MAGIC:
        raise CorruptFile("bad tensor magic")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
    if rank > 16:
        raise CorruptFile(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "tensor dims"))
    (code,) = struct.unpack("<B", _read_exact(fh, 1, "dtype code"))
    if code not in _DTYPES:
        raise CorruptFile(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    raw = _read_exact(fh, count * dtype.itemsize, "tensor data")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def write_tensor(fh, array):
    fh.write(tensor_to_bytes(array))


def write_header(fh, magic, version, header):
    payload = canonical_json(header).encode()
    fh.write(magic + struct.pack("<I", version) + struct.pack("<I", len(payload)) + payload)


def read_header(fh, magic):
    if _read_exact(fh, 4, "magic") != magic:
        raise CorruptFile(f"bad magic, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    (length,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
    try:
        header = json.loads(_read_exact(fh, length, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"unreadable header: {exc}") from None
    return version, header
