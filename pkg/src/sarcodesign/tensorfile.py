"""Deterministic binary container: JSON header plus raw little-endian arrays.

Layout::

    magic[4] | u32 version | u32 header_len | header (UTF-8 JSON) | array bytes...

The header carries a ``"arrays"`` list of ``{name, dtype, shape}`` entries in
storage order.  JSON keys are sorted so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8", "i8": "i1", "i32": "<i4", "i64": "<i8", "u8": "u1"}
_TAGS = {np.dtype(v): k for k, v in _DTYPES.items()}


def pack(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    index = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype)
        if tag is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for array {name!r}")
        index.append({"name": name, "dtype": tag, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    doc = dict(header)
    doc["arrays"] = index
    head = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<II", VERSION, len(head)) + head + b"".join(chunks)


def unpack(magic: bytes, blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:4] != magic:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    version, head_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    off = 12
    header = json.loads(blob[off:off + head_len].decode("utf-8"))
    off += head_len
    arrays = {}
    for entry in header.pop("arrays"):
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        off += count * dt.itemsize
    if off != len(blob):
        raise ValueError(f"{len(blob) - off} trailing bytes in container")
    return header, arrays
