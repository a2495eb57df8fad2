"""``FNETCKPT v1`` container: named little-endian arrays plus JSON metadata.

Layout::

    b"FNETCKPT v1\\n"
    uint64 LE   header length in bytes
    header      UTF-8 JSON {"entries": [...], "meta": {...}}
    payload     concatenated raw array bytes

Each entry records ``name``, ``shape``, ``dtype`` (``f32``/``f64``/``i64``),
``offset`` into the payload and ``nbytes``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FNETCKPT v1\n"
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}
_CODES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64", np.dtype("int64"): "i64"}


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_arrays(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an FNETCKPT v1 file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    base = pos + hlen
    arrays = {}
    for e in header["entries"]:
        start = base + e["offset"]
        buf = data[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated entry {e['name']}")
        dtype = np.dtype(_DTYPES[e["dtype"]])
        arrays[e["name"]] = np.frombuffer(buf, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return arrays, header["meta"]
