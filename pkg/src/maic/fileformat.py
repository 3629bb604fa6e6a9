"""Model/dataset container: JSON header followed by raw little-endian float64 arrays.

Layout::

    b"MAICBLOB"                      8-byte magic
    uint64 little-endian             header length in bytes
    header                           UTF-8 JSON object
    array data                       float64 '<f8', row-major, in header order

The header carries ``meta`` (free-form JSON) and ``arrays``, a list of
``{"name", "shape", "offset"}`` records; offsets are relative to the start of
the array section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MAICBLOB"


def write_blob(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    records = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        records.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes(order="C"))
        offset += data.nbytes
    header = json.dumps({"meta": meta, "arrays": records}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_blob(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a model file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    base = 16 + hlen
    arrays = {}
    for rec in header["arrays"]:
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        start = base + rec["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        arrays[rec["name"]] = arr.reshape(rec["shape"]).astype(float)
    return header["meta"], arrays
