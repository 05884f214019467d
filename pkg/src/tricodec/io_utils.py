"""Deterministic on-disk array archive.

A byte-identical alternative to zip-based archives (whose timestamps
break reproducibility): a JSON manifest (sorted keys) followed by the
raw little-endian array bytes in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import BitstreamError

MAGIC = b"TARC"


def save_arrays(path, arrays, meta=None):
    names = sorted(arrays)
    manifest = {
        "meta": meta or {},
        "tensors": [{"name": n,
                     "dtype": np.dtype(arrays[n].dtype).str,
                     "shape": list(arrays[n].shape)} for n in names],
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n]).astype(
                arrays[n].dtype.newbyteorder("<"), copy=False).tobytes())


def write_raw_render(path, image):
    """Planar float32 dump for metric tooling: u32 H, u32 W, then the
    three channel planes, row-major little-endian."""
    img = np.asarray(image, dtype="<f4")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<2I", h, w))
        for c in range(3):
            f.write(np.ascontiguousarray(img[:, :, c]).tobytes())


def read_raw_render(path):
    data = Path(path).read_bytes()
    h, w = struct.unpack_from("<2I", data, 0)
    planes = np.frombuffer(data[8:], dtype="<f4").reshape(3, h, w)
    return np.ascontiguousarray(planes.transpose(1, 2, 0))


def load_arrays(path):
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise BitstreamError(f"{path}: not an array archive")
    (hlen,) = struct.unpack_from("<I", data, 4)
    manifest = json.loads(data[8:8 + hlen].decode())
    off = 8 + hlen
    out = {}
    for t in manifest["tensors"]:
        dt = np.dtype(t["dtype"])
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        end = off + n * dt.itemsize
        if end > len(data):
            raise BitstreamError(f"{path}: truncated archive")
        out[t["name"]] = np.frombuffer(
            data[off:end], dtype=dt).reshape(t["shape"]).copy()
        off = end
    return out, manifest["meta"]
