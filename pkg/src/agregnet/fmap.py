"""FMAP/1 raster container: one JSON header line + raw little-endian payload.

Density maps are stored as f32le, segmentation maps as u8 with values {0, 1}.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import SchemaError

MAGIC = "FMAP"
VERSION = 1

_DTYPES = {
    "f32le": np.dtype("<f4"),
    "u8": np.dtype("u1"),
}


def write_fmap(path: str | Path, data: np.ndarray) -> None:
    """Write a 2-D float32 or uint8 raster as an FMAP/1 file."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError(f"FMAP rasters are 2-D, got shape {data.shape}")
    if data.dtype == np.uint8:
        dtype_tag = "u8"
        payload = np.ascontiguousarray(data)
    else:
        dtype_tag = "f32le"
        payload = np.ascontiguousarray(data, dtype="<f4")
    height, width = data.shape
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "width": int(width),
        "height": int(height),
        "dtype": dtype_tag,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload.tobytes())


def read_fmap(path: str | Path) -> np.ndarray:
    """Read an FMAP/1 file back into a (height, width) array."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SchemaError(f"{path}: malformed FMAP header: {exc}") from exc
        if header.get("magic") != MAGIC:
            raise SchemaError(f"{path}: bad magic {header.get('magic')!r}")
        if header.get("version") != VERSION:
            raise SchemaError(f"{path}: unsupported FMAP version {header.get('version')!r}")
        dtype_tag = header.get("dtype")
        if dtype_tag not in _DTYPES:
            raise SchemaError(f"{path}: unknown dtype {dtype_tag!r}")
        width, height = int(header["width"]), int(header["height"])
        dtype = _DTYPES[dtype_tag]
        payload = fh.read()
    expected = width * height * dtype.itemsize
    if len(payload) != expected:
        raise SchemaError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    if dtype_tag == "f32le":
        return arr.astype(np.float32)
    return arr.copy()
