"""Bit-exact on-disk formats: binary PGM/PPM images and flat little-endian
arrays with SHA-256 integrity, as documented in docs/formats.md."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, MissingFile, ShapeError

ARRAY_DTYPES = {"float64": "<f8", "float32": "<f4", "int32": "<i4", "int64": "<i8"}


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_pgm(path: Path | str, img: np.ndarray) -> None:
    """8-bit binary PGM (P5) from a float image in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"PGM needs a 2D image, got shape {arr.shape}")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(q.tobytes())


def read_pgm(path: Path | str) -> np.ndarray:
    """Read a binary PGM back into a float image in [0, 1]."""
    p = Path(path)
    if not p.exists():
        raise MissingFile(str(p))
    data = p.read_bytes()
    if not data.startswith(b"P5"):
        raise ShapeError(f"{p} is not a binary PGM")
    fields: list[bytes] = []
    idx = 2
    while len(fields) < 3:
        while idx < len(data) and data[idx : idx + 1].isspace():
            idx += 1
        if data[idx : idx + 1] == b"#":  # comment line
            idx = data.index(b"\n", idx) + 1
            continue
        start = idx
        while idx < len(data) and not data[idx : idx + 1].isspace():
            idx += 1
        fields.append(data[start:idx])
    idx += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ShapeError(f"unsupported PGM maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=idx)
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def write_ppm(path: Path | str, rgb: np.ndarray) -> None:
    """24-bit binary PPM (P6) from an (H, W, 3) uint8 array."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ShapeError("PPM needs an (H, W, 3) uint8 array")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def write_array(path: Path | str, arr: np.ndarray) -> dict:
    """Write a flat little-endian binary; returns its manifest record."""
    a = np.ascontiguousarray(arr)
    dtype_name = a.dtype.name
    if dtype_name not in ARRAY_DTYPES:
        raise ShapeError(f"unsupported array dtype {dtype_name}")
    a = a.astype(ARRAY_DTYPES[dtype_name])  # force little-endian
    with open(path, "wb") as fh:
        fh.write(a.tobytes())
    return {
        "path": Path(path).name,
        "shape": list(a.shape),
        "dtype": dtype_name,
        "sha256": sha256_file(path),
    }


def read_array(directory: Path | str, record: dict) -> np.ndarray:
    """Read an array back, verifying its checksum."""
    path = Path(directory) / record["path"]
    if not path.exists():
        raise MissingFile(str(path))
    if sha256_file(path) != record["sha256"]:
        raise ChecksumMismatch(str(path))
    raw = np.frombuffer(path.read_bytes(), dtype=ARRAY_DTYPES[record["dtype"]])
    return raw.reshape(record["shape"]).astype(record["dtype"])
