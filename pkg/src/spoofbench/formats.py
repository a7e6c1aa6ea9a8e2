"""On-disk formats: SPFB tensor checkpoints, MELS patch files, PGM previews.

All integers are little-endian u32 and all tensor data little-endian f32.

SPFB:  b"SPFB" | version | count | count * (name_len | utf-8 name | rank | dims[rank] | data)
MELS:  b"MELS" | version | count | n_mels | n_frames | labels[count] | data[count, n_mels, n_frames]
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

SPFB_MAGIC = b"SPFB"
MELS_MAGIC = b"MELS"
VERSION = 1


class FormatError(ValueError):
    pass


def _u32(f) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("unexpected end of file")
    return struct.unpack("<I", raw)[0]


def _read_f32(f, count: int) -> np.ndarray:
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError("unexpected end of file in tensor data")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def save_spfb(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors in insertion order."""
    with open(path, "wb") as f:
        f.write(SPFB_MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_spfb(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != SPFB_MAGIC:
            raise FormatError(f"{path}: not an SPFB file")
        version = _u32(f)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported SPFB version {version}")
        out = {}
        for _ in range(_u32(f)):
            name = f.read(_u32(f)).decode("utf-8")
            rank = _u32(f)
            dims = tuple(_u32(f) for _ in range(rank))
            out[name] = _read_f32(f, int(np.prod(dims, dtype=np.int64))).reshape(dims)
        return out


def save_mels(path: str | os.PathLike, patches: np.ndarray, labels) -> None:
    """``patches`` has shape (count, n_mels, n_frames)."""
    patches = np.asarray(patches)
    labels = np.asarray(labels, dtype=np.int64)
    if patches.ndim != 3 or len(labels) != len(patches):
        raise FormatError(f"need (count, n_mels, n_frames) patches and one label each, "
                          f"got {patches.shape} and {labels.shape}")
    count, n_mels, n_frames = patches.shape
    with open(path, "wb") as f:
        f.write(MELS_MAGIC)
        f.write(struct.pack("<IIII", VERSION, count, n_mels, n_frames))
        f.write(labels.astype("<u4").tobytes())
        f.write(np.ascontiguousarray(patches, dtype="<f4").tobytes())


def load_mels(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Return (patches (count, n_mels, n_frames) f32, labels (count,) int64)."""
    with open(path, "rb") as f:
        if f.read(4) != MELS_MAGIC:
            raise FormatError(f"{path}: not a MELS file")
        version = _u32(f)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported MELS version {version}")
        count, n_mels, n_frames = _u32(f), _u32(f), _u32(f)
        raw = f.read(4 * count)
        if len(raw) != 4 * count:
            raise FormatError("unexpected end of file in labels")
        labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        data = _read_f32(f, count * n_mels * n_frames).reshape(count, n_mels, n_frames)
        return data, labels


def save_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """8-bit binary PGM, min-max scaled; row 0 of ``image`` becomes the bottom row."""
    img = np.flipud(np.asarray(image, dtype=np.float64))
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, dims, _maxval, pixels = data.split(b"\n", 3)
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(pixels[: w * h], dtype=np.uint8).reshape(h, w)
