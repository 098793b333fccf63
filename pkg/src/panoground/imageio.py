"""PNG and raw-float image I/O.

Raw dumps are a 12-byte header (W, H, C as little-endian int32) followed by
H*W*C little-endian float32 samples in row-major (H, W, C) order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image


def load_png(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit PNG as float32 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def load_png_u8(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def to_u8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str | os.PathLike, img: np.ndarray) -> None:
    arr = to_u8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed compression settings keep files byte-identical across runs
    Image.fromarray(arr).save(path, format="PNG", compress_level=6, optimize=False)


def save_raw(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    H, W, C = img.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<iii", W, H, C))
        fh.write(img.astype("<f4").tobytes())


def load_raw(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    W, H, C = struct.unpack("<iii", raw[:12])
    data = np.frombuffer(raw[12:], dtype="<f4")
    if data.size != W * H * C:
        raise ValueError(f"{path}: expected {W * H * C} samples, found {data.size}")
    return data.reshape(H, W, C).astype(np.float32)


def resize(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Area-style resize of a float image via Pillow (per channel, float mode)."""
    img = np.asarray(img, dtype=np.float32)
    chans = [
        np.asarray(Image.fromarray(img[:, :, c], mode="F").resize((width, height), Image.BILINEAR))
        for c in range(img.shape[2])
    ]
    return np.stack(chans, axis=2)
