"""Portable float map (PFM) image reading and writing.

Color images only; little-endian (negative scale), rows stored
bottom-to-top as the format prescribes.
"""

from __future__ import annotations

import numpy as np


def write_pfm(path, image, scale=-1.0):
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    if scale >= 0:
        raise ValueError("only little-endian PFM (negative scale) is written")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(f"{scale:.1f}\n".encode("ascii"))
        fh.write(img[::-1].astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        header = fh.readline().rstrip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        channels = 3 if header == b"PF" else 1
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        data = np.frombuffer(fh.read(count * 4), dtype=dtype, count=count)
    img = data.reshape(h, w, channels)[::-1]
    return np.ascontiguousarray(img.astype(np.float64))


def compare_images(a, b):
    """RMSE, max abs difference, and per-channel means of two images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return {
        "rmse": float(np.sqrt(np.mean(diff**2))),
        "max_abs": float(np.abs(diff).max()),
        "mean_a": [float(x) for x in a.reshape(-1, a.shape[-1]).mean(axis=0)],
        "mean_b": [float(x) for x in b.reshape(-1, b.shape[-1]).mean(axis=0)],
    }
