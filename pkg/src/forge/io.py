"""8-bit PNG boundary: images are float (C, H, W) in [0, 1] everywhere else."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

PNG_SUFFIXES = (".png",)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def to_uint8(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_png(path, x: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x)).save(path, format="PNG", optimize=False)


def list_pngs(folder) -> list:
    folder = Path(folder)
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in PNG_SUFFIXES)


def quantize(x: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits without touching disk."""
    return to_uint8(x).transpose(2, 0, 1).astype(np.float64) / 255.0
