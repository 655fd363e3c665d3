"""PNG encode/decode with the [-1, 1] <-> 8-bit mapping."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError


def to_bytes_image(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {image.shape}")
    scaled = np.round((image.astype(np.float64) + 1.0) * 127.5)
    return np.clip(scaled, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_bytes_image(raw: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float in [-1, 1]."""
    arr = raw.astype(dtype).transpose(2, 0, 1)
    return arr / dtype(127.5) - dtype(1.0)


def encode_png(image: np.ndarray, path) -> None:
    Image.fromarray(to_bytes_image(image), mode="RGB").save(Path(path), format="PNG")


def decode_png(path, dtype=np.float32) -> np.ndarray:
    with Image.open(Path(path)) as im:
        raw = np.asarray(im.convert("RGB"))
    return from_bytes_image(raw, dtype)


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    """Center crop a (3, H, W) image to (3, size, size)."""
    _, h, w = image.shape
    if size > h or size > w:
        raise ShapeError(f"crop {size} exceeds image {image.shape}")
    y0 = (h - size) // 2
    x0 = (w - size) // 2
    return image[:, y0 : y0 + size, x0 : x0 + size]
