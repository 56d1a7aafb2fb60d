"""Grayscale raster helpers: PNG IO, binarisation, bilinear sampling, hashing."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

WHITE = 255
BLACK = 0

# Fraction of the 8-bit range below which a pixel counts as inked.
DARK_THRESHOLD = 0.5


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_png(image: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path, format="PNG")


def dark_mask(image: np.ndarray, threshold: float = DARK_THRESHOLD) -> np.ndarray:
    """Boolean mask of pixels darker than `threshold` of the dynamic range."""
    return image < threshold * 255.0


def content_hash(image: np.ndarray) -> str:
    """Stable digest of an 8-bit raster: shape plus raw pixel bytes."""
    arr = np.ascontiguousarray(np.asarray(image, dtype=np.uint8))
    digest = hashlib.sha256()
    digest.update(f"{arr.shape[0]}x{arr.shape[1]}:".encode())
    digest.update(arr.tobytes())
    return digest.hexdigest()


def png_bytes(image: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()
