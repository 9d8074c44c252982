"""Lossless PNG reading and writing for RasterImage values.

Output is always 8-bit RGB, non-interlaced, with no ancillary chunks, so
encoding the same image twice yields byte-identical files.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .core import RasterImage


def to_png_bytes(image: RasterImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.array, mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def from_png_bytes(data: bytes) -> RasterImage:
    with Image.open(io.BytesIO(data)) as img:
        return RasterImage(np.asarray(img.convert("RGB"), dtype=np.uint8))


def save_png(image: RasterImage, path: Path | str) -> None:
    Path(path).write_bytes(to_png_bytes(image))


def load_png(path: Path | str) -> RasterImage:
    return from_png_bytes(Path(path).read_bytes())
