#!/usr/bin/env python3
"""
Image I/O
PNG / PPM loading and saving through Pillow. Pixels live in [0,1] as
float32 H×W×C arrays; files are always 8-bit.
"""

import logging
import os
from dataclasses import dataclass
from typing import Union

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from lib.errors import ImageIOError

logger = logging.getLogger(__name__)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
SUPPORTED_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")

PathLike = Union[str, os.PathLike]


@dataclass
class Image:
    """H×W×C pixels in [0,1], C in {1, 3}"""
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise ImageIOError(f"image must be H×W×1 or H×W×3, got {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ImageIOError("image must be at least 1×1")
        self.pixels = np.clip(pixels, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, array: np.ndarray) -> "Image":
        return cls(np.asarray(array, dtype=np.float32) / 255.0)


def _png_bit_depth(path: PathLike) -> int:
    with open(path, "rb") as handle:
        header = handle.read(26)
    if len(header) < 26 or not header.startswith(PNG_SIGNATURE):
        return 0
    return header[24]


def load_image(path: PathLike) -> Image:
    """Load an 8-bit PNG or PPM/PGM file"""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ImageIOError(f"{path}: no such image file")
    depth = _png_bit_depth(path)
    if depth not in (0, 8):
        raise ImageIOError(f"{path}: unsupported bit depth {depth}")
    try:
        with PILImage.open(path) as handle:
            handle.load()
            mode = handle.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise ImageIOError(f"{path}: unsupported bit depth (mode {mode})")
            if mode in ("1", "L"):
                array = np.asarray(handle.convert("L"))
            elif mode == "RGB":
                array = np.asarray(handle)
            else:
                array = np.asarray(handle.convert("RGB"))
    except ImageIOError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageIOError(f"{path}: cannot decode image ({e})") from e
    return Image.from_uint8(array)


def save_image(image: Union[Image, np.ndarray], path: PathLike) -> None:
    """Save as 8-bit PNG (or PPM/PGM by suffix); pixels are quantized to 8 bits"""
    image = image if isinstance(image, Image) else Image(image)
    path = os.fspath(path)
    suffix = os.path.splitext(path)[1].lower()
    if suffix not in SUPPORTED_SUFFIXES:
        raise ImageIOError(f"{path}: unsupported image format '{suffix}'")
    data = image.to_uint8()
    pil = PILImage.fromarray(data[:, :, 0] if image.channels == 1 else data)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    try:
        pil.save(path, format="PNG" if suffix == ".png" else "PPM")
    except OSError as e:
        raise ImageIOError(f"{path}: cannot write image ({e})") from e
