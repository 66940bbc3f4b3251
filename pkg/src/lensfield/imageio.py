"""Image files: 8-bit sRGB PNG next to lossless linear float32 ``.npy``."""

from pathlib import Path

import numpy as np
from PIL import Image

from .render import linear_to_srgb, srgb_to_linear


def to_srgb8(linear: np.ndarray) -> np.ndarray:
    return np.round(linear_to_srgb(linear) * 255.0).astype(np.uint8)


def save_png(path, linear: np.ndarray):
    Image.fromarray(to_srgb8(linear)).save(path)


def save_image_pair(directory, name: str, tag: str, linear: np.ndarray):
    """Write ``<name>_<tag>.png`` (sRGB) and ``<name>_<tag>.npy`` (linear float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    png = directory / f"{name}_{tag}.png"
    npy = directory / f"{name}_{tag}.npy"
    save_png(png, linear)
    np.save(npy, np.asarray(linear, dtype=np.float32))
    return png, npy


def load_linear(path) -> np.ndarray:
    """Linear RGB float64 image from either file kind."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    return srgb_to_linear(load_srgb(path))


def load_srgb(path) -> np.ndarray:
    """sRGB-encoded values in [0, 1]; ``.npy`` inputs are encoded and 8-bit quantized."""
    path = Path(path)
    if path.suffix == ".npy":
        return to_srgb8(np.load(path)).astype(np.float64) / 255.0
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
