"""Binary portable-map writers for mask and mixed-sample export."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def _quantize(image01: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image01) * 255.0), 0, 255).astype(np.uint8)


def write_p5(path, image01: np.ndarray) -> None:
    """Grayscale map (magic P5): one [H, W] plane, values rounded to 0..255."""
    img = np.asarray(image01)
    if img.ndim != 2:
        raise DimensionError(f"P5 export needs a single [H, W] plane, got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(img).tobytes())


def write_p6(path, image01: np.ndarray) -> None:
    """Color map (magic P6): an [3, H, W] plane stack, values rounded to 0..255."""
    img = np.asarray(image01)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"P6 export needs [3, H, W], got {img.shape}")
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(img.transpose(1, 2, 0)).tobytes())


def write_image(path, image01: np.ndarray) -> None:
    """Dispatch on channel count: 1 channel to P5, 3 channels to P6."""
    img = np.asarray(image01)
    if img.ndim == 2:
        write_p5(path, img)
    elif img.ndim == 3 and img.shape[0] == 1:
        write_p5(path, img[0])
    elif img.ndim == 3 and img.shape[0] == 3:
        write_p6(path, img)
    else:
        raise DimensionError(f"cannot export image of shape {img.shape}")
