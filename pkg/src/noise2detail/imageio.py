"""PNG / PGM / PPM reading and writing with [0, 1] float images."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = ["ImageFormatError", "load_image", "read_config", "save_image"]

_SUFFIXES = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}
# Pillow mode -> full-scale value; 16-bit PNM with other maxvals is rescaled to 65535 on read
_MODE_MAX = {"L": 255, "RGB": 255, "I;16": 65535, "I;16B": 65535, "I;16L": 65535, "I": 65535}


class ImageFormatError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """Read an image as ``H x W x C`` float32 scaled to [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise ImageFormatError(f"{path}: unsupported format {im.format}; expected PNG, PGM or PPM")
            if im.mode not in _MODE_MAX:
                raise ImageFormatError(
                    f"{path}: unsupported pixel mode {im.mode}; expected 8/16-bit grayscale or 8-bit RGB"
                )
            peak = _MODE_MAX[im.mode]
            arr = np.array(im)
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.min() < 0 or arr.max() > peak:
        raise ImageFormatError(f"{path}: pixel values outside 0..{peak}")
    return (arr.astype(np.float64) / peak).astype(np.float32)


def save_image(img: np.ndarray, path, bit_depth: int = 8) -> None:
    """Write a [0, 1] image, rounding half up to the nearest level.

    Out-of-range values are rejected; clamp before saving.
    """
    path = Path(path)
    fmt = _SUFFIXES.get(path.suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"{path}: unsupported extension; use .png, .pgm, .ppm or .pnm")
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 3 and arr.shape[2] != 3:
        raise ImageFormatError(f"{path}: cannot store {arr.shape[2]} channels; only 1 or 3 are supported")
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected an H x W (x C) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{path}: image values must lie in [0, 1]; clamp before saving")
    rgb = arr.ndim == 3
    if rgb and bit_depth == 16:
        raise ImageFormatError(f"{path}: 16-bit output is only supported for grayscale")
    if path.suffix.lower() == ".pgm" and rgb:
        raise ImageFormatError(f"{path}: .pgm holds grayscale only; use .ppm for RGB")
    if path.suffix.lower() == ".ppm" and not rgb:
        raise ImageFormatError(f"{path}: .ppm holds RGB only; use .pgm for grayscale")
    peak = 255 if bit_depth == 8 else 65535
    levels = np.floor(arr * peak + 0.5).astype(np.uint8 if bit_depth == 8 else np.uint16)
    try:
        Image.fromarray(levels).save(path, format=fmt)
    except OSError as exc:
        raise OSError(f"{path}: cannot write image ({exc})") from exc


def read_config(path) -> dict[str, str]:
    """Parse a plain ``key = value`` file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().lower().replace("-", "_")] = value.strip()
    return out
