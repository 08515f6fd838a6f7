"""Grayscale image file I/O.

Supported inputs are 8- and 16-bit single-channel files (PNG-class
grayscale and portable graymaps); pixel values map linearly to [0, 1].
Saving clamps to [0, 1] and quantizes to 16 bits, so a round trip is
exact to within one quantization step (1/65535).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError
from .tensor import Tensor


def load_image(path) -> Tensor:
    """Read a grayscale image file into a (1, 1, h, w) tensor in [0, 1]."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ValidationError(f"malformed image file {path}: {exc}") from exc

    if img.mode in ("RGB", "RGBA", "P", "CMYK", "YCbCr", "LA"):
        raise ValidationError(
            f"{path}: grayscale required, got a {img.mode} (multi-channel) image"
        )
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValidationError(f"{path}: grayscale required, got shape {arr.shape}")

    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype == np.uint16:
        scale = 65535.0
    elif arr.dtype == np.int32 or arr.dtype == np.uint32:
        # Pillow loads 16-bit graymaps/PNGs as mode "I" on some paths.
        if arr.min() < 0 or arr.max() > 65535:
            raise ValidationError(f"{path}: unsupported bit depth (values beyond 16-bit)")
        scale = 65535.0
    else:
        raise ValidationError(f"{path}: unsupported pixel type {arr.dtype}")
    data = (arr.astype(np.float32) / np.float32(scale)).reshape(1, 1, *arr.shape)
    return Tensor(data)


def save_image(path, image) -> None:
    """Write a (1, 1, h, w) tensor (or 2-D array) as a 16-bit grayscale
    file; the format follows the extension (.png or .pgm)."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    data = np.squeeze(data)
    if data.ndim != 2:
        raise ValidationError(f"expected a single 2-D image, got shape {data.shape}")
    q = np.round(np.clip(data, 0.0, 1.0).astype(np.float64) * 65535.0).astype(np.uint16)

    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        with open(path, "wb") as fh:
            fh.write(f"P5\n{q.shape[1]} {q.shape[0]}\n65535\n".encode("ascii"))
            fh.write(q.astype(">u2").tobytes())
    elif suffix == ".png":
        Image.fromarray(q, mode="I;16").save(path)
    else:
        raise ValidationError(f"unsupported image extension {suffix!r} (use .png or .pgm)")
