"""Binary PPM (P6) heatmaps of macroscopic fields.

Time runs left to right, space bottom to top (the top row is the most
downstream cell). Values map linearly to gray levels on a fixed per-quantity
scale, dark = low; values outside the scale saturate. Invalid cells are drawn
in magenta, which no gray level can produce.
"""

from __future__ import annotations

import numpy as np

from .macro import MacroField
from .metrics import Quantity
from .units import HOUR, MILE, MPH

INVALID_RGB = (255, 0, 255)

# quantity -> (SI-to-display factor, low, high, unit)
SCALES = {
    Quantity.SPEED: (1.0 / MPH, 0.0, 80.0, "mph"),
    Quantity.FLOW: (HOUR, 0.0, 2400.0, "vphpl"),
    Quantity.DENSITY: (MILE, 0.0, 200.0, "vpmpl"),
}


def gray_levels(field: MacroField, quantity) -> np.ndarray:
    """uint8 gray level per cell, shape ``(n_t, n_x)``; invalid cells are 0."""
    z = Quantity.parse(quantity)
    if z not in SCALES:
        raise ValueError(f"no heatmap scale for {z.value}")
    factor, lo, hi, _ = SCALES[z]
    values = np.nan_to_num(field.quantity(z.value) * factor, nan=lo)
    return np.rint(255.0 * np.clip((values - lo) / (hi - lo), 0.0, 1.0)).astype(np.uint8)


def render(field: MacroField, quantity, pixels: int = 1) -> np.ndarray:
    """RGB image array of shape ``(height, width, 3)``."""
    g = gray_levels(field, quantity)
    rgb = np.repeat(g[:, :, None], 3, axis=2)
    rgb[~field.valid] = INVALID_RGB
    img = rgb.transpose(1, 0, 2)[::-1]  # rows = space (downstream on top), columns = time
    if pixels > 1:
        img = img.repeat(pixels, axis=0).repeat(pixels, axis=1)
    return np.ascontiguousarray(img)


def ppm_bytes(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def heatmap(field: MacroField, quantity, path, pixels: int = 1) -> None:
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(render(field, quantity, pixels)))


__all__ = ["INVALID_RGB", "SCALES", "gray_levels", "heatmap", "ppm_bytes", "read_ppm", "render"]
