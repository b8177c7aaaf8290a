"""PNG renderings of cluster labelings and detection overlays."""
from __future__ import annotations

import colorsys
import io

import numpy as np
from PIL import Image

from .tensorio import atomic_write_bytes

_GOLDEN = 0.61803398875


def palette(n: int) -> list[tuple[int, int, int]]:
    """n visually spread colors; index i always maps to the same color."""
    colors = []
    for i in range(n):
        r, g, b = colorsys.hsv_to_rgb((i * _GOLDEN) % 1.0, 0.65, 0.95)
        colors.append((int(255 * r), int(255 * g), int(255 * b)))
    return colors


def render_labeling(labels: np.ndarray) -> np.ndarray:
    """Color every cluster; at most one color per distinct label."""
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    colors = palette(len(uniq))
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    for idx, value in enumerate(uniq):
        out[labels == value] = colors[idx]
    return out


def render_overlay(base: np.ndarray | None, masks: list[np.ndarray],
                   shape: tuple[int, int] | None = None) -> np.ndarray:
    """Blend one color per mask over the base image (gray canvas if None)."""
    if base is None:
        if shape is None:
            if not masks:
                raise ValueError("need a base image, a shape, or masks")
            shape = masks[0].shape
        base = np.full(shape + (3,), 48, dtype=np.uint8)
    out = np.array(base, dtype=np.uint8, copy=True)
    if out.ndim == 2:
        out = np.stack([out] * 3, axis=-1)
    colors = palette(len(masks))
    for mask, color in zip(masks, colors):
        region = np.asarray(mask, dtype=bool)
        out[region] = (0.5 * out[region] + 0.5 * np.array(color)).astype(np.uint8)
    return out


def save_png(path, rgb: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
