"""Execute prompt plans: one refined mask plus score per box or point prompt.

The default backend is a color-model segmenter: good enough to close the
two-step loop on unambiguous regions, fully deterministic, and free of model
downloads. A promptable segmentation model can be slotted in behind the same
entry point (`backend="sam"`) when its package and checkpoint are present.

Boxes arrive as [x0, y0, x1, y1] with x = column, half-open; points as
[x, y]. Masks returned are full-canvas, RLE-encoded in the core's schema.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from fragseg.tensorio import atomic_write_text, encode_rle

from .models import ModelUnavailable

BATCH = 32
_STRUCT = np.ones((3, 3), dtype=bool)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def image_lookup(images_dir) -> dict[str, Path]:
    """Map file stems to paths for every image in a directory."""
    table: dict[str, Path] = {}
    for path in sorted(Path(images_dir).iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES:
            table[path.stem] = path
    return table


def _largest_overlap_component(cand: np.ndarray, box_mask: np.ndarray) -> np.ndarray:
    comp, n = ndimage.label(cand, structure=_STRUCT)
    if n == 0:
        return np.zeros_like(cand)
    overlaps = ndimage.sum_labels(box_mask, comp, index=np.arange(1, n + 1))
    # no component touches the box -> nothing trustworthy to return
    if overlaps.max() == 0:
        return np.zeros_like(cand)
    return comp == (int(np.argmax(overlaps)) + 1)


def _dice(mask: np.ndarray, other: np.ndarray) -> float:
    denom = int(mask.sum()) + int(other.sum())
    if denom == 0:
        return 0.0
    return float(2.0 * np.logical_and(mask, other).sum() / denom)


def refine_box(image: np.ndarray, box) -> tuple[np.ndarray, float]:
    """Foreground/background color split inside a dilated box window."""
    h, w = image.shape[:2]
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    x0, x1 = max(0, x0), min(w, x1)
    y0, y1 = max(0, y0), min(h, y1)
    if x0 >= x1 or y0 >= y1:
        return np.zeros((h, w), dtype=bool), 0.0
    pad_y = max(4, (y1 - y0) // 4)
    pad_x = max(4, (x1 - x0) // 4)
    wy0, wy1 = max(0, y0 - pad_y), min(h, y1 + pad_y)
    wx0, wx1 = max(0, x0 - pad_x), min(w, x1 + pad_x)

    img = image.astype(np.float64)
    box_mask = np.zeros((h, w), dtype=bool)
    box_mask[y0:y1, x0:x1] = True
    window = np.zeros((h, w), dtype=bool)
    window[wy0:wy1, wx0:wx1] = True
    ring = window & ~box_mask
    if not ring.any():
        ring = ~box_mask
    fg = img[box_mask].mean(axis=0)
    bg = img[ring].mean(axis=0) if ring.any() else 255.0 - fg

    d_fg = ((img - fg) ** 2).sum(axis=-1)
    d_bg = ((img - bg) ** 2).sum(axis=-1)
    cand = window & (d_fg < d_bg)
    mask = _largest_overlap_component(cand, box_mask)
    return mask, _dice(mask, box_mask)


def refine_point(image: np.ndarray, point) -> tuple[np.ndarray, float]:
    """Grow the component of pixels near the seed color around the point."""
    h, w = image.shape[:2]
    x, y = (int(round(v)) for v in point)
    if not (0 <= x < w and 0 <= y < h):
        return np.zeros((h, w), dtype=bool), 0.0
    img = image.astype(np.float64)
    ny0, ny1 = max(0, y - 1), min(h, y + 2)
    nx0, nx1 = max(0, x - 1), min(w, x + 2)
    seed = img[ny0:ny1, nx0:nx1].reshape(-1, img.shape[-1]).mean(axis=0)
    ly0, ly1 = max(0, y - 3), min(h, y + 4)
    lx0, lx1 = max(0, x - 3), min(w, x + 4)
    local_std = img[ly0:ly1, lx0:lx1].reshape(-1, img.shape[-1]).std(axis=0).max()
    tol = max(12.0, 3.0 * local_std)

    cand = ((img - seed) ** 2).sum(axis=-1) <= tol * tol
    if not cand[y, x]:
        return np.zeros((h, w), dtype=bool), 0.0
    comp, _ = ndimage.label(cand, structure=_STRUCT)
    mask = comp == comp[y, x]
    rows, cols = np.nonzero(mask)
    bbox_area = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
    return mask, float(mask.sum() / bbox_area)


def _refine_prompt(image: np.ndarray, prompt: dict) -> tuple[np.ndarray, float]:
    if prompt["kind"] == "box":
        return refine_box(image, prompt["xyxy"])
    if prompt["kind"] == "point":
        return refine_point(image, prompt["xy"])
    raise ValueError(f"unknown prompt kind {prompt['kind']!r}")


def refine_plans(plans: list[dict], images: dict[str, Path],
                 backend: str = "color") -> list[dict]:
    """One result document per plan document, prompt order preserved."""
    if backend == "sam":
        raise ModelUnavailable(
            "sam backend needs the segment-anything package and a checkpoint; "
            "neither is reachable here")
    if backend != "color":
        raise ValueError(f"unknown refine backend {backend!r}")
    results = []
    for plan in plans:
        image_id = plan["image"]
        if image_id not in images:
            raise KeyError(f"plan references unknown image {image_id!r}")
        arr = np.asarray(Image.open(images[image_id]).convert("RGB"))
        entries = []
        prompts = plan["prompts"]
        for start in range(0, len(prompts), BATCH):
            for prompt in prompts[start:start + BATCH]:
                mask, score = _refine_prompt(arr, prompt)
                entries.append({"det": prompt["det"], "rle": encode_rle(mask),
                                "score": round(float(score), 6)})
        results.append({"image": image_id, "step": plan["step"], "prompts": entries})
    return results


def refine_file(plan_path, images_dir, out_path, backend: str = "color") -> None:
    with open(plan_path) as fh:
        plans = json.load(fh)
    if isinstance(plans, dict):
        plans = [plans]
    results = refine_plans(plans, image_lookup(images_dir), backend)
    atomic_write_text(out_path, json.dumps(results, indent=2) + "\n")
