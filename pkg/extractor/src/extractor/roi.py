"""Per-detection category scores, with and without re-encoding crops.

The fast path pools the image's final feature map over each detection box
(RoIAlign) and runs the pooled grid through the same attention pooling the
whole image uses, so one trunk pass serves every box. The reference path
crops pixels and re-encodes from scratch. Boxes must live on the same canvas
the features were dumped from, i.e. pass the dump's resolution.

ROI grids match the source map's grid, so a box covering the full canvas
reproduces the image embedding exactly rather than approximately.
"""
from __future__ import annotations

import numpy as np
import torch
from PIL import Image
from torchvision.ops import roi_align

from .models import DEFAULT_VARIANT, _resize, load_variant, pixels_to_tensor

LOGIT_SCALE = 100.0


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max())
    return z / z.sum()


def _check_box(box, width, height):
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise ValueError(f"box {box} outside {width}x{height} image")


def _roi_scores(model, final: torch.Tensor, boxes, width, height,
                text: np.ndarray) -> list[list[float]]:
    c, fh, fw = final.shape
    sx, sy = fw / width, fh / height
    scaled = torch.tensor([[x0 * sx, y0 * sy, x1 * sx, y1 * sy]
                           for x0, y0, x1, y1 in boxes], dtype=final.dtype)
    pooled = roi_align(final[None], [scaled], output_size=(fh, fw), aligned=True)
    out = []
    for grid in pooled:
        emb = model.embed_map(grid)
        out.append(_softmax(LOGIT_SCALE * (text @ emb)).tolist())
    return out


def _crop_scores(model, canvas: np.ndarray, boxes, text: np.ndarray,
                 crop_resolution: int) -> list[list[float]]:
    out = []
    for x0, y0, x1, y1 in boxes:
        crop = canvas[int(y0):int(y1), int(x0):int(x1)]
        crop_img = _resize(Image.fromarray(crop), crop_resolution, model.stride)
        emb = model.encode_image(pixels_to_tensor(np.asarray(crop_img)))
        out.append(_softmax(LOGIT_SCALE * (text @ emb)).tolist())
    return out


def classify_detections(detections, images, categories, variant=DEFAULT_VARIANT,
                        resolution=2048, method="roi", seed=0,
                        crop_resolution=128) -> dict:
    """Score every detection against the categories.

    detections: [(image_id, [DetectionRecord])]; images: id -> path.
    Returns {"categories", "method", "images": [{"id", "scores", "argmax"}]}.
    """
    if method not in ("roi", "crop"):
        raise ValueError(f"unknown method {method!r}")
    model = load_variant(variant, seed=seed)
    text = model.encode_texts(list(categories))
    doc = {"categories": list(categories), "method": method, "images": []}
    for image_id, records in detections:
        if image_id not in images:
            raise KeyError(f"detections reference unknown image {image_id!r}")
        resized = _resize(Image.open(images[image_id]).convert("RGB"),
                          resolution, model.stride)
        canvas = np.asarray(resized)
        height, width = canvas.shape[:2]
        boxes = [r.box for r in records]
        for box in boxes:
            _check_box(box, width, height)
        if not boxes:
            scores: list[list[float]] = []
        elif method == "roi":
            final = model.final_map(pixels_to_tensor(canvas))
            scores = _roi_scores(model, final, boxes, width, height, text)
        else:
            scores = _crop_scores(model, canvas, boxes, text, crop_resolution)
        doc["images"].append({
            "id": image_id,
            "scores": scores,
            "argmax": [doc["categories"][int(np.argmax(s))] for s in scores],
        })
    return doc
