"""Refinement prompting: box plans, point plans, adoption of refined masks.

A plan document is {"image": id, "step": 1|2, "prompts": [...]} where each
prompt carries the detection index it refines. A result document mirrors the
plan with "rle" and "score" per entry. Plan files hold a list of documents,
one per image.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .tensorio import DetectionRecord, atomic_write_text, decode_rle, mask_tight_box


@dataclass
class Prompt:
    det: int
    kind: str  # "box" | "point"
    coords: tuple

    def to_json(self) -> dict:
        key = "xyxy" if self.kind == "box" else "xy"
        return {"det": self.det, "kind": self.kind, key: list(self.coords)}


@dataclass
class PromptPlan:
    image_id: str
    step: int
    prompts: list[Prompt]

    def to_json(self) -> dict:
        return {"image": self.image_id, "step": self.step,
                "prompts": [p.to_json() for p in self.prompts]}


def step1_boxes(image_id: str, detections: list[DetectionRecord]) -> PromptPlan:
    """One box prompt per detection, verbatim boxes, input order kept."""
    prompts = [Prompt(det=i, kind="box", coords=tuple(d.box)) for i, d in enumerate(detections)]
    return PromptPlan(image_id=image_id, step=1, prompts=prompts)


def _half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def step2_points(image_id: str, detections: list[DetectionRecord],
                 refined_boxes: dict[int, tuple[float, float, float, float]]) -> PromptPlan:
    """One point prompt per refined detection at the refined box center.

    Centers are rounded half-up per coordinate. Ids must reference existing
    detections.
    """
    for det_id in refined_boxes:
        if not 0 <= det_id < len(detections):
            raise KeyError(f"refined box references unknown detection {det_id}")
    prompts = []
    for det_id in sorted(refined_boxes):
        x_min, y_min, x_max, y_max = refined_boxes[det_id]
        cx = _half_up((x_min + x_max) / 2.0)
        cy = _half_up((y_min + y_max) / 2.0)
        prompts.append(Prompt(det=det_id, kind="point", coords=(cx, cy)))
    return PromptPlan(image_id=image_id, step=2, prompts=prompts)


def fuse_scores(a: float, b: float) -> float:
    """Geometric mean of two scores; both must sit in [0, 1]."""
    if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        raise ValueError(f"scores must lie in [0, 1], got {a} and {b}")
    return math.sqrt(a * b)


def adopt_refined_masks(detections: list[DetectionRecord],
                        refined: dict[int, tuple[dict, float]]) -> list[DetectionRecord]:
    """Swap in refined masks and fuse their scores with the originals.

    Detections without a refined entry pass through untouched, as do entries
    whose refined mask is empty (an empty mask has no enclosing box). Count
    and categories never change.
    """
    out: list[DetectionRecord] = []
    for idx, det in enumerate(detections):
        if idx not in refined:
            out.append(det)
            continue
        rle, score = refined[idx]
        mask = decode_rle(rle)
        if mask.shape != det.mask.shape:
            raise ValueError(f"refined mask shape {mask.shape} != image shape {det.mask.shape}")
        if mask_tight_box(mask) is None:
            out.append(det)
            continue
        out.append(DetectionRecord.from_mask(det.category, fuse_scores(det.score, score), mask))
    return out


def save_plans(path, plans: list[PromptPlan]) -> None:
    atomic_write_text(path, json.dumps([p.to_json() for p in plans], indent=2) + "\n")


def load_results(path) -> dict[str, tuple[int, dict[int, tuple[dict, float]]]]:
    """Read refined results keyed by image id: (step, {det: (rle, score)})."""
    with open(path) as fh:
        docs = json.load(fh)
    if isinstance(docs, dict):
        docs = [docs]
    out: dict[str, tuple[int, dict[int, tuple[dict, float]]]] = {}
    for doc in docs:
        entries = {int(e["det"]): (e["rle"], float(e["score"])) for e in doc["prompts"]}
        out[doc["image"]] = (int(doc["step"]), entries)
    return out


def refined_boxes_from_results(entries: dict[int, tuple[dict, float]]) -> dict[int, tuple[int, int, int, int]]:
    """Tight boxes of refined masks, skipping empty ones."""
    boxes = {}
    for det_id, (rle, _score) in entries.items():
        box = mask_tight_box(decode_rle(rle))
        if box is not None:
            boxes[det_id] = box
    return boxes
