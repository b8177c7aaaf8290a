"""Detection quality metrics: greedy matching, interpolated AP, AR.

Conventions pinned here:
- matching is greedy in score order (ties by input order), each ground-truth
  instance matched at most once, best unmatched candidate by IoU with ties to
  the lowest index, TP iff that IoU >= threshold;
- AP uses 101-point interpolation over recall 0.00..1.00 and averages over
  IoU thresholds 0.50:0.05:0.95;
- size buckets are measured on ground-truth pixel-mask areas with the
  32^2 / 96^2 cutoffs; for a bucketed AP, detections matching an
  out-of-bucket instance in the unrestricted match at the same threshold are
  dropped rather than counted as false positives;
- AR@k keeps the k highest-scoring detections per image across categories
  and reports the pooled fraction of instances matched, averaged over the
  same IoU thresholds;
- a category (or bucket) with zero ground-truth instances is excluded from
  means, never counted as zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensorio import DetectionRecord, decode_rle, mask_tight_box

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
SMALL_MAX = 32 * 32    # exclusive upper bound for "small"
LARGE_MIN = 96 * 96    # exclusive lower bound for "large"
AGNOSTIC_LABEL = "object"


@dataclass
class GroundTruthInstance:
    category: str
    mask: np.ndarray
    box: tuple[int, int, int, int]
    area: int

    @property
    def bucket(self) -> str:
        if self.area < SMALL_MAX:
            return "small"
        if self.area > LARGE_MIN:
            return "large"
        return "medium"

    @classmethod
    def from_mask(cls, category: str, mask: np.ndarray) -> "GroundTruthInstance":
        box = mask_tight_box(mask)
        if box is None:
            raise ValueError("ground-truth mask is empty")
        return cls(category=category, mask=np.asarray(mask, dtype=bool),
                   box=box, area=int(mask.sum()))


def load_ground_truth(path) -> list[tuple[str, list[GroundTruthInstance]]]:
    """Read a ground-truth set stored in the detections JSON schema."""
    with open(path) as fh:
        doc = json.load(fh)
    out = []
    for entry in doc["images"]:
        gts = [GroundTruthInstance.from_mask(g["category"], decode_rle(g["rle"]))
               for g in entry["detections"]]
        out.append((entry["id"], gts))
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(inter / union)


def box_iou(a, b) -> float:
    """IoU of two half-open (x_min, y_min, x_max, y_max) boxes."""
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0, a[2] - a[0]) * max(0, a[3] - a[1])
    area_b = max(0, b[2] - b[0]) * max(0, b[3] - b[1])
    union = area_a + area_b - inter
    if union == 0:
        return 0.0
    return float(inter / union)


def _pair_iou(det: DetectionRecord, gt: GroundTruthInstance, mode: str) -> float:
    if mode == "mask":
        return mask_iou(det.mask, gt.mask)
    if mode == "box":
        return box_iou(det.box, gt.box)
    raise ValueError(f"unknown mode {mode!r}")


def match_detections(dets: list[DetectionRecord], gts: list[GroundTruthInstance],
                     iou_threshold: float, mode: str = "mask",
                     class_aware: bool = True) -> list[tuple[int, bool, int | None]]:
    """Greedy one-image matching; returns (det index, is TP, gt index) rows
    in score-descending processing order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    rows: list[tuple[int, bool, int | None]] = []
    for di in order:
        det = dets[di]
        best_iou, best_gt = 0.0, None
        for gi, gt in enumerate(gts):
            if taken[gi]:
                continue
            if class_aware and gt.category != det.category:
                continue
            iou = _pair_iou(det, gt, mode)
            if iou > best_iou:
                best_iou, best_gt = iou, gi
        if best_gt is not None and best_iou >= iou_threshold:
            taken[best_gt] = True
            rows.append((di, True, best_gt))
        else:
            rows.append((di, False, None))
    return rows


def average_precision(tp_flags: list[bool], num_gt: int) -> float | None:
    """101-point interpolated AP from score-ordered TP/FP flags.

    Returns None when there is nothing to detect (num_gt == 0).
    """
    if num_gt == 0:
        return None
    if not tp_flags:
        return 0.0
    flags = np.asarray(tp_flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    samples = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, samples, side="left")
    valid = idx < len(envelope)
    interp = np.where(valid, envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(interp.mean())


def _score_ordered_flags(per_image_rows: list[tuple[list[DetectionRecord], list]]) -> list[bool]:
    """Merge per-image match rows into one global score-descending flag list."""
    pool = []
    for img_idx, (dets, rows) in enumerate(per_image_rows):
        for order_idx, (di, is_tp, _gi) in enumerate(rows):
            pool.append((-dets[di].score, img_idx, order_idx, is_tp))
    pool.sort(key=lambda t: (t[0], t[1], t[2]))
    return [t[3] for t in pool]


@dataclass
class EvalReport:
    ap: float | None
    ap50: float | None
    ap75: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    ar10: float | None
    ar100: float | None
    per_category: dict[str, dict[str, float | None]]

    def to_json(self) -> dict:
        return {
            "AP": self.ap, "AP50": self.ap50, "AP75": self.ap75,
            "AP_small": self.ap_small, "AP_medium": self.ap_medium, "AP_large": self.ap_large,
            "AR@10": self.ar10, "AR@100": self.ar100,
            "per_category": self.per_category,
        }

    def format_table(self) -> str:
        def fmt(v):
            return "   -" if v is None else f"{100 * v:5.1f}"
        head = self.to_json()
        lines = ["metric        value"]
        for key in ("AP", "AP50", "AP75", "AP_small", "AP_medium", "AP_large", "AR@10", "AR@100"):
            lines.append(f"{key:<12} {fmt(head[key])}")
        for cat, vals in self.per_category.items():
            lines.append(f"  {cat:<10} AP {fmt(vals['AP'])}  AP50 {fmt(vals['AP50'])}  "
                         f"AP75 {fmt(vals['AP75'])}  AR@100 {fmt(vals['AR@100'])}")
        return "\n".join(lines)


def _mean_defined(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    return float(np.mean(defined))


def evaluate(det_images: list[tuple[str, list[DetectionRecord]]],
             gt_images: list[tuple[str, list[GroundTruthInstance]]],
             mode: str = "mask", class_agnostic: bool = False) -> EvalReport:
    """Full report over an image set; detections may omit images, never add them."""
    gt_ids = {image_id for image_id, _ in gt_images}
    for image_id, _ in det_images:
        if image_id not in gt_ids:
            raise ValueError(f"unknown image id in detections: {image_id!r}")
    det_by_id = {image_id: dets for image_id, dets in det_images}

    if class_agnostic:
        def relabel_det(d):
            return DetectionRecord(category=AGNOSTIC_LABEL, score=d.score, mask=d.mask, box=d.box)

        def relabel_gt(g):
            return GroundTruthInstance(category=AGNOSTIC_LABEL, mask=g.mask, box=g.box, area=g.area)

        gt_images = [(i, [relabel_gt(g) for g in gts]) for i, gts in gt_images]
        det_by_id = {i: [relabel_det(d) for d in dets] for i, dets in det_by_id.items()}

    images = [(image_id, det_by_id.get(image_id, []), gts) for image_id, gts in gt_images]
    categories = sorted({g.category for _, _, gts in images for g in gts})
    class_aware = not class_agnostic

    def ap_for(category: str, threshold: float, bucket: str | None) -> float | None:
        per_image_rows = []
        num_gt = 0
        for _, dets, gts in images:
            cat_dets = [d for d in dets if d.category == category]
            cat_gts = [g for g in gts if g.category == category]
            if bucket is None:
                keep_dets, keep_gts = cat_dets, cat_gts
            else:
                full = match_detections(cat_dets, cat_gts, threshold, mode, class_aware)
                dropped = {di for di, is_tp, gi in full
                           if is_tp and cat_gts[gi].bucket != bucket}
                keep_dets = [d for i, d in enumerate(cat_dets) if i not in dropped]
                keep_gts = [g for g in cat_gts if g.bucket == bucket]
            rows = match_detections(keep_dets, keep_gts, threshold, mode, class_aware)
            per_image_rows.append((keep_dets, rows))
            num_gt += len(keep_gts)
        if num_gt == 0:
            return None
        return average_precision(_score_ordered_flags(per_image_rows), num_gt)

    def mean_ap(threshold: float, bucket: str | None = None) -> float | None:
        return _mean_defined([ap_for(c, threshold, bucket) for c in categories])

    def ar_at(k: int, category: str | None = None) -> float | None:
        fractions = []
        for threshold in IOU_THRESHOLDS:
            matched = 0
            total = 0
            for _, dets, gts in images:
                order = sorted(range(len(dets)), key=lambda i: -dets[i].score)[:k]
                top = [dets[i] for i in sorted(order)]
                rows = match_detections(top, gts, threshold, mode, class_aware)
                hit = {gi for _, is_tp, gi in rows if is_tp}
                for gi, g in enumerate(gts):
                    if category is not None and g.category != category:
                        continue
                    total += 1
                    matched += gi in hit
            if total == 0:
                return None
            fractions.append(matched / total)
        return float(np.mean(fractions))

    ap_by_cat_t = {c: {t: ap_for(c, t, None) for t in IOU_THRESHOLDS} for c in categories}
    per_category = {
        c: {
            "AP": _mean_defined(list(ap_by_cat_t[c].values())),
            "AP50": ap_by_cat_t[c][0.5],
            "AP75": ap_by_cat_t[c][0.75],
            "AR@100": ar_at(100, c),
        }
        for c in categories
    }
    return EvalReport(
        ap=_mean_defined([_mean_defined([ap_by_cat_t[c][t] for c in categories]) for t in IOU_THRESHOLDS]),
        ap50=_mean_defined([ap_by_cat_t[c][0.5] for c in categories]),
        ap75=_mean_defined([ap_by_cat_t[c][0.75] for c in categories]),
        ap_small=_mean_defined([mean_ap(t, "small") for t in IOU_THRESHOLDS]),
        ap_medium=_mean_defined([mean_ap(t, "medium") for t in IOU_THRESHOLDS]),
        ap_large=_mean_defined([mean_ap(t, "large") for t in IOU_THRESHOLDS]),
        ar10=ar_at(10),
        ar100=ar_at(100),
        per_category=per_category,
    )
