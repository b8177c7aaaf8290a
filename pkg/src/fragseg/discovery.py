"""Fragments, selection and instance regrouping on the patch grid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import DEFAULT_THETA1, DEFAULT_THETA2
from .semantics import ActivationMap

# 8-connectivity
_STRUCT = np.ones((3, 3), dtype=bool)


@dataclass
class Fragment:
    """One connected piece of one cluster."""

    id: int
    cluster: int
    cells: np.ndarray  # (n, 2) row/col indices, row-major order
    area: int
    bbox: tuple[int, int, int, int]  # inclusive patch box, x = row
    bbox_area: int
    mean_activation: dict[str, float] = field(default_factory=dict)


@dataclass
class SelectionVector:
    category: str
    flags: np.ndarray  # bool, aligned with the fragment list
    theta1: float
    theta2: float


@dataclass
class InstanceDetection:
    """A connected union of selected fragments for one category."""

    category: str
    mask: np.ndarray  # bool, patch grid
    box: tuple[int, int, int, int]  # inclusive patch box, x = row
    confidence: float
    fragment_ids: list[int]


def split_fragments(labels: np.ndarray) -> list[Fragment]:
    """Break every cluster into its 8-connected pieces.

    Fragments are ordered by cluster id, then component scan order, and
    together partition the grid.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("labels must be a 2-D grid")
    out: list[Fragment] = []
    for cluster in np.unique(labels):
        comp, n = ndimage.label(labels == cluster, structure=_STRUCT)
        for c, sl in enumerate(ndimage.find_objects(comp), start=1):
            rr, cc = np.nonzero(comp[sl] == c)
            cells = np.column_stack((rr + sl[0].start, cc + sl[1].start))
            bbox = (sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1)
            bh = bbox[2] - bbox[0] + 1
            bw = bbox[3] - bbox[1] + 1
            out.append(Fragment(
                id=len(out),
                cluster=int(cluster),
                cells=cells,
                area=int(cells.shape[0]),
                bbox=bbox,
                bbox_area=bh * bw,
            ))
    return out


def boundary_score(frag: Fragment) -> float:
    """Enclosing-box to occupied-area ratio; thin ribbons score high."""
    return frag.bbox_area / frag.area


def fragment_mean_activation(frag: Fragment, amap: ActivationMap) -> float:
    """Mean normalized activation over the fragment's cells (cached)."""
    if amap.category not in frag.mean_activation:
        value = float(amap.norm[frag.cells[:, 0], frag.cells[:, 1]].mean())
        frag.mean_activation[amap.category] = value
    return frag.mean_activation[amap.category]


def select_fragments(frags: list[Fragment], amap: ActivationMap,
                     theta1: float = DEFAULT_THETA1,
                     theta2: float = DEFAULT_THETA2) -> SelectionVector:
    """Keep fragments that activate strongly and are not box-filling ribbons.

    A fragment is selected iff mean normalized activation >= theta1 and
    bbox_area / area <= theta2.
    """
    flags = np.zeros(len(frags), dtype=bool)
    for idx, frag in enumerate(frags):
        mean_act = fragment_mean_activation(frag, amap)
        flags[idx] = mean_act >= theta1 and boundary_score(frag) <= theta2
    return SelectionVector(category=amap.category, flags=flags,
                           theta1=float(theta1), theta2=float(theta2))


def objective_value(selection: SelectionVector, frags: list[Fragment], amap: ActivationMap) -> float:
    """Diagnostic score the selection heuristic approximates.

    Each selected fragment contributes (sum of activation over its cells)
    minus its area minus its boundary score; unselected fragments contribute
    nothing.
    """
    total = 0.0
    for frag, picked in zip(frags, selection.flags):
        if not picked:
            continue
        act_sum = float(amap.norm[frag.cells[:, 0], frag.cells[:, 1]].sum())
        total += act_sum - frag.area - frag.bbox_area / frag.area
    return total


def regroup_instances(selection: SelectionVector, frags: list[Fragment],
                      amap: ActivationMap) -> list[InstanceDetection]:
    """Merge touching selected fragments into instances.

    The union of selected cells is split into 8-connected components; each
    component becomes one instance whose confidence is the mean normalized
    activation over its cells.
    """
    shape = amap.norm.shape
    union = np.zeros(shape, dtype=bool)
    picked = [f for f, keep in zip(frags, selection.flags) if keep]
    for frag in picked:
        union[frag.cells[:, 0], frag.cells[:, 1]] = True
    comp, n = ndimage.label(union, structure=_STRUCT)
    members: dict[int, list[int]] = {c: [] for c in range(1, n + 1)}
    for frag in picked:
        c = int(comp[frag.cells[0, 0], frag.cells[0, 1]])
        members[c].append(frag.id)
    out: list[InstanceDetection] = []
    for c in range(1, n + 1):
        mask = comp == c
        rows, cols = np.nonzero(mask)
        box = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
        out.append(InstanceDetection(
            category=selection.category,
            mask=mask,
            box=box,
            confidence=float(amap.norm[mask].mean()),
            fragment_ids=members[c],
        ))
    return out


def upsample_mask(patch_mask: np.ndarray, patch_size: int, image_h: int, image_w: int) -> np.ndarray:
    """Nearest-neighbor expansion of a patch mask to pixel resolution."""
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    big = np.repeat(np.repeat(np.asarray(patch_mask, dtype=bool), patch_size, axis=0),
                    patch_size, axis=1)
    out = np.zeros((image_h, image_w), dtype=bool)
    h = min(image_h, big.shape[0])
    w = min(image_w, big.shape[1])
    out[:h, :w] = big[:h, :w]
    return out
