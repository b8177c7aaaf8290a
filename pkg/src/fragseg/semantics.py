"""Category-conditioned maps: activations, binary priors, seed heatmaps.

Patch-grid boxes here are (x_min, y_min, x_max, y_max) with inclusive bounds
where x indexes rows (first grid axis) and y indexes columns, matching the
distance form used by seed_heatmap. Pixel-space detection boxes elsewhere use
the usual x = column convention; the two never mix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DEFAULT_SIM_THRESHOLD, DEFAULT_TAU, K_FLOOR

_NORM_ATOL = 1e-5


@dataclass
class CategorySet:
    """Category names with their text embeddings plus one image embedding.

    All embeddings must arrive L2-normalized; construction checks to 1e-5.
    """

    names: list[str]
    text_embeddings: np.ndarray  # (C, D)
    image_embedding: np.ndarray  # (D,)

    def __post_init__(self) -> None:
        self.text_embeddings = np.asarray(self.text_embeddings, dtype=np.float64)
        self.image_embedding = np.asarray(self.image_embedding, dtype=np.float64)
        if self.text_embeddings.ndim != 2 or len(self.names) != self.text_embeddings.shape[0]:
            raise ValueError("need one text embedding per category name")
        if self.image_embedding.ndim != 1 or self.image_embedding.shape[0] != self.text_embeddings.shape[1]:
            raise ValueError("image embedding dimension mismatch")
        norms = np.linalg.norm(self.text_embeddings, axis=1)
        if not np.allclose(norms, 1.0, atol=_NORM_ATOL):
            raise ValueError("text embeddings must be L2-normalized")
        if not np.isclose(np.linalg.norm(self.image_embedding), 1.0, atol=_NORM_ATOL):
            raise ValueError("image embedding must be L2-normalized")


@dataclass
class ActivationMap:
    """Per-cell similarity to one category, raw and min-max normalized."""

    category: str
    raw: np.ndarray   # (H, W), cosine values
    norm: np.ndarray  # (H, W), in [0, 1]
    zero_feature_cells: int = 0


@dataclass
class SeedHeatmap:
    """exp(-d / 2 sigma^2) field peaking at the corners of a patch-grid box."""

    category: str
    box: tuple[int, int, int, int]
    sigma: float
    values: np.ndarray  # (H, W), in (0, 1]


def image_similarity(image_embedding: np.ndarray, text_embedding: np.ndarray) -> float:
    """Cosine similarity between one image and one text embedding."""
    a = np.asarray(image_embedding, dtype=np.float64).ravel()
    b = np.asarray(text_embedding, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm embedding has no direction")
    return float(np.dot(a, b) / (na * nb))


def activation_map(patch_features: np.ndarray, text_embedding: np.ndarray, category: str) -> ActivationMap:
    """Cosine of every patch feature against one text embedding.

    Zero-norm patch features score 0 and are counted, not raised on; the
    normalized view maps a constant raw map to all 0.5 so downstream
    thresholds stay well-defined.
    """
    feats = np.asarray(patch_features, dtype=np.float64)
    if feats.ndim != 3:
        raise ValueError("patch features must be (H, W, D)")
    t = np.asarray(text_embedding, dtype=np.float64).ravel()
    tn = np.linalg.norm(t)
    if tn == 0.0:
        raise ValueError("zero-norm text embedding")
    norms = np.linalg.norm(feats, axis=2)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    raw = feats @ t / (safe * tn)
    raw[zero] = 0.0
    raw = np.clip(raw, -1.0, 1.0)
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        norm = (raw - lo) / (hi - lo)
    else:
        norm = np.full_like(raw, 0.5)
    return ActivationMap(category=category, raw=raw, norm=norm, zero_feature_cells=int(zero.sum()))


def binarize(amap: ActivationMap, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Binary prior: cells whose normalized activation reaches tau * mean.

    tau = 0 keeps every cell (norm is non-negative).
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return amap.norm >= tau * amap.norm.mean()


def enclosing_box(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Inclusive box around true cells, (x_min, y_min, x_max, y_max), x = row."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def seed_heatmap(category: str, box: tuple[int, int, int, int], shape: tuple[int, int], sigma: float) -> SeedHeatmap:
    """Gaussian-of-distance field whose peaks sit on the box corners.

    d(i, j) = min((i - x_min)^2, (i - x_max)^2) + min((j - y_min)^2, (j - y_max)^2)
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = shape
    x_min, y_min, x_max, y_max = box
    if not (0 <= x_min <= x_max < h and 0 <= y_min <= y_max < w):
        raise ValueError(f"box {box} does not fit a {h}x{w} grid")
    i = np.arange(h, dtype=np.float64)[:, None]
    j = np.arange(w, dtype=np.float64)[None, :]
    di = np.minimum((i - x_min) ** 2, (i - x_max) ** 2)
    dj = np.minimum((j - y_min) ** 2, (j - y_max) ** 2)
    values = np.exp(-(di + dj) / (2.0 * sigma * sigma))
    return SeedHeatmap(category=category, box=tuple(int(v) for v in box), sigma=float(sigma), values=values)


def cluster_count(categories: CategorySet, sim_threshold: float = DEFAULT_SIM_THRESHOLD,
                  k_floor: int = K_FLOOR) -> tuple[int, int]:
    """(K, Q): Q categories pass the image-level gate, K = max(floor, (Q+1)^3)."""
    sims = categories.text_embeddings @ categories.image_embedding
    q = int(np.count_nonzero(sims > sim_threshold))
    return max(k_floor, (q + 1) ** 3), q
