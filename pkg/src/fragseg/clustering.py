"""Seeded clustering of mid-layer patch features."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT_KMEANS_MAX_ITER, DEFAULT_KMEANS_REL_TOL
from .semantics import SeedHeatmap

log = logging.getLogger(__name__)


@dataclass
class SeedDistribution:
    """Normalized cell probabilities for drawing cluster seeds."""

    p: np.ndarray  # (H, W), sums to 1, strictly positive
    categories: list[str]


@dataclass
class FeaturePyramid:
    """Ordered named feature stages for one image, coarse to final."""

    stages: list[tuple[str, np.ndarray]]  # each (H, W, D)
    mid_stage: str | None = None


@dataclass
class ClusterLabeling:
    labels: np.ndarray    # (H, W) int
    centers: np.ndarray   # (K, D)
    inertia: float
    iterations: int
    inertia_history: list[float] = field(default_factory=list)


def combine_heatmaps(heatmaps: list[SeedHeatmap]) -> SeedDistribution:
    """Uniform-weight sum of per-category heatmaps, normalized to a pmf."""
    if not heatmaps:
        raise ValueError("no heatmaps to combine")
    shape = heatmaps[0].values.shape
    total = np.zeros(shape, dtype=np.float64)
    for hm in heatmaps:
        if hm.values.shape != shape:
            raise ValueError("heatmap shapes differ")
        total += hm.values
    s = total.sum()
    if s <= 0:
        raise ValueError("heatmap mass is zero")
    return SeedDistribution(p=total / s, categories=[hm.category for hm in heatmaps])


def sample_centers(dist: SeedDistribution, k: int, rng_seed: int) -> list[tuple[int, int]]:
    """Draw k distinct cells, each step proportional to the remaining mass.

    Sequential successive sampling: draw one cell, zero its mass, repeat.
    k is capped at the cell count (the cap is logged).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    h, w = dist.p.shape
    n = h * w
    if k > n:
        log.warning("requested %d centers on a %dx%d grid; capping at %d", k, h, w, n)
        k = n
    p = dist.p.ravel().astype(np.float64).copy()
    rng = np.random.default_rng(rng_seed)
    out: list[tuple[int, int]] = []
    for _ in range(k):
        cum = np.cumsum(p)
        r = rng.random() * cum[-1]
        idx = int(np.searchsorted(cum, r, side="right"))
        idx = min(idx, n - 1)
        out.append((idx // w, idx % w))
        p[idx] = 0.0
    return out


def kmeans(features: np.ndarray, init_positions: list[tuple[int, int]],
           max_iter: int = DEFAULT_KMEANS_MAX_ITER,
           rel_tol: float = DEFAULT_KMEANS_REL_TOL) -> ClusterLabeling:
    """Lloyd iterations from seed cells, squared Euclidean metric.

    Assignment ties go to the lowest center index. An empty cluster is
    reseeded at the cell farthest from its nearest center. When two reseed
    rounds in a row see zero inertia the input has no variance left to split,
    so all cells are merged into label 0.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise ValueError("features must be (H, W, D)")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features contain non-finite values")
    h, w, d = feats.shape
    if len(init_positions) == 0:
        raise ValueError("need at least one init position")
    if len(set(init_positions)) != len(init_positions):
        raise ValueError("init positions must be distinct")
    for (i, j) in init_positions:
        if not (0 <= i < h and 0 <= j < w):
            raise ValueError(f"init position {(i, j)} outside {h}x{w} grid")

    x = feats.reshape(-1, d)
    n, k = x.shape[0], len(init_positions)
    centers = x[[i * w + j for i, j in init_positions]].copy()
    x_sq = (x * x).sum(axis=1)
    rows = np.arange(n)
    d2 = np.empty((n, k), dtype=np.float64)
    sums = np.empty((k, d), dtype=np.float64)

    def distances() -> None:
        np.matmul(x, centers.T, out=d2)
        np.multiply(d2, -2.0, out=d2)
        np.add(d2, x_sq[:, None], out=d2)
        np.add(d2, (centers * centers).sum(axis=1)[None, :], out=d2)
        np.maximum(d2, 0.0, out=d2)

    prev_inertia = np.inf
    history: list[float] = []
    zero_reseed_rounds = 0
    labels = np.zeros(n, dtype=np.int64)

    for _ in range(max_iter):
        distances()
        labels = np.argmin(d2, axis=1)  # ties resolve to the lowest index
        dmin = d2[rows, labels]
        inertia = float(dmin.sum())
        assert inertia <= prev_inertia * (1 + 1e-9) + 1e-9, "inertia increased"
        history.append(inertia)

        rel = abs(prev_inertia - inertia) / max(prev_inertia, 1e-12)
        if rel < rel_tol:
            break
        prev_inertia = inertia

        counts = np.bincount(labels, minlength=k)
        empties = np.flatnonzero(counts == 0)
        for e in empties:
            far = int(np.argmax(dmin))
            centers[e] = x[far]
            dmin[far] = 0.0
        if empties.size and inertia == 0.0:
            zero_reseed_rounds += 1
            if zero_reseed_rounds >= 2:
                labels = np.zeros(n, dtype=np.int64)
                return ClusterLabeling(labels.reshape(h, w), centers, 0.0, len(history), history)
        else:
            zero_reseed_rounds = 0

        for dim_i in range(d):
            sums[:, dim_i] = np.bincount(labels, weights=x[:, dim_i], minlength=k)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
    else:
        # max_iter exhausted: one consistency pass so labels match centers
        distances()
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[rows, labels].sum())
        history.append(inertia)

    return ClusterLabeling(labels.reshape(h, w), centers, history[-1], len(history), history)


def cluster_feature_source(pyramid: FeaturePyramid) -> np.ndarray:
    """L2-normalized cells of the designated mid stage (second-to-last by default)."""
    names = [name for name, _ in pyramid.stages]
    if pyramid.mid_stage is not None:
        if pyramid.mid_stage not in names:
            raise ValueError(f"stage {pyramid.mid_stage!r} not in pyramid {names}")
        arr = dict(pyramid.stages)[pyramid.mid_stage]
    else:
        if len(pyramid.stages) < 2:
            raise ValueError("pyramid needs two stages or an explicit mid_stage")
        arr = pyramid.stages[-2][1]
    feats = np.asarray(arr, dtype=np.float64)
    if feats.ndim != 3:
        raise ValueError("stage features must be (H, W, D)")
    norms = np.linalg.norm(feats, axis=2, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm feature cell cannot be normalized")
    return feats / norms
