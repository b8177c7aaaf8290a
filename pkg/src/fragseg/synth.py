"""Synthetic scenes with known instances for closed-loop testing.

A scene is a patch-grid feature map built from unit prototype vectors:
instance interiors carry their category prototype, a ribbon of configurable
width along every instance perimeter carries a shared edge prototype, and the
rest carries a background prototype. Gaussian noise with per-cell marginal
N(0, sigma_f) is added on top; the field can be spatially correlated, which
mimics how real mid-layer features vary smoothly (noise_corr = 0 gives white
noise).

Ground truth masks are the interiors: those are the cells a discovery run can
actually attribute to the category. Prototypes are re-sampled until every
pairwise cosine falls inside a negative band, keeping non-target cells low in
the min-max normalized activation maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .semantics import ActivationMap, CategorySet, activation_map

_STRUCT = np.ones((3, 3), dtype=bool)
DEFAULT_COS_BAND = (-0.35, -0.05)


@dataclass
class InstanceSpec:
    category: str
    shape: str  # "rect" | "ellipse" | "blob"
    params: dict


@dataclass
class SceneSpec:
    height: int
    width: int
    dim: int
    categories: list[str]
    instances: list[InstanceSpec]
    boundary_width: int = 1
    noise_sigma: float = 0.0
    noise_corr: float = 2.0
    seed: int = 0
    cos_band: tuple[float, float] = DEFAULT_COS_BAND
    # one row per category plus edge and background rows, in that order;
    # None means sample fresh from the scene seed
    prototypes: np.ndarray | None = None


@dataclass
class Scene:
    spec: SceneSpec
    features: np.ndarray            # (H, W, D)
    prototypes: np.ndarray          # (C + 2, D): categories, edge, background
    instance_masks: list[np.ndarray]
    instance_categories: list[str]
    boundary_mask: np.ndarray
    background_mask: np.ndarray
    category_set: CategorySet
    activation_maps: dict[str, ActivationMap] = field(default_factory=dict)


def sample_prototypes(rng: np.random.Generator, count: int, dim: int,
                      band: tuple[float, float] = DEFAULT_COS_BAND,
                      max_tries: int = 100_000) -> np.ndarray:
    """Unit vectors re-sampled until every pairwise cosine sits in band."""
    lo, hi = band
    if not -1.0 <= lo <= hi <= 1.0:
        raise ValueError(f"bad cosine band {band}")
    rows: list[np.ndarray] = []
    for _ in range(count):
        for attempt in range(max_tries):
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            if all(lo <= float(v @ u) <= hi for u in rows):
                rows.append(v)
                break
        else:
            raise RuntimeError(f"could not place prototype {len(rows)} within cosine band {band}; "
                               f"raise dim or widen the band")
    return np.stack(rows)


def _rect_mask(h: int, w: int, p: dict) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    m[p["r0"]:p["r0"] + p["h"], p["c0"]:p["c0"] + p["w"]] = True
    return m


def _ellipse_mask(h: int, w: int, p: dict) -> np.ndarray:
    i = np.arange(h)[:, None]
    j = np.arange(w)[None, :]
    return ((i - p["cr"]) / p["rr"]) ** 2 + ((j - p["cc"]) / p["rc"]) ** 2 <= 1.0


def _blob_mask(h: int, w: int, p: dict) -> np.ndarray:
    # two overlapping ellipses; the offset keeps the union connected
    base = _ellipse_mask(h, w, p)
    shifted = dict(p, cr=p["cr"] + p.get("dr", p["rr"] // 2), cc=p["cc"] + p.get("dc", 0))
    return base | _ellipse_mask(h, w, shifted)


_SHAPES = {"rect": _rect_mask, "ellipse": _ellipse_mask, "blob": _blob_mask}


def region_mask(spec: SceneSpec, inst: InstanceSpec) -> np.ndarray:
    if inst.shape not in _SHAPES:
        raise ValueError(f"unknown shape {inst.shape!r}")
    m = _SHAPES[inst.shape](spec.height, spec.width, inst.params)
    if not m.any():
        raise ValueError(f"instance region is empty: {inst}")
    return m


def _correlated_noise(rng: np.random.Generator, shape: tuple[int, ...],
                      sigma: float, corr: float) -> np.ndarray:
    """Noise field whose per-cell vector norm is sigma in expectation.

    sigma is the noise level relative to the unit prototypes (a 0.1 level
    perturbs a feature by 10%), so the per-component std is sigma / sqrt(D).
    corr > 0 smooths the field spatially while keeping that marginal.
    """
    if sigma == 0.0:
        return np.zeros(shape)
    per_dim = sigma / np.sqrt(shape[-1])
    if corr <= 0.0:
        return rng.normal(0.0, per_dim, shape)
    noise = rng.normal(size=shape)
    noise = ndimage.gaussian_filter(noise, sigma=(corr, corr, 0.0))
    # restore the per-cell marginal std after smoothing
    side = int(np.ceil(corr * 4)) * 2 + 1
    delta = np.zeros((side, side))
    delta[side // 2, side // 2] = 1.0
    kernel = ndimage.gaussian_filter(delta, sigma=corr)
    noise *= per_dim / np.sqrt((kernel ** 2).sum())
    return noise


def generate_scene(spec: SceneSpec) -> Scene:
    """Deterministically realize a scene from its spec."""
    if spec.boundary_width < 1:
        raise ValueError("boundary_width must be >= 1")
    for inst in spec.instances:
        if inst.category not in spec.categories:
            raise ValueError(f"instance category {inst.category!r} not declared")
    rng = np.random.default_rng(spec.seed)
    if spec.prototypes is not None:
        protos = np.asarray(spec.prototypes, dtype=np.float64)
        if protos.shape != (len(spec.categories) + 2, spec.dim):
            raise ValueError(f"prototypes must be ({len(spec.categories) + 2}, {spec.dim})")
        if not np.allclose(np.linalg.norm(protos, axis=1), 1.0, atol=1e-6):
            raise ValueError("prototypes must be unit vectors")
        gram = protos @ protos.T
        if (gram[~np.eye(len(protos), dtype=bool)] > 0.5).any():
            raise ValueError("prototype pairwise cosine above 0.5")
    else:
        protos = sample_prototypes(rng, len(spec.categories) + 2, spec.dim, spec.cos_band)
    cat_protos = {c: protos[i] for i, c in enumerate(spec.categories)}
    edge_proto, bg_proto = protos[-2], protos[-1]

    regions = [region_mask(spec, inst) for inst in spec.instances]
    interiors = [ndimage.binary_erosion(r, structure=_STRUCT, iterations=spec.boundary_width)
                 for r in regions]
    for m in interiors:
        if not m.any():
            raise ValueError("instance too small for this boundary width")
    stack = np.stack(interiors) if interiors else np.zeros((0, spec.height, spec.width), bool)
    if interiors and (stack.sum(axis=0) > 1).any():
        raise ValueError("overlapping instance interiors")

    interior_union = stack.any(axis=0) if interiors else np.zeros((spec.height, spec.width), bool)
    rim_union = np.zeros((spec.height, spec.width), dtype=bool)
    for r, i in zip(regions, interiors):
        rim_union |= r & ~i
    boundary = rim_union & ~interior_union
    background = ~(interior_union | boundary)

    features = np.empty((spec.height, spec.width, spec.dim))
    features[:] = bg_proto
    features[boundary] = edge_proto
    for inst, interior in zip(spec.instances, interiors):
        features[interior] = cat_protos[inst.category]
    features += _correlated_noise(rng, features.shape, spec.noise_sigma, spec.noise_corr)

    present = [c for c in spec.categories if any(i.category == c for i in spec.instances)]
    if present:
        image_emb = np.stack([cat_protos[c] for c in present]).sum(axis=0)
        image_emb /= np.linalg.norm(image_emb)
    else:
        # keep the embedding away from every category so the gate stays shut
        lo, hi = spec.cos_band
        while True:
            image_emb = rng.normal(size=spec.dim)
            image_emb /= np.linalg.norm(image_emb)
            if all(lo <= float(image_emb @ p) <= hi for p in protos):
                break
    cat_set = CategorySet(
        names=list(spec.categories),
        text_embeddings=np.stack([cat_protos[c] for c in spec.categories]),
        image_embedding=image_emb,
    )
    amaps = {c: activation_map(features, cat_protos[c], c) for c in spec.categories}
    return Scene(
        spec=spec,
        features=features,
        prototypes=protos,
        instance_masks=interiors,
        instance_categories=[i.category for i in spec.instances],
        boundary_mask=boundary,
        background_mask=background,
        category_set=cat_set,
        activation_maps=amaps,
    )


def random_scene_spec(seed: int, height: int = 64, width: int = 64, dim: int = 16,
                      n_instances: tuple[int, int] = (2, 6),
                      categories: tuple[str, ...] = ("alpha", "beta"),
                      boundary_width: int = 1, noise_sigma: float = 0.1,
                      noise_corr: float = 2.0, allow_touching: bool = True) -> SceneSpec:
    """Random non-overlapping rectangles and ellipses with safe margins."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_instances[0], n_instances[1] + 1))
    taken = np.zeros((height, width), dtype=bool)
    instances: list[InstanceSpec] = []
    spec_probe = SceneSpec(height, width, dim, list(categories), [], boundary_width)
    for _ in range(n):
        for _attempt in range(400):
            cat = categories[int(rng.integers(len(categories)))]
            if rng.random() < 0.5:
                rh, rw = int(rng.integers(10, 19)), int(rng.integers(10, 19))
                r0 = int(rng.integers(0, height - rh + 1))
                c0 = int(rng.integers(0, width - rw + 1))
                inst = InstanceSpec(cat, "rect", {"r0": r0, "c0": c0, "h": rh, "w": rw})
            else:
                rr, rc = int(rng.integers(5, 10)), int(rng.integers(5, 10))
                cr = int(rng.integers(rr, height - rr))
                cc = int(rng.integers(rc, width - rc))
                inst = InstanceSpec(cat, "ellipse", {"cr": cr, "cc": cc, "rr": rr, "rc": rc})
            region = region_mask(spec_probe, inst)
            # pad by one cell unless touching layouts are welcome
            probe = region if allow_touching else ndimage.binary_dilation(region, _STRUCT)
            if not (probe & taken).any():
                taken |= region
                instances.append(inst)
                break
    return SceneSpec(height=height, width=width, dim=dim, categories=list(categories),
                     instances=instances, boundary_width=boundary_width,
                     noise_sigma=noise_sigma, noise_corr=noise_corr, seed=seed)


def write_scene_set(scenes: list[Scene], ids: list[str], out_dir) -> tuple[str, str]:
    """Persist scenes as a feature dump (manifest + tensors) plus ground truth.

    All scenes must share one prototype set, since the manifest carries a
    single text-embedding table. Features double as both the activation
    source and the clustering stage; patch size is 1, so the patch grid is
    the image.
    """
    from pathlib import Path

    from .tensorio import (DetectionRecord, ImageEntry, Manifest, save_detections,
                           save_manifest, write_tensor)

    if len(scenes) != len(ids):
        raise ValueError("need one id per scene")
    if not scenes:
        raise ValueError("no scenes to write")
    base = scenes[0].category_set
    for s in scenes[1:]:
        if s.category_set.names != base.names or not np.allclose(
                s.category_set.text_embeddings, base.text_embeddings):
            raise ValueError("scenes in one set must share categories and prototypes")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "text_embeddings.ztns", base.text_embeddings.astype(np.float32))
    entries = []
    gt_images = []
    for scene, image_id in zip(scenes, ids):
        feat_rel = f"{image_id}_features.ztns"
        emb_rel = f"{image_id}_img.ztns"
        write_tensor(out / feat_rel, scene.features.astype(np.float32))
        write_tensor(out / emb_rel, scene.category_set.image_embedding.astype(np.float32))
        entries.append(ImageEntry(
            id=image_id, height=scene.spec.height, width=scene.spec.width,
            image_embedding=emb_rel, patch_features=feat_rel,
            stages=[("mid", feat_rel)],
        ))
        gt_images.append((image_id, [
            DetectionRecord.from_mask(cat, 1.0, mask)
            for cat, mask in zip(scene.instance_categories, scene.instance_masks)
        ]))
    manifest = Manifest(root=out, patch_size=1, categories=list(base.names),
                        text_embeddings="text_embeddings.ztns", images=entries,
                        mid_stage="mid")
    manifest_path = out / "manifest.json"
    gt_path = out / "ground_truth.json"
    save_manifest(manifest_path, manifest)
    save_detections(gt_path, gt_images)
    return str(manifest_path), str(gt_path)


def scene_metrics(gt_masks: list[np.ndarray], det_masks: list[np.ndarray],
                  det_scores: list[float]) -> tuple[bool, list[float]]:
    """Greedy assignment of detections to instances by IoU.

    Returns (exact count match, per-instance best IoU with its assigned
    detection, 0.0 when an instance drew none).
    """
    from .evaluation import mask_iou

    order = sorted(range(len(det_masks)), key=lambda i: -det_scores[i])
    best = [0.0] * len(gt_masks)
    taken = [False] * len(gt_masks)
    for di in order:
        ious = [0.0 if taken[gi] else mask_iou(det_masks[di], gt_masks[gi])
                for gi in range(len(gt_masks))]
        if not ious:
            continue
        gi = int(np.argmax(ious))
        if ious[gi] > 0.0:
            taken[gi] = True
            best[gi] = float(ious[gi])
    return len(det_masks) == len(gt_masks), best
