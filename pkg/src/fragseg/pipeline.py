"""End-to-end discovery over a feature dump: gate, seed, cluster, select."""
from __future__ import annotations

import csv
import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import (ClusterLabeling, FeaturePyramid, cluster_feature_source,
                         combine_heatmaps, kmeans, sample_centers)
from .config import PipelineConfig, worker_count
from .discovery import (Fragment, SelectionVector, boundary_score, objective_value,
                        regroup_instances, select_fragments, split_fragments,
                        upsample_mask)
from .semantics import (ActivationMap, CategorySet, activation_map, binarize,
                        cluster_count, enclosing_box, seed_heatmap)
from .tensorio import (DetectionRecord, Manifest, atomic_write_text, load_manifest,
                       read_tensor, save_detections, write_tensor)


@dataclass
class ImageInputs:
    """Everything discovery needs for one image, already in memory."""

    image_id: str
    image_h: int
    image_w: int
    patch_size: int
    patch_features: np.ndarray  # (H, W, D) final projected features
    pyramid: FeaturePyramid
    category_set: CategorySet


@dataclass
class ImageDebug:
    q: int = 0
    k: int = 0
    similarities: dict[str, float] = field(default_factory=dict)
    active: list[str] = field(default_factory=list)
    centers: list[tuple[int, int]] = field(default_factory=list)
    labeling: ClusterLabeling | None = None
    fragments: list[Fragment] = field(default_factory=list)
    selections: dict[str, SelectionVector] = field(default_factory=dict)
    objectives: dict[str, float] = field(default_factory=dict)


def stable_seed(base: int, image_id: str) -> int:
    """Per-image RNG seed that survives process boundaries and reruns."""
    return (base + zlib.crc32(image_id.encode())) % (2 ** 32)


def gate_categories(inputs: ImageInputs, cfg: PipelineConfig):
    """Image-level gate: keep categories similar enough to the whole image
    with a non-empty binary prior; returns their maps, boxes and (K, Q)."""
    cats = inputs.category_set
    k, q = cluster_count(cats, cfg.sim_threshold, cfg.k_floor)
    sims = {name: float(emb @ cats.image_embedding)
            for name, emb in zip(cats.names, cats.text_embeddings)}
    active: list[tuple[str, ActivationMap, tuple[int, int, int, int]]] = []
    for name, emb in zip(cats.names, cats.text_embeddings):
        if sims[name] <= cfg.sim_threshold:
            continue
        amap = activation_map(inputs.patch_features, emb, name)
        box = enclosing_box(binarize(amap, cfg.tau))
        if box is None:
            continue
        active.append((name, amap, box))
    return active, k, q, sims


def _cluster_gated(inputs: ImageInputs, cfg: PipelineConfig, active, k: int,
                   debug: ImageDebug) -> ClusterLabeling:
    grid_h, grid_w = inputs.patch_features.shape[:2]
    sigma = max(grid_h, grid_w) / cfg.sigma_divisor
    heatmaps = [seed_heatmap(name, box, (grid_h, grid_w), sigma) for name, _, box in active]
    dist = combine_heatmaps(heatmaps)
    centers = sample_centers(dist, k, stable_seed(cfg.rng_seed, inputs.image_id))
    debug.centers = centers
    mid = cluster_feature_source(inputs.pyramid)
    if mid.shape[:2] != (grid_h, grid_w):
        raise ValueError(f"mid stage grid {mid.shape[:2]} != patch grid {(grid_h, grid_w)}")
    return kmeans(mid, centers, cfg.kmeans_max_iter, cfg.kmeans_rel_tol)


def _select_gated(inputs: ImageInputs, labels: np.ndarray, cfg: PipelineConfig,
                  active, debug: ImageDebug) -> list[DetectionRecord]:
    frags = split_fragments(labels)
    debug.fragments = frags
    records: list[DetectionRecord] = []
    for name, amap, _box in active:
        sel = select_fragments(frags, amap, cfg.theta1, cfg.theta2)
        debug.selections[name] = sel
        debug.objectives[name] = objective_value(sel, frags, amap)
        for inst in regroup_instances(sel, frags, amap):
            pixel_mask = upsample_mask(inst.mask, inputs.patch_size, inputs.image_h, inputs.image_w)
            if not pixel_mask.any():
                continue
            records.append(DetectionRecord.from_mask(name, inst.confidence, pixel_mask))
    return records


def _gate_into(inputs: ImageInputs, cfg: PipelineConfig, debug: ImageDebug):
    active, k, q, sims = gate_categories(inputs, cfg)
    debug.q, debug.k, debug.similarities = q, k, sims
    debug.active = [name for name, _, _ in active]
    return active, k


def cluster_image(inputs: ImageInputs, cfg: PipelineConfig, debug: ImageDebug) -> ClusterLabeling | None:
    """Seed from category heatmaps and run k-means on mid-layer features."""
    active, k = _gate_into(inputs, cfg, debug)
    if not active:
        return None
    return _cluster_gated(inputs, cfg, active, k, debug)


def detections_from_labels(inputs: ImageInputs, labels: np.ndarray,
                           cfg: PipelineConfig, debug: ImageDebug) -> list[DetectionRecord]:
    """Fragment, select and regroup per category, then lift masks to pixels."""
    active, _k = _gate_into(inputs, cfg, debug)
    return _select_gated(inputs, labels, cfg, active, debug)


def discover_image(inputs: ImageInputs, cfg: PipelineConfig) -> tuple[list[DetectionRecord], ImageDebug]:
    """Full single-image pipeline; zero detections when every gate closes."""
    debug = ImageDebug()
    active, k = _gate_into(inputs, cfg, debug)
    if not active:
        return [], debug
    labeling = _cluster_gated(inputs, cfg, active, k, debug)
    debug.labeling = labeling
    return _select_gated(inputs, labeling.labels, cfg, active, debug), debug


def load_image_inputs(manifest: Manifest, entry_index: int,
                      categories: list[str] | None = None) -> ImageInputs:
    """Materialize one manifest entry; categories may narrow the set."""
    entry = manifest.images[entry_index]
    text = read_tensor(manifest.resolve(manifest.text_embeddings))
    names = list(manifest.categories)
    if categories:
        missing = sorted(set(categories) - set(names))
        if missing:
            raise ValueError(f"categories not in manifest: {', '.join(missing)}")
        keep = [i for i, n in enumerate(names) if n in set(categories)]
        text = text[keep]
        names = [names[i] for i in keep]
    cat_set = CategorySet(
        names=names,
        text_embeddings=text,
        image_embedding=read_tensor(manifest.resolve(entry.image_embedding)),
    )
    stages = [(name, read_tensor(manifest.resolve(rel))) for name, rel in entry.stages]
    return ImageInputs(
        image_id=entry.id,
        image_h=entry.height,
        image_w=entry.width,
        patch_size=manifest.patch_size,
        patch_features=read_tensor(manifest.resolve(entry.patch_features)),
        pyramid=FeaturePyramid(stages=stages, mid_stage=manifest.mid_stage),
        category_set=cat_set,
    )


def write_debug(debug_dir: Path, image_id: str, debug: ImageDebug) -> None:
    debug_dir.mkdir(parents=True, exist_ok=True)
    if debug.labeling is not None:
        write_tensor(debug_dir / f"{image_id}_labels.ztns",
                     debug.labeling.labels.astype(np.int32))
    info = {
        "Q": debug.q, "K": debug.k,
        "similarities": debug.similarities,
        "active": debug.active,
        "objectives": debug.objectives,
    }
    if debug.labeling is not None:
        info["kmeans"] = {"inertia": debug.labeling.inertia,
                          "iterations": debug.labeling.iterations}
    atomic_write_text(debug_dir / f"{image_id}_info.json", json.dumps(info, indent=2) + "\n")
    if debug.fragments:
        write_fragment_csv(debug_dir / f"{image_id}_fragments.csv", debug)


def write_fragment_csv(path: Path, debug: ImageDebug) -> None:
    cats = list(debug.selections)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["id", "cluster", "area", "bbox_area", "boundary_score"]
        for c in cats:
            header += [f"mean_act_{c}", f"selected_{c}"]
        writer.writerow(header)
        for frag in debug.fragments:
            row = [frag.id, frag.cluster, frag.area, frag.bbox_area,
                   f"{boundary_score(frag):.4f}"]
            for c in cats:
                row.append(f"{frag.mean_activation.get(c, float('nan')):.4f}")
                row.append(int(bool(debug.selections[c].flags[frag.id])))
            writer.writerow(row)


def _run_entry(args: tuple[str, int, PipelineConfig, str | None]):
    manifest_path, index, cfg, debug_dir = args
    manifest = load_manifest(manifest_path)
    inputs = load_image_inputs(manifest, index, cfg.categories or None)
    records, debug = discover_image(inputs, cfg)
    if debug_dir is not None:
        write_debug(Path(debug_dir), inputs.image_id, debug)
    return inputs.image_id, records


def run_manifest(manifest_path, cfg: PipelineConfig, out_path,
                 debug_dir=None) -> list[tuple[str, list[DetectionRecord]]]:
    """Process every image in the manifest and write one detections JSON."""
    manifest = load_manifest(manifest_path)
    tasks = [(str(manifest_path), i, cfg, str(debug_dir) if debug_dir else None)
             for i in range(len(manifest.images))]
    workers = worker_count(cfg)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_entry, tasks))
    else:
        results = [_run_entry(t) for t in tasks]
    save_detections(out_path, results)
    return results
