"""Command-line interface: stage-by-stage subcommands with file handoffs."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, pipeline, prompting, synth, viz
from .config import PipelineConfig, apply_overrides, load_config
from .tensorio import (atomic_write_text, load_detections, load_manifest,
                       read_tensor, save_detections, write_tensor)


def _config_from_args(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {
        "tau": args.tau,
        "theta1": args.theta1,
        "theta2": args.theta2,
        "sim_threshold": args.sim_threshold,
        "k_floor": args.k_floor,
        "kmeans_max_iter": args.kmeans_max_iter,
        "kmeans_rel_tol": args.kmeans_rel_tol,
        "rng_seed": args.rng_seed,
        "workers": args.workers,
        "categories": args.categories.split(",") if args.categories else None,
    }
    return apply_overrides(cfg, overrides)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config; flags override its values")
    p.add_argument("--tau", type=float)
    p.add_argument("--theta1", type=float)
    p.add_argument("--theta2", type=float)
    p.add_argument("--sim-threshold", dest="sim_threshold", type=float)
    p.add_argument("--k-floor", dest="k_floor", type=int)
    p.add_argument("--kmeans-max-iter", dest="kmeans_max_iter", type=int)
    p.add_argument("--kmeans-rel-tol", dest="kmeans_rel_tol", type=float)
    p.add_argument("--rng-seed", dest="rng_seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--categories", help="comma-separated subset of manifest categories")


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    pipeline.run_manifest(args.features, cfg, args.out, debug_dir=args.debug_dir)
    return 0


def cmd_cluster(args) -> int:
    cfg = _config_from_args(args)
    manifest = load_manifest(args.features)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(len(manifest.images)):
        inputs = pipeline.load_image_inputs(manifest, i, cfg.categories or None)
        debug = pipeline.ImageDebug()
        labeling = pipeline.cluster_image(inputs, cfg, debug)
        if labeling is None:
            continue
        write_tensor(out_dir / f"{inputs.image_id}_labels.ztns", labeling.labels.astype(np.int32))
        write_tensor(out_dir / f"{inputs.image_id}_centers.ztns", labeling.centers.astype(np.float32))
    return 0


def cmd_select(args) -> int:
    cfg = _config_from_args(args)
    manifest = load_manifest(args.features)
    labels_dir = Path(args.labels_dir)
    results = []
    for i in range(len(manifest.images)):
        inputs = pipeline.load_image_inputs(manifest, i, cfg.categories or None)
        labels_path = labels_dir / f"{inputs.image_id}_labels.ztns"
        debug = pipeline.ImageDebug()
        if labels_path.exists():
            labels = read_tensor(labels_path)
            records = pipeline.detections_from_labels(inputs, labels, cfg, debug)
        else:
            records = []
        if args.debug_dir:
            pipeline.write_debug(Path(args.debug_dir), inputs.image_id, debug)
        results.append((inputs.image_id, records))
    save_detections(args.out, results)
    return 0


def cmd_prompts(args) -> int:
    detections = load_detections(args.dets)
    plans = []
    if args.step == 1:
        for image_id, dets in detections:
            plans.append(prompting.step1_boxes(image_id, dets))
    else:
        if not args.results:
            raise ValueError("--step 2 needs --results from step 1")
        results = prompting.load_results(args.results)
        for image_id, dets in detections:
            if image_id not in results:
                continue
            _step, entries = results[image_id]
            boxes = prompting.refined_boxes_from_results(entries)
            plans.append(prompting.step2_points(image_id, dets, boxes))
    prompting.save_plans(args.out, plans)
    return 0


def cmd_merge_refined(args) -> int:
    detections = load_detections(args.dets)
    results = prompting.load_results(args.results)
    merged = []
    for image_id, dets in detections:
        if image_id in results:
            _step, entries = results[image_id]
            dets = prompting.adopt_refined_masks(dets, entries)
        merged.append((image_id, dets))
    save_detections(args.out, merged)
    return 0


def cmd_eval(args) -> int:
    dets = load_detections(args.dets)
    gts = evaluation.load_ground_truth(args.gt)
    report = evaluation.evaluate(dets, gts, mode=args.mode, class_agnostic=args.agnostic)
    if args.out:
        atomic_write_text(args.out, json.dumps(report.to_json(), indent=2) + "\n")
    print(report.format_table())
    return 0


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    categories = [f"cat{i}" for i in range(args.categories)] if args.categories != 2 \
        else ["alpha", "beta"]
    protos = synth.sample_prototypes(rng, len(categories) + 2, args.dim)
    scenes, ids = [], []
    for i in range(args.scenes):
        spec = synth.random_scene_spec(
            seed=args.seed + i + 1, height=args.size, width=args.size, dim=args.dim,
            n_instances=(args.min_instances, args.max_instances),
            categories=tuple(categories), boundary_width=args.boundary_width,
            noise_sigma=args.sigma_f, noise_corr=args.noise_corr)
        spec = dataclasses.replace(spec, prototypes=protos)
        scenes.append(synth.generate_scene(spec))
        ids.append(f"scene{i:03d}")
    manifest_path, gt_path = synth.write_scene_set(scenes, ids, args.out)
    print(f"wrote {manifest_path} and {gt_path}")
    return 0


def cmd_plot(args) -> int:
    if args.labels:
        rgb = viz.render_labeling(read_tensor(args.labels))
    elif args.dets:
        detections = dict(load_detections(args.dets))
        if args.image_id not in detections:
            raise ValueError(f"image {args.image_id!r} not in {args.dets}")
        masks = [d.mask for d in detections[args.image_id]]
        shape = masks[0].shape if masks else None
        if shape is None and not args.height:
            raise ValueError("no detections; pass --height/--width for the canvas")
        rgb = viz.render_overlay(None, masks, shape or (args.height, args.width))
    else:
        raise ValueError("pass --labels or --dets")
    viz.save_png(args.out, rgb)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fragseg", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full discovery over a feature dump")
    p.add_argument("--features", required=True, help="manifest JSON")
    p.add_argument("--out", required=True, help="detections JSON")
    p.add_argument("--debug-dir", dest="debug_dir")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("cluster", help="write per-image cluster labelings")
    p.add_argument("--features", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("select", help="detections from stored labelings")
    p.add_argument("--features", required=True)
    p.add_argument("--labels-dir", dest="labels_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--debug-dir", dest="debug_dir")
    _add_config_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("prompts", help="emit refinement prompt plans")
    p.add_argument("--dets", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--step", type=int, choices=(1, 2), default=1)
    p.add_argument("--results", help="step-1 results JSON (needed for step 2)")
    p.set_defaults(func=cmd_prompts)

    p = sub.add_parser("merge-refined", help="adopt refined masks and fuse scores")
    p.add_argument("--dets", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge_refined)

    p = sub.add_parser("eval", help="AP/AR report against ground truth")
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.add_argument("--mode", choices=("mask", "box"), default="mask")
    p.add_argument("--agnostic", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic scene set")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--categories", type=int, default=2)
    p.add_argument("--min-instances", dest="min_instances", type=int, default=2)
    p.add_argument("--max-instances", dest="max_instances", type=int, default=6)
    p.add_argument("--sigma-f", dest="sigma_f", type=float, default=0.1)
    p.add_argument("--noise-corr", dest="noise_corr", type=float, default=2.0)
    p.add_argument("--boundary-width", dest="boundary_width", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plot", help="render a labeling or detections to PNG")
    p.add_argument("--labels", help="labels tensor file")
    p.add_argument("--dets", help="detections JSON")
    p.add_argument("--image-id", dest="image_id")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
