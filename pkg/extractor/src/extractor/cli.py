"""Command line: dump feature sets, run refiners, score detections."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from fragseg.tensorio import atomic_write_text, load_detections

from .dump import dump_features
from .models import DEFAULT_VARIANT, VARIANTS, ModelUnavailable
from .refine import IMAGE_SUFFIXES, image_lookup, refine_file
from .roi import classify_detections


def cmd_dump(args) -> int:
    paths = list(args.images or [])
    if args.images_dir:
        paths += [str(p) for p in sorted(Path(args.images_dir).iterdir())
                  if p.suffix.lower() in IMAGE_SUFFIXES]
    manifest = dump_features(
        paths, args.categories.split(","), args.out, variant=args.variant,
        resolution=args.resolution, seed=args.seed)
    print(f"wrote {manifest}")
    return 0


def cmd_refine(args) -> int:
    refine_file(args.plan, args.images, args.out, backend=args.backend)
    return 0


def cmd_roi_classify(args) -> int:
    doc = classify_detections(
        load_detections(args.dets), image_lookup(args.images),
        args.categories.split(","), variant=args.variant,
        resolution=args.resolution, method=args.method, seed=args.seed)
    atomic_write_text(args.out, json.dumps(doc, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fragseg-extract", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dump", help="encode images into a feature dump")
    p.add_argument("--images", nargs="*", help="image files")
    p.add_argument("--images-dir", dest="images_dir", help="directory of images")
    p.add_argument("--categories", required=True, help="comma-separated names")
    p.add_argument("--out", required=True, help="dump directory")
    p.add_argument("--variant", default=DEFAULT_VARIANT, choices=VARIANTS)
    p.add_argument("--resolution", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("refine", help="execute a prompt plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--images", required=True, help="directory of images")
    p.add_argument("--out", required=True)
    p.add_argument("--backend", default="color", choices=("color", "sam"))
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("roi-classify", help="category scores per detection")
    p.add_argument("--dets", required=True)
    p.add_argument("--images", required=True, help="directory of images")
    p.add_argument("--categories", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default=DEFAULT_VARIANT, choices=VARIANTS)
    p.add_argument("--resolution", type=int, default=2048)
    p.add_argument("--method", default="roi", choices=("roi", "crop"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_roi_classify)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, ModelUnavailable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
