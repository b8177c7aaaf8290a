"""Write feature dumps in the discovery core's manifest/tensor contract."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from fragseg.tensorio import ImageEntry, Manifest, save_manifest, write_tensor

from .models import DEFAULT_VARIANT, load_variant

MID_STAGE = "mid"


def _load_image(path) -> Image.Image:
    try:
        return Image.open(path)
    except (FileNotFoundError, UnidentifiedImageError) as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from exc


def dump_features(image_paths, categories, out_dir, variant=DEFAULT_VARIANT,
                  resolution=2048, seed=0) -> Path:
    """Encode images and write tensors plus a manifest; returns its path.

    The mid-stage map is average-pooled to the patch grid because the core
    clusters mid features on that grid. Image ids are the file stems, which
    must therefore be unique.
    """
    if not image_paths:
        raise ValueError("no images to dump")
    if not categories:
        raise ValueError("no categories to embed")
    ids = [Path(p).stem for p in image_paths]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate image stems in {sorted(ids)}")

    model = load_variant(variant, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    text = model.encode_texts(list(categories))
    write_tensor(out / "text_embeddings.ztns", text.astype(np.float32))

    entries = []
    for image_id, path in zip(ids, image_paths):
        pixels = model.preprocess(_load_image(path), resolution)
        feats = model.encode_image_features(pixels)
        grid_h, grid_w = feats.patch.shape[:2]
        mid = np.ascontiguousarray(feats.mid)
        if mid.shape[:2] != (grid_h, grid_w):
            t = torch.from_numpy(mid).permute(2, 0, 1)[None]
            t = F.adaptive_avg_pool2d(t, (grid_h, grid_w))
            mid = t[0].permute(1, 2, 0).numpy()
        mid_rel = f"{image_id}_mid.ztns"
        patch_rel = f"{image_id}_patch.ztns"
        emb_rel = f"{image_id}_img.ztns"
        write_tensor(out / mid_rel, mid.astype(np.float32))
        write_tensor(out / patch_rel, feats.patch.astype(np.float32))
        write_tensor(out / emb_rel, feats.image_embedding.astype(np.float32))
        entries.append(ImageEntry(
            id=image_id,
            height=pixels.shape[2], width=pixels.shape[3],
            image_embedding=emb_rel, patch_features=patch_rel,
            stages=[(MID_STAGE, mid_rel)]))

    manifest = Manifest(root=out, patch_size=model.stride,
                        categories=list(categories),
                        text_embeddings="text_embeddings.ztns",
                        images=entries, mid_stage=MID_STAGE)
    manifest_path = out / "manifest.json"
    save_manifest(manifest_path, manifest)
    return manifest_path
