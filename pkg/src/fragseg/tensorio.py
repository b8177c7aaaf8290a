"""File contracts: binary tensors, RLE masks, detection records, JSON sets."""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ZTNS"
VERSION = 1

# dtype code -> little-endian numpy dtype
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write arr as magic/version/ndim/dims/dtype header plus raw payload."""
    if arr.ndim < 1:
        raise ValueError("tensor must have at least one dimension")
    dt = np.dtype(arr.dtype).newbyteorder("<")
    if dt not in _CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}; use float32, int32 or uint8")
    header = struct.pack(f"<4sII{arr.ndim}IB", MAGIC, VERSION, arr.ndim, *arr.shape, _CODES[dt])
    payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
    atomic_write_bytes(path, header + payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor written by write_tensor; validates every header field."""
    blob = Path(path).read_bytes()
    if len(blob) < 13 or blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor file (bad magic)")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if ndim < 1:
        raise ValueError(f"{path}: ndim must be >= 1")
    offset = 12
    if len(blob) < offset + 4 * ndim + 1:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    code = blob[offset]
    offset += 1
    if code not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dt = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dt).reshape(dims).copy()


def encode_rle(mask: np.ndarray) -> dict:
    """Encode a bool mask as column-major runs, first count covering zeros."""
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    h, w = mask.shape
    flat = np.asarray(mask, dtype=bool).flatten(order="F")
    counts: list[int] = []
    if flat.size == 0:
        return {"counts": [0], "size": [int(h), int(w)]}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    runs = np.diff(np.concatenate(([0], changes, [flat.size])))
    if flat[0]:
        counts.append(0)
    counts.extend(int(r) for r in runs)
    return {"counts": counts, "size": [int(h), int(w)]}


def decode_rle(rle: dict) -> np.ndarray:
    """Inverse of encode_rle; errors when counts do not cover the grid."""
    h, w = (int(v) for v in rle["size"])
    counts = rle["counts"]
    if any(c < 0 for c in counts):
        raise ValueError("negative run count")
    total = sum(counts)
    if total != h * w:
        raise ValueError(f"run counts sum to {total}, grid has {h * w} cells")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos:pos + c] = True
        pos += c
        value = not value
    return flat.reshape((h, w), order="F")


def mask_tight_box(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight half-open (x_min, y_min, x_max, y_max) box, x = column; None if empty."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


@dataclass
class DetectionRecord:
    """One instance mask with its category, confidence and enclosing box."""

    category: str
    score: float
    mask: np.ndarray  # bool, image shape
    box: tuple[int, int, int, int]

    @classmethod
    def from_mask(cls, category: str, score: float, mask: np.ndarray) -> "DetectionRecord":
        box = mask_tight_box(mask)
        if box is None:
            raise ValueError("detection mask is empty")
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score {score} outside [0, 1]")
        return cls(category=category, score=float(score), mask=np.asarray(mask, dtype=bool), box=box)

    def to_json(self) -> dict:
        return {
            "category": self.category,
            "score": self.score,
            "box": list(self.box),
            "rle": encode_rle(self.mask),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DetectionRecord":
        mask = decode_rle(obj["rle"])
        rec = cls.from_mask(obj["category"], float(obj.get("score", 1.0)), mask)
        if "box" in obj and tuple(obj["box"]) != rec.box:
            raise ValueError(f"stored box {obj['box']} does not enclose the mask (tight box {rec.box})")
        return rec


def save_detections(path: str | Path, images: list[tuple[str, list[DetectionRecord]]]) -> None:
    """Persist one JSON document for the whole image set."""
    doc = {
        "images": [
            {"id": image_id, "detections": [d.to_json() for d in dets]}
            for image_id, dets in images
        ]
    }
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def load_detections(path: str | Path) -> list[tuple[str, list[DetectionRecord]]]:
    with open(path) as fh:
        doc = json.load(fh)
    out = []
    for entry in doc["images"]:
        out.append((entry["id"], [DetectionRecord.from_json(d) for d in entry["detections"]]))
    return out


@dataclass
class ImageEntry:
    """Per-image tensor paths inside a feature dump, relative to the manifest."""

    id: str
    height: int
    width: int
    image_embedding: str
    patch_features: str
    stages: list[tuple[str, str]]

    def to_json(self) -> dict:
        return {
            "id": self.id, "height": self.height, "width": self.width,
            "image_embedding": self.image_embedding,
            "patch_features": self.patch_features,
            "stages": [list(s) for s in self.stages],
        }


@dataclass
class Manifest:
    """Index of a feature dump: shared text embeddings plus per-image tensors."""

    root: Path
    patch_size: int
    categories: list[str]
    text_embeddings: str
    images: list[ImageEntry]
    mid_stage: str | None = None

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_json(self) -> dict:
        doc = {
            "patch_size": self.patch_size,
            "categories": self.categories,
            "text_embeddings": self.text_embeddings,
            "images": [e.to_json() for e in self.images],
        }
        if self.mid_stage is not None:
            doc["mid_stage"] = self.mid_stage
        return doc


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    images = [ImageEntry(
        id=e["id"], height=int(e["height"]), width=int(e["width"]),
        image_embedding=e["image_embedding"], patch_features=e["patch_features"],
        stages=[(name, rel) for name, rel in e["stages"]],
    ) for e in doc["images"]]
    return Manifest(
        root=path.parent,
        patch_size=int(doc["patch_size"]),
        categories=list(doc["categories"]),
        text_embeddings=doc["text_embeddings"],
        images=images,
        mid_stage=doc.get("mid_stage"),
    )


def save_manifest(path: str | Path, manifest: Manifest) -> None:
    atomic_write_text(path, json.dumps(manifest.to_json(), indent=2) + "\n")


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def atomic_write_bytes(path: str | Path, blob: bytes) -> None:
    """Write to a temp file in the target directory, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
