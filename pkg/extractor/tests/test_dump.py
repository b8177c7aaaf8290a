import json
from pathlib import Path

import numpy as np
import pytest

import fragseg.cli
from fragseg.tensorio import load_manifest, read_tensor

from extractor.dump import dump_features


def dump_dir_bytes(root):
    return {p.name: p.read_bytes() for p in sorted(Path(root).iterdir())}


def test_dump_manifest_and_tensors(rect_images, tmp_path):
    _, paths = rect_images(2)
    out = tmp_path / "dump"
    manifest_path = dump_features(paths, ["alpha", "beta"], out,
                                  variant="stub", resolution=128)
    assert manifest_path == out / "manifest.json"

    man = load_manifest(manifest_path)
    assert man.patch_size == 16
    assert man.mid_stage == "mid"
    assert man.categories == ["alpha", "beta"]
    assert [e.id for e in man.images] == ["photo0", "photo1"]

    text = read_tensor(man.resolve(man.text_embeddings))
    assert text.shape == (2, 32) and text.dtype == np.float32
    assert np.allclose(np.linalg.norm(text, axis=1), 1.0, atol=1e-5)

    for entry in man.images:
        # source 200x160 scaled to long side 128
        assert (entry.height, entry.width) == (128, 102)
        patch = read_tensor(man.resolve(entry.patch_features))
        emb = read_tensor(man.resolve(entry.image_embedding))
        assert dict(entry.stages).keys() == {"mid"}
        mid = read_tensor(man.resolve(dict(entry.stages)["mid"]))
        assert patch.ndim == 3 and patch.shape[2] == 32
        # mid map is pooled onto the patch grid the core clusters on
        assert mid.shape[:2] == patch.shape[:2]
        assert emb.shape == (32,)
        assert abs(np.linalg.norm(emb) - 1.0) < 1e-5


def test_dump_rerun_bit_exact(rect_images, tmp_path):
    _, paths = rect_images(2)
    dump_features(paths, ["alpha"], tmp_path / "a", variant="stub", resolution=128)
    dump_features(paths, ["alpha"], tmp_path / "b", variant="stub", resolution=128)
    a, b = dump_dir_bytes(tmp_path / "a"), dump_dir_bytes(tmp_path / "b")
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], name


def test_dump_seed_changes_tensors(rect_images, tmp_path):
    _, paths = rect_images(1)
    dump_features(paths, ["alpha"], tmp_path / "a", variant="stub",
                  resolution=128, seed=0)
    dump_features(paths, ["alpha"], tmp_path / "b", variant="stub",
                  resolution=128, seed=1)
    a = (tmp_path / "a" / "photo0_patch.ztns").read_bytes()
    b = (tmp_path / "b" / "photo0_patch.ztns").read_bytes()
    assert a != b


def test_dump_rejects_missing_image(tmp_path):
    with pytest.raises(ValueError, match="unreadable image"):
        dump_features([tmp_path / "ghost.png"], ["a"], tmp_path / "d",
                      variant="stub")


def test_dump_rejects_non_image(tmp_path):
    junk = tmp_path / "junk.png"
    junk.write_text("not a png")
    with pytest.raises(ValueError, match="unreadable image"):
        dump_features([junk], ["a"], tmp_path / "d", variant="stub")


def test_dump_rejects_duplicate_stems(tmp_path, rect_images):
    root, paths = rect_images(1)
    twin_dir = tmp_path / "twin"
    twin_dir.mkdir()
    twin = twin_dir / paths[0].name
    twin.write_bytes(paths[0].read_bytes())
    with pytest.raises(ValueError, match="duplicate image stems"):
        dump_features([paths[0], twin], ["a"], tmp_path / "d", variant="stub")


def test_dump_rejects_empty_inputs(tmp_path, rect_images):
    _, paths = rect_images(1)
    with pytest.raises(ValueError, match="no images"):
        dump_features([], ["a"], tmp_path / "d", variant="stub")
    with pytest.raises(ValueError, match="no categories"):
        dump_features(paths, [], tmp_path / "d", variant="stub")


def test_core_pipeline_runs_on_dump(rect_images, tmp_path, capsys):
    """The core must consume an extractor dump exactly like a synth dump."""
    _, paths = rect_images(3)
    manifest = dump_features(paths, ["alpha", "beta"], tmp_path / "dump",
                             variant="stub", resolution=128)
    out = tmp_path / "dets.json"
    # open every gate so clustering and selection actually execute
    argv = ["run", "--features", str(manifest), "--out", str(out),
            "--sim-threshold", "-1", "--theta1", "0", "--theta2", "1e9"]
    assert fragseg.cli.main(argv) == 0
    doc = json.loads(out.read_text())
    assert [e["id"] for e in doc["images"]] == ["photo0", "photo1", "photo2"]
    assert sum(len(e["detections"]) for e in doc["images"]) > 0

    out2 = tmp_path / "dets2.json"
    argv2 = argv[:4] + [str(out2)] + argv[5:]
    assert fragseg.cli.main(argv2) == 0
    assert out.read_bytes() == out2.read_bytes()
