import numpy as np
import pytest

from fragseg.synth import (
    DEFAULT_COS_BAND,
    InstanceSpec,
    SceneSpec,
    generate_scene,
    random_scene_spec,
    sample_prototypes,
    scene_metrics,
    write_scene_set,
)
from fragseg.tensorio import load_manifest, read_tensor
from fragseg.evaluation import load_ground_truth


def rect(cat, r0, c0, h, w):
    return InstanceSpec(cat, "rect", {"r0": r0, "c0": c0, "h": h, "w": w})


def noiseless_spec(instances, categories=("alpha", "beta"), seed=0, **kw):
    return SceneSpec(height=32, width=32, dim=12, categories=list(categories),
                     instances=instances, noise_sigma=0.0, seed=seed, **kw)


def test_prototypes_unit_norm_in_band():
    rng = np.random.default_rng(0)
    protos = sample_prototypes(rng, 5, 12)
    assert np.allclose(np.linalg.norm(protos, axis=1), 1.0)
    gram = protos @ protos.T
    off = gram[~np.eye(5, dtype=bool)]
    lo, hi = DEFAULT_COS_BAND
    assert np.all(off >= lo - 1e-12) and np.all(off <= hi + 1e-12)


def test_prototypes_deterministic():
    a = sample_prototypes(np.random.default_rng(7), 4, 10)
    b = sample_prototypes(np.random.default_rng(7), 4, 10)
    assert np.array_equal(a, b)


def test_prototypes_impossible_band_raises():
    rng = np.random.default_rng(1)
    with pytest.raises(RuntimeError):
        sample_prototypes(rng, 6, 3, band=(-0.99, -0.95), max_tries=200)


def test_noiseless_scene_three_feature_vectors():
    scene = generate_scene(noiseless_spec([rect("alpha", 4, 4, 10, 10)]))
    interior = scene.instance_masks[0]
    assert interior.any()
    # interiors carry the category prototype exactly
    assert np.allclose(scene.features[interior], scene.prototypes[0])
    assert np.allclose(scene.features[scene.boundary_mask], scene.prototypes[-2])
    assert np.allclose(scene.features[scene.background_mask], scene.prototypes[-1])
    uniq = np.unique(scene.features.reshape(-1, scene.spec.dim), axis=0)
    assert len(uniq) == 3


def test_interior_is_region_eroded_by_boundary_width():
    spec = noiseless_spec([rect("alpha", 4, 4, 10, 12)])
    scene = generate_scene(spec)
    interior = scene.instance_masks[0]
    rows, cols = np.nonzero(interior)
    assert (rows.min(), cols.min(), rows.max(), cols.max()) == (5, 5, 12, 14)
    assert interior.sum() == 8 * 10
    ring = scene.boundary_mask
    assert ring.sum() == 10 * 12 - 8 * 10


def test_masks_partition_grid():
    spec = noiseless_spec([rect("alpha", 2, 2, 8, 8), rect("beta", 15, 15, 9, 9)])
    scene = generate_scene(spec)
    total = scene.background_mask.astype(int) + scene.boundary_mask.astype(int)
    for m in scene.instance_masks:
        total += m.astype(int)
    assert np.all(total == 1)


def test_overlapping_interiors_rejected():
    spec = noiseless_spec([rect("alpha", 4, 4, 10, 10), rect("beta", 6, 6, 10, 10)])
    with pytest.raises(ValueError):
        generate_scene(spec)


def test_touching_instances_share_boundary_only():
    spec = noiseless_spec([rect("alpha", 4, 4, 12, 12), rect("beta", 4, 16, 12, 12)])
    scene = generate_scene(spec)
    a, b = scene.instance_masks
    assert not (a & b).any()
    # one eroded rim column separates the two interiors
    assert scene.boundary_mask[10, 15] and scene.boundary_mask[10, 16]


def test_noise_marginal_is_total_norm():
    spec = SceneSpec(height=40, width=40, dim=16, categories=["alpha"],
                     instances=[], noise_sigma=0.2, noise_corr=0.0, seed=3)
    scene = generate_scene(spec)
    delta = scene.features - scene.prototypes[-1]
    norms = np.linalg.norm(delta, axis=2)
    assert np.sqrt((norms ** 2).mean()) == pytest.approx(0.2, rel=0.05)


def test_correlated_noise_keeps_marginal_and_smooths():
    base = dict(height=48, width=48, dim=16, categories=["alpha"], instances=[])
    white = generate_scene(SceneSpec(**base, noise_sigma=0.1, noise_corr=0.0, seed=5))
    smooth = generate_scene(SceneSpec(**base, noise_sigma=0.1, noise_corr=2.0, seed=5))
    for scene in (white, smooth):
        delta = scene.features - scene.prototypes[-1]
        level = np.sqrt((np.linalg.norm(delta, axis=2) ** 2).mean())
        assert level == pytest.approx(0.1, rel=0.1)
    d = smooth.features - smooth.prototypes[-1]
    neighbor_cos = (d[:-1] * d[1:]).sum(axis=2) / (
        np.linalg.norm(d[:-1], axis=2) * np.linalg.norm(d[1:], axis=2))
    assert neighbor_cos.mean() > 0.5  # white noise would hover near 0


def test_image_embedding_mixes_present_categories():
    spec = noiseless_spec([rect("alpha", 2, 2, 8, 8), rect("beta", 15, 15, 9, 9)])
    scene = generate_scene(spec)
    want = scene.prototypes[0] + scene.prototypes[1]
    want /= np.linalg.norm(want)
    assert np.allclose(scene.category_set.image_embedding, want)
    sims = scene.category_set.text_embeddings @ scene.category_set.image_embedding
    assert np.all(sims > 0.15)


def test_empty_scene_embedding_gates_shut():
    spec = noiseless_spec([])
    scene = generate_scene(spec)
    sims = scene.category_set.text_embeddings @ scene.category_set.image_embedding
    assert np.all(sims < 0.15)


def test_scene_determinism():
    spec = random_scene_spec(seed=99)
    a = generate_scene(spec)
    b = generate_scene(spec)
    assert np.array_equal(a.features, b.features)


def test_random_spec_counts_and_bounds():
    for seed in range(20):
        spec = random_scene_spec(seed=seed)
        assert 2 <= len(spec.instances) <= 6
        scene = generate_scene(spec)
        assert len(scene.instance_masks) == len(spec.instances)


def test_write_scene_set_round_trip(tmp_path):
    protos = sample_prototypes(np.random.default_rng(0), 4, 12)
    specs = [noiseless_spec([rect("alpha", 4, 4, 10, 10)], seed=s) for s in range(2)]
    scenes = [generate_scene(SceneSpec(**{**spec.__dict__, "prototypes": protos}))
              for spec in specs]
    manifest_path, gt_path = write_scene_set(scenes, ["s0", "s1"], tmp_path)
    manifest = load_manifest(manifest_path)
    assert manifest.patch_size == 1
    assert manifest.categories == ["alpha", "beta"]
    assert manifest.mid_stage == "mid"
    feats = read_tensor(manifest.resolve(manifest.images[0].patch_features))
    assert feats.shape == (32, 32, 12)
    assert np.allclose(feats, scenes[0].features.astype(np.float32))
    gt = load_ground_truth(gt_path)
    assert [image_id for image_id, _ in gt] == ["s0", "s1"]
    assert np.array_equal(gt[0][1][0].mask, scenes[0].instance_masks[0])


def test_write_scene_set_rejects_mixed_prototypes(tmp_path):
    a = generate_scene(noiseless_spec([rect("alpha", 4, 4, 10, 10)], seed=1))
    b = generate_scene(noiseless_spec([rect("alpha", 4, 4, 10, 10)], seed=2))
    with pytest.raises(ValueError):
        write_scene_set([a, b], ["a", "b"], tmp_path)


def test_scene_metrics_perfect_and_empty():
    scene = generate_scene(noiseless_spec([rect("alpha", 2, 2, 8, 8),
                                           rect("beta", 15, 15, 9, 9)]))
    ok, ious = scene_metrics(scene.instance_masks, scene.instance_masks, [1.0, 0.9])
    assert ok and ious == [1.0, 1.0]
    ok, ious = scene_metrics(scene.instance_masks, [], [])
    assert not ok and ious == [0.0, 0.0]


def test_scene_metrics_merged_detection_flags_count():
    scene = generate_scene(noiseless_spec([rect("alpha", 2, 2, 8, 8),
                                           rect("alpha", 2, 16, 8, 8)]))
    merged = scene.instance_masks[0] | scene.instance_masks[1]
    ok, ious = scene_metrics(scene.instance_masks, [merged], [1.0])
    assert not ok
    assert max(ious) < 1.0
