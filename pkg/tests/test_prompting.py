import json

import numpy as np
import pytest

from fragseg.prompting import (
    adopt_refined_masks,
    fuse_scores,
    load_results,
    refined_boxes_from_results,
    save_plans,
    step1_boxes,
    step2_points,
)
from fragseg.tensorio import DetectionRecord, encode_rle, mask_tight_box


def det_at(r0, c0, h, w, score=0.5, category="cup", shape=(12, 12)):
    mask = np.zeros(shape, dtype=bool)
    mask[r0:r0 + h, c0:c0 + w] = True
    return DetectionRecord.from_mask(category, score, mask)


def test_step1_one_box_per_detection_in_order():
    dets = [det_at(0, 0, 2, 2), det_at(4, 4, 3, 3), det_at(8, 1, 2, 4)]
    plan = step1_boxes("img", dets)
    assert plan.step == 1
    assert [p.det for p in plan.prompts] == [0, 1, 2]
    assert all(p.kind == "box" for p in plan.prompts)
    assert [p.coords for p in plan.prompts] == [d.box for d in dets]


def test_step1_empty():
    plan = step1_boxes("img", [])
    assert plan.prompts == []


def test_step2_center_rounding_half_up():
    dets = [det_at(0, 0, 2, 2)]
    plan = step2_points("img", dets, {0: (1, 1, 4, 6)})
    assert plan.step == 2
    p = plan.prompts[0]
    assert p.kind == "point"
    assert p.coords == (3, 4)  # centers (2.5, 3.5) round half-up


def test_step2_unknown_id():
    with pytest.raises(KeyError):
        step2_points("img", [det_at(0, 0, 2, 2)], {5: (0, 0, 1, 1)})


def test_plan_json_shapes(tmp_path):
    dets = [det_at(0, 0, 2, 2), det_at(5, 5, 2, 2)]
    plans = [step1_boxes("a", dets), step2_points("b", dets, {1: (0, 0, 2, 2)})]
    path = tmp_path / "plans.json"
    save_plans(path, plans)
    docs = json.loads(path.read_text())
    assert [d["image"] for d in docs] == ["a", "b"]
    assert all("xyxy" in p for p in docs[0]["prompts"])
    assert all("xy" in p for p in docs[1]["prompts"])
    ids = {p["det"] for d in docs for p in d["prompts"]}
    assert ids <= set(range(len(dets)))


def test_fuse_scores():
    assert fuse_scores(0.25, 1.0) == pytest.approx(0.5)
    assert fuse_scores(1.0, 1.0) == 1.0
    assert fuse_scores(0.3, 0.7) == fuse_scores(0.7, 0.3)
    a, b = 0.2, 0.9
    assert min(a, b) <= fuse_scores(a, b) <= max(a, b)
    with pytest.raises(ValueError):
        fuse_scores(1.2, 0.5)


def test_adopt_identical_mask_updates_only_confidence():
    det = det_at(2, 2, 3, 3, score=0.64)
    refined = {0: (encode_rle(det.mask), 1.0)}
    out = adopt_refined_masks([det], refined)
    assert len(out) == 1
    assert np.array_equal(out[0].mask, det.mask)
    assert out[0].box == det.box
    assert out[0].score == pytest.approx(0.8)


def test_adopt_empty_refined_mask_passes_through():
    det = det_at(2, 2, 3, 3, score=0.5)
    empty = encode_rle(np.zeros((12, 12), dtype=bool))
    out = adopt_refined_masks([det], {0: (empty, 0.9)})
    assert out[0] is det


def test_adopt_shifted_mask_recomputes_box():
    det = det_at(2, 2, 3, 3, score=0.5)
    shifted = np.zeros((12, 12), dtype=bool)
    shifted[4:7, 4:7] = True
    out = adopt_refined_masks([det], {0: (encode_rle(shifted), 0.5)})
    assert out[0].box == mask_tight_box(shifted)
    assert np.array_equal(out[0].mask, shifted)


def test_adopt_keeps_count_and_categories():
    dets = [det_at(0, 0, 2, 2, category="cup"), det_at(6, 6, 3, 3, category="mug")]
    shifted = np.zeros((12, 12), dtype=bool)
    shifted[1:3, 1:3] = True
    out = adopt_refined_masks(dets, {0: (encode_rle(shifted), 0.7)})
    assert [d.category for d in out] == ["cup", "mug"]
    assert out[1] is dets[1]


def test_adopt_rejects_shape_mismatch():
    det = det_at(0, 0, 2, 2)
    wrong = encode_rle(np.ones((5, 5), dtype=bool))
    with pytest.raises(ValueError):
        adopt_refined_masks([det], {0: (wrong, 0.5)})


def test_results_round_trip(tmp_path):
    mask = np.zeros((6, 6), dtype=bool)
    mask[1:4, 2:5] = True
    doc = [{"image": "img", "step": 1,
            "prompts": [{"det": 0, "rle": encode_rle(mask), "score": 0.8}]}]
    path = tmp_path / "results.json"
    path.write_text(json.dumps(doc))
    results = load_results(path)
    step, entries = results["img"]
    assert step == 1
    boxes = refined_boxes_from_results(entries)
    assert boxes[0] == mask_tight_box(mask)


def test_results_skip_empty_boxes(tmp_path):
    empty = encode_rle(np.zeros((4, 4), dtype=bool))
    doc = {"image": "img", "step": 1,
           "prompts": [{"det": 0, "rle": empty, "score": 0.2}]}
    path = tmp_path / "results.json"
    path.write_text(json.dumps(doc))
    _, entries = load_results(path)["img"]
    assert refined_boxes_from_results(entries) == {}
