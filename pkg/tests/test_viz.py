"""Rendering helpers: palettes, labeling colors, overlays."""
import numpy as np

from fragseg import viz


def test_palette_deterministic_and_distinct():
    a = viz.palette(12)
    assert a == viz.palette(12)
    assert len(set(a)) == 12
    assert all(0 <= c <= 255 for rgb in a for c in rgb)
    # prefixes agree, so colors stay stable as n grows
    assert viz.palette(20)[:12] == a


def test_render_labeling_one_color_per_label():
    labels = np.array([[0, 0, 1], [2, 2, 1]])
    rgb = viz.render_labeling(labels)
    assert rgb.shape == (2, 3, 3) and rgb.dtype == np.uint8
    colors = {tuple(rgb[r, c]) for r in range(2) for c in range(3)}
    assert len(colors) == 3
    assert tuple(rgb[0, 0]) == tuple(rgb[0, 1])
    assert tuple(rgb[0, 2]) == tuple(rgb[1, 2])


def test_render_labeling_constant_input():
    rgb = viz.render_labeling(np.zeros((4, 4), dtype=np.int32))
    assert (rgb == rgb[0, 0]).all()


def test_overlay_two_masks_get_two_colors():
    m1 = np.zeros((8, 8), dtype=bool)
    m1[:4, :4] = True
    m2 = np.zeros((8, 8), dtype=bool)
    m2[4:, 4:] = True
    rgb = viz.render_overlay(None, [m1, m2])
    assert rgb.shape == (8, 8, 3)
    assert tuple(rgb[0, 0]) != tuple(rgb[7, 7])
    # untouched cells keep the gray canvas
    assert tuple(rgb[0, 7]) == (48, 48, 48)


def test_overlay_without_masks_copies_base():
    base = np.full((5, 6, 3), 200, dtype=np.uint8)
    rgb = viz.render_overlay(base, [])
    assert (rgb == base).all()
    rgb[0, 0] = 0
    assert base[0, 0, 0] == 200  # copy, not a view


def test_overlay_grayscale_base_promoted():
    base = np.full((4, 4), 100, dtype=np.uint8)
    mask = np.zeros((4, 4), dtype=bool)
    mask[1, 1] = True
    rgb = viz.render_overlay(base, [mask])
    assert rgb.shape == (4, 4, 3)
    assert tuple(rgb[0, 0]) == (100, 100, 100)
    assert tuple(rgb[1, 1]) != (100, 100, 100)


def test_overlay_blends_half_and_half():
    base = np.zeros((2, 2, 3), dtype=np.uint8)
    mask = np.ones((2, 2), dtype=bool)
    rgb = viz.render_overlay(base, [mask])
    expect = tuple(int(0.5 * c) for c in viz.palette(1)[0])
    assert tuple(rgb[0, 0]) == expect


def test_overlay_needs_some_shape():
    try:
        viz.render_overlay(None, [])
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError without base, shape, or masks")


def test_save_png_writes_signature(tmp_path):
    rgb = viz.render_labeling(np.arange(9).reshape(3, 3))
    path = tmp_path / "out.png"
    viz.save_png(path, rgb)
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
