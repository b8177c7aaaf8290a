import numpy as np
import pytest
from PIL import Image

from extractor.models import load_variant


@pytest.fixture(scope="session")
def stub():
    return load_variant("stub")


@pytest.fixture()
def rect_images(tmp_path):
    """Factory writing rectangle-collage PNGs; returns (dir, paths)."""

    def make(n, seed=3, size=(200, 160)):
        rng = np.random.default_rng(seed)
        root = tmp_path / "imgs"
        root.mkdir(exist_ok=True)
        paths = []
        for i in range(n):
            canvas = np.full(size + (3,), 120, dtype=np.uint8)
            for _ in range(3):
                h = int(rng.integers(40, 80))
                w = int(rng.integers(40, 80))
                r0 = int(rng.integers(0, size[0] - h))
                c0 = int(rng.integers(0, size[1] - w))
                canvas[r0:r0 + h, c0:c0 + w] = rng.integers(0, 256, 3)
            path = root / f"photo{i}.png"
            Image.fromarray(canvas).save(path)
            paths.append(path)
        return root, paths

    return make
