import numpy as np
import pytest
from PIL import Image


@pytest.fixture
def png_image(tmp_path):
    """Deterministic 96x96 RGB gradient PNG."""

    def _make(name="img.png", size=96, seed=0):
        rng = np.random.default_rng(seed)
        y, x = np.mgrid[0:size, 0:size] / size
        rgb = np.stack([x, y, rng.random() * np.ones_like(x)], axis=-1)
        path = tmp_path / name
        Image.fromarray((rgb * 255).astype(np.uint8)).save(path)
        return path

    return _make
