"""Image to VIBE1 feature extraction."""

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from feature_bridge.errors import ExtractionError
from feature_bridge.vibe_format import write_tokens


def _load_pixels(image_path, size):
    try:
        with Image.open(image_path) as img:
            img = img.convert("RGB")
            if img.size != (size, size):
                img = img.resize((size, size), Image.Resampling.BILINEAR)
            return np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ExtractionError(f"cannot read image {image_path}: {exc}") from exc


def extract(image_path, space, config, out_path=None):
    """Encode one image into a VIBE1 token grid and return the written path.

    The file is written atomically: a failed extraction leaves nothing behind.
    """
    backbone = config.backbone_for(space)
    pixels = _load_pixels(image_path, config.image_size)
    tokens = backbone.encode(pixels)
    grid = config.image_size // backbone.patch_size
    if out_path is None:
        stem = Path(image_path).stem
        out_path = Path(config.output_dir) / f"{stem}_{space}.vibe"
    os.makedirs(Path(out_path).parent, exist_ok=True)
    write_tokens(out_path, tokens, Path(image_path).stem, grid, grid, space)
    return Path(out_path)


def extract_batch(image_paths, space, config, max_workers=4):
    """Extract several images in parallel; returns paths in input order."""
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda p: extract(p, space, config), image_paths))
