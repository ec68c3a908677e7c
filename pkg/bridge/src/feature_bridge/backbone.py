"""Deterministic patch-statistics backbones.

Real deployments plug transformer backbones in here; this module ships a
self-contained family named ``patchstats<P>-<D>`` (patch size P, output dim D)
that maps every non-overlapping P x P patch to per-channel moment and gradient
statistics and projects them through a projection matrix derived from the
backbone name. Inference is exact arithmetic on the decoded pixels, so the
same image always produces byte-identical features.
"""

import re
import zlib

import numpy as np

from feature_bridge.errors import ExtractionError

_NAME_RE = re.compile(r"^patchstats(\d+)-(\d+)$")

# per patch: 3 channel means, 3 channel stds, 6 mean |gradient| values
# (horizontal and vertical per channel), 2 normalized grid positions
_N_STATS = 14


class Backbone:
    """A named patch-statistics feature extractor."""

    def __init__(self, name):
        match = _NAME_RE.match(name)
        if match is None:
            raise ExtractionError(
                f"unknown backbone {name!r}, expected patchstats<patch>-<dim>"
            )
        self.name = name
        self.patch_size = int(match.group(1))
        self.dim = int(match.group(2))
        if self.patch_size < 1 or self.dim < 1:
            raise ExtractionError(f"backbone {name!r} has non-positive patch or dim")
        rng = np.random.default_rng(zlib.crc32(name.encode("utf-8")))
        self.projection = rng.standard_normal((_N_STATS, self.dim)) / np.sqrt(_N_STATS)

    def encode(self, pixels):
        """Map an (H, W, 3) float image in [0, 1] to a (grid*grid, dim) array."""
        height, width = pixels.shape[:2]
        if height != width or height % self.patch_size != 0:
            raise ExtractionError(
                f"image size {height}x{width} is not a square multiple of "
                f"patch size {self.patch_size}"
            )
        grid = height // self.patch_size
        patches = pixels.reshape(grid, self.patch_size, grid, self.patch_size, 3)
        patches = patches.transpose(0, 2, 1, 3, 4)  # (gy, gx, P, P, 3)
        means = patches.mean(axis=(2, 3))
        stds = patches.std(axis=(2, 3))
        grad_x = np.abs(np.diff(patches, axis=3)).mean(axis=(2, 3))
        grad_y = np.abs(np.diff(patches, axis=2)).mean(axis=(2, 3))
        pos_y, pos_x = np.meshgrid(
            np.arange(grid) / grid, np.arange(grid) / grid, indexing="ij"
        )
        stats = np.concatenate(
            [means, stds, grad_x, grad_y, pos_y[..., None], pos_x[..., None]], axis=-1
        )
        return stats.reshape(grid * grid, _N_STATS) @ self.projection
