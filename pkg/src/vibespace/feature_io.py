"""Feature-grid data model, the VIBE1 on-disk container, and synthetic point clouds.

The container layout is: 6-byte magic ``VIBE1\\0``, a little-endian uint32
header length, a UTF-8 JSON header, then ``height*width*dim`` little-endian
float32 values in row-major order.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from vibespace.errors import FeatureFileError

MAGIC = b"VIBE1\x00"
FORMAT_VERSION = 1

SPACES = ("source", "target", "raw")


@dataclass(frozen=True)
class FeatureGrid:
    """A dense token field of shape (height*width, dim) tagged with its feature space."""

    image_id: str
    height: int
    width: int
    dim: int
    space: str
    tokens: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.dim < 1:
            raise ValueError("height, width and dim must be positive")
        if self.space not in SPACES:
            raise ValueError(f"space must be one of {SPACES}, got {self.space!r}")
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.shape != (self.height * self.width, self.dim):
            raise ValueError(
                f"tokens shape {tokens.shape} does not match "
                f"({self.height * self.width}, {self.dim})"
            )
        if not np.isfinite(tokens).all():
            raise ValueError("tokens contain non-finite values")
        object.__setattr__(self, "tokens", tokens)

    @property
    def n_tokens(self):
        return self.height * self.width


def write_feature_file(grid, path):
    """Write a grid to ``path`` in the VIBE1 container format."""
    meta = {
        "version": FORMAT_VERSION,
        "image_id": grid.image_id,
        "height": grid.height,
        "width": grid.width,
        "dim": grid.dim,
        "space": grid.space,
        "dtype": "f32",
        "order": "row-major",
        "endian": "little",
    }
    header = json.dumps(meta).encode("utf-8")
    payload = np.ascontiguousarray(grid.tokens, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def read_feature_file(path):
    """Read a VIBE1 container back into a FeatureGrid."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise FeatureFileError(f"{path}: bad magic, not a VIBE1 file")
    (header_len,) = struct.unpack_from("<I", data, len(MAGIC))
    header_end = len(MAGIC) + 4 + header_len
    if len(data) < header_end:
        raise FeatureFileError(f"{path}: truncated header")
    try:
        meta = json.loads(data[len(MAGIC) + 4 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FeatureFileError(f"{path}: unreadable header: {exc}") from exc
    if meta.get("dtype") != "f32":
        raise FeatureFileError(f"{path}: unknown dtype {meta.get('dtype')!r}")
    if meta.get("order") != "row-major" or meta.get("endian") != "little":
        raise FeatureFileError(f"{path}: unsupported order/endian in header")
    try:
        height, width, dim = int(meta["height"]), int(meta["width"]), int(meta["dim"])
    except KeyError as exc:
        raise FeatureFileError(f"{path}: header missing field {exc}") from exc
    expected = height * width * dim * 4
    payload = data[header_end:]
    if len(payload) != expected:
        raise FeatureFileError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}"
        )
    tokens = np.frombuffer(payload, dtype="<f4").reshape(height * width, dim)
    return FeatureGrid(
        image_id=str(meta.get("image_id", "")),
        height=height,
        width=width,
        dim=dim,
        space=str(meta.get("space", "")),
        tokens=tokens.astype(np.float64),
    )


def synth_point_cloud(kind, n, noise=0.0, seed=0):
    """Generate a synthetic point cloud as an n x 1 FeatureGrid with space "raw".

    kinds: "circle" (2D, equally spaced on the unit circle), "swiss_roll"
    (3D spiral, radius equal to the roll parameter), "two_arcs" (2D
    interleaving half-moons). Noise displaces each point uniformly within a
    ball of the given radius, so every point stays within noise-distance of
    the ideal manifold.
    """
    if n < 4:
        raise ValueError(f"n must be at least 4, got {n}")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    if kind == "circle":
        theta = 2.0 * np.pi * np.arange(n) / n
        pts = np.column_stack([np.cos(theta), np.sin(theta)])
    elif kind == "swiss_roll":
        u = np.sort(rng.uniform(1.5 * np.pi, 4.5 * np.pi, size=n))
        y = rng.uniform(0.0, 4.0, size=n)
        pts = np.column_stack([u * np.cos(u), y, u * np.sin(u)])
    elif kind == "two_arcs":
        half = n // 2
        t1 = np.linspace(0.0, np.pi, half)
        t2 = np.linspace(0.0, np.pi, n - half)
        arc1 = np.column_stack([np.cos(t1), np.sin(t1)])
        arc2 = np.column_stack([1.0 - np.cos(t2), 0.5 - np.sin(t2)])
        pts = np.vstack([arc1, arc2])
    else:
        raise ValueError(f"unknown cloud kind {kind!r}")
    if noise > 0:
        # uniform sample in the unit ball, scaled by the noise radius
        d = pts.shape[1]
        direction = rng.standard_normal((n, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = noise * rng.uniform(0.0, 1.0, size=n) ** (1.0 / d)
        pts = pts + direction * radius[:, None]
    return FeatureGrid(
        image_id=f"{kind}-n{n}-seed{seed}",
        height=n,
        width=1,
        dim=pts.shape[1],
        space="raw",
        tokens=pts,
    )
