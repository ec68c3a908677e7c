"""Self-contained reader/writer for the VIBE1 token-grid container.

The bridge ships its own implementation of the shared on-disk contract so it
can run without the analysis library installed: 6-byte magic ``VIBE1\\0``, a
little-endian uint32 header length, a UTF-8 JSON header, then
``height*width*dim`` little-endian float32 values in row-major order.
"""

import json
import os
import struct
import tempfile

import numpy as np

from feature_bridge.errors import BridgeError

MAGIC = b"VIBE1\x00"
FORMAT_VERSION = 1
SPACES = ("source", "target", "raw")


def write_tokens(path, tokens, image_id, height, width, space):
    """Atomically write a (height*width, dim) token array as a VIBE1 file.

    The payload lands in a temporary sibling file first and is renamed into
    place, so a failure mid-write never leaves a partial file at ``path``.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if space not in SPACES:
        raise BridgeError(f"space must be one of {SPACES}, got {space!r}")
    if tokens.ndim != 2 or tokens.shape[0] != height * width:
        raise BridgeError(
            f"token shape {tokens.shape} does not match ({height * width}, dim)"
        )
    if not np.isfinite(tokens).all():
        raise BridgeError("tokens contain non-finite values")
    meta = {
        "version": FORMAT_VERSION,
        "image_id": image_id,
        "height": height,
        "width": width,
        "dim": tokens.shape[1],
        "space": space,
        "dtype": "f32",
        "order": "row-major",
        "endian": "little",
    }
    header = json.dumps(meta).encode("utf-8")
    payload = np.ascontiguousarray(tokens, dtype="<f4").tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_tokens(data, origin="<bytes>"):
    """Parse VIBE1 bytes into (meta, tokens) with full header validation."""
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise BridgeError(f"{origin}: bad magic, not a VIBE1 payload")
    (header_len,) = struct.unpack_from("<I", data, len(MAGIC))
    header_end = len(MAGIC) + 4 + header_len
    if len(data) < header_end:
        raise BridgeError(f"{origin}: truncated header")
    try:
        meta = json.loads(data[len(MAGIC) + 4 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BridgeError(f"{origin}: unreadable header: {exc}") from exc
    if meta.get("dtype") != "f32":
        raise BridgeError(f"{origin}: unknown dtype {meta.get('dtype')!r}")
    if meta.get("order") != "row-major" or meta.get("endian") != "little":
        raise BridgeError(f"{origin}: unsupported order/endian in header")
    try:
        height, width, dim = int(meta["height"]), int(meta["width"]), int(meta["dim"])
    except KeyError as exc:
        raise BridgeError(f"{origin}: header missing field {exc}") from exc
    expected = height * width * dim * 4
    payload = data[header_end:]
    if len(payload) != expected:
        raise BridgeError(
            f"{origin}: truncated payload, expected {expected} bytes, got {len(payload)}"
        )
    tokens = np.frombuffer(payload, dtype="<f4").reshape(height * width, dim)
    return meta, tokens.astype(np.float64)


def read_tokens(path):
    """Read a VIBE1 file into (meta, tokens)."""
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_tokens(data, origin=str(path))
