"""The bridge's container I/O round-trips and matches the shared contract."""

import numpy as np
import pytest

from feature_bridge.errors import BridgeError
from feature_bridge.vibe_format import parse_tokens, read_tokens, write_tokens


def test_round_trip(tmp_path):
    tokens = np.arange(24.0).reshape(6, 4)
    path = tmp_path / "grid.vibe"
    write_tokens(path, tokens, "img", 2, 3, "target")
    meta, back = read_tokens(path)
    assert meta["image_id"] == "img"
    assert (meta["height"], meta["width"], meta["dim"]) == (2, 3, 4)
    assert meta["space"] == "target"
    np.testing.assert_array_equal(back, tokens)


def test_cross_validates_against_primary_reader(tmp_path):
    vibespace_io = pytest.importorskip("vibespace.feature_io")
    rng = np.random.default_rng(0)
    tokens = rng.standard_normal((12, 5))
    ours = tmp_path / "ours.vibe"
    write_tokens(ours, tokens, "x", 3, 4, "source")
    grid = vibespace_io.read_feature_file(ours)
    assert (grid.height, grid.width, grid.dim, grid.space) == (3, 4, 5, "source")
    np.testing.assert_array_equal(grid.tokens, tokens.astype(np.float32))

    theirs = tmp_path / "theirs.vibe"
    vibespace_io.write_feature_file(
        vibespace_io.FeatureGrid(
            image_id="x", height=3, width=4, dim=5, space="source", tokens=tokens
        ),
        theirs,
    )
    assert theirs.read_bytes() == ours.read_bytes()


def test_write_rejects_bad_inputs(tmp_path):
    path = tmp_path / "bad.vibe"
    with pytest.raises(BridgeError, match="space"):
        write_tokens(path, np.zeros((4, 2)), "x", 2, 2, "latent")
    with pytest.raises(BridgeError, match="shape"):
        write_tokens(path, np.zeros((3, 2)), "x", 2, 2, "target")
    with pytest.raises(BridgeError, match="non-finite"):
        write_tokens(path, np.full((4, 2), np.nan), "x", 2, 2, "target")
    assert not path.exists()
    assert list(tmp_path.glob("*.tmp")) == []


def test_parse_rejects_corrupt_payloads(tmp_path):
    with pytest.raises(BridgeError, match="bad magic"):
        parse_tokens(b"NOPE")
    tokens = np.zeros((4, 2))
    path = tmp_path / "grid.vibe"
    write_tokens(path, tokens, "x", 2, 2, "target")
    data = path.read_bytes()
    with pytest.raises(BridgeError, match="truncated payload"):
        parse_tokens(data[:-4])
    with pytest.raises(BridgeError, match="truncated header"):
        parse_tokens(data[:12])
