"""Figure helpers render non-empty PNGs headlessly."""

import numpy as np

from vibespace.metrics import PnsReport
from vibespace.report import (
    save_embedding_figure,
    save_path_figure,
    save_pns_figure,
    save_score_curve,
)


def _is_png(path):
    return path.stat().st_size > 0 and path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_embedding_figure(tmp_path, rng):
    coords = rng.standard_normal((20, 2))
    plain = tmp_path / "plain.png"
    save_embedding_figure(coords, plain)
    assert _is_png(plain)
    labeled = tmp_path / "labeled.png"
    save_embedding_figure(coords, labeled, labels=np.arange(20) % 3)
    assert _is_png(labeled)
    one_dim = tmp_path / "one.png"
    save_embedding_figure(coords[:, :1], one_dim)
    assert _is_png(one_dim)


def test_path_figure(tmp_path, rng):
    latents = [rng.standard_normal((10, 3)) for _ in range(4)]
    out = tmp_path / "path.png"
    save_path_figure([0.0, 0.25, 0.5, 1.0], latents, out)
    assert _is_png(out)


def test_score_curve(tmp_path):
    out = tmp_path / "curve.png"
    save_score_curve([0.0, 0.5, 1.0], [0.9, 0.4, 0.8], out, selected=0.5)
    assert _is_png(out)


def test_pns_figure(tmp_path):
    reports = [
        PnsReport(length_ratio=1.0, mean_direction_change=0.0, normalized_pns=0.0),
        PnsReport(length_ratio=1.4, mean_direction_change=0.3, normalized_pns=1.0),
    ]
    out = tmp_path / "pns.png"
    save_pns_figure(reports, out)
    assert _is_png(out)
