"""End-to-end CLI smoke tests: artifacts on disk and exit-code contracts."""

import json

import numpy as np
import pytest

from toy_grids import make_toy_grid
from vibespace.cli import main
from vibespace.feature_io import read_feature_file, write_feature_file

TRAIN_FLAGS = [
    "--total-steps", "15", "--hidden-dim", "16", "--n-layers", "2",
    "--latent-dim", "3", "--sample-loss-warmup", "15", "--k", "3",
]


@pytest.fixture
def grid_files(tmp_path):
    paths = {}
    for name, seed in (("a", 0), ("b", 1), ("c", 2), ("d", 3)):
        grid = make_toy_grid(5, 5, 3, seed=seed, image_id=name)
        path = tmp_path / f"{name}.vibe"
        write_feature_file(grid, path)
        paths[name] = str(path)
    return paths


def test_synth_writes_feature_file(tmp_path):
    out = tmp_path / "cloud.vibe"
    assert main(["synth", "--kind", "circle", "--n", "16", "--out", str(out)]) == 0
    grid = read_feature_file(out)
    assert grid.n_tokens == 16 and grid.dim == 2


def test_eigenmap_outputs(tmp_path, grid_files):
    out = tmp_path / "eig"
    code = main(["eigenmap", "--input", grid_files["a"], "--m", "6",
                 "--output-dir", str(out)])
    assert code == 0
    assert (out / "eigenvectors.vibe").exists()
    assert (out / "embedding.png").stat().st_size > 0
    lines = (out / "eigenvalues.csv").read_text().strip().splitlines()
    assert lines[0] == "index,eigenvalue"
    assert len(lines) == 7
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["m"] == 6
    vecs = read_feature_file(out / "eigenvectors.vibe")
    assert vecs.dim == 6 and vecs.n_tokens == 25


def test_train_and_select_alpha_round_trip(tmp_path, grid_files):
    model_dir = tmp_path / "model"
    code = main(["train", "--source", grid_files["a"], "--target", grid_files["a"],
                 *TRAIN_FLAGS, "--output-dir", str(model_dir)])
    assert code == 0
    assert (model_dir / "model.vibe").exists()
    metrics = json.loads((model_dir / "metrics.json").read_text())
    assert set(metrics["final_losses"]) == {"flag_enc", "flag_dec", "sample", "recon"}

    blend_dir = tmp_path / "blend"
    code = main(["blend", "--a", grid_files["a"], "--b", grid_files["b"],
                 *TRAIN_FLAGS, "--alphas", "0,0.5,1", "--output-dir", str(blend_dir)])
    assert code == 0
    manifest = json.loads((blend_dir / "manifest.json").read_text())
    assert manifest["alphas"] == [0.0, 0.5, 1.0]
    for name in manifest["files"] + manifest["latent_files"]:
        assert (blend_dir / name).exists()
    assert (blend_dir / "path.png").stat().st_size > 0
    assert (blend_dir / "path.csv").read_text().startswith("alpha,")

    # realized features = the exported ideal decodings themselves
    sel_dir = tmp_path / "sel"
    code = main(["select-alpha", "--model", str(model_dir / "model.vibe"),
                 "--blend-dir", str(blend_dir), "--realized-dir", str(blend_dir),
                 "--k", "3", "--output-dir", str(sel_dir)])
    assert code == 0
    metrics = json.loads((sel_dir / "metrics.json").read_text())
    assert metrics["alpha_star"] in (0.0, 0.5, 1.0)
    assert len(metrics["scores"]) == 3
    assert (sel_dir / "consistency.png").stat().st_size > 0

    # pns over the exported blend directory
    pns_dir = tmp_path / "pns"
    assert main(["pns", "--paths", str(blend_dir), "--output-dir", str(pns_dir)]) == 0
    assert (pns_dir / "pns.csv").exists()
    assert (pns_dir / "pns.png").stat().st_size > 0
    rows = json.loads((pns_dir / "metrics.json").read_text())["paths"]
    assert rows[0]["length_ratio"] >= 1.0


def test_analogy_and_negblend_and_nblend(tmp_path, grid_files):
    out = tmp_path / "analogy"
    code = main(["analogy", "--a", grid_files["a"], "--b", grid_files["b"],
                 "--aprime", grid_files["c"], *TRAIN_FLAGS,
                 "--alphas", "0,1", "--output-dir", str(out)])
    assert code == 0
    assert (out / "manifest.json").exists()

    out = tmp_path / "neg"
    code = main(["negblend", "--a", grid_files["a"], "--b", grid_files["b"],
                 "--neg-a", grid_files["c"], "--neg-c", grid_files["d"],
                 "--beta", "1.0", *TRAIN_FLAGS, "--alphas", "0,1",
                 "--output-dir", str(out)])
    assert code == 0
    assert (out / "manifest.json").exists()

    out = tmp_path / "nblend"
    code = main(["nblend", "--inputs", grid_files["a"], grid_files["b"],
                 "--base", "0", "--weights", "0.5", *TRAIN_FLAGS,
                 "--output-dir", str(out)])
    assert code == 0
    blended = read_feature_file(out / "nblend.vibe")
    assert blended.n_tokens == 25 and blended.space == "target"


def test_match_outputs(tmp_path, grid_files):
    out = tmp_path / "match"
    code = main(["match", "--a", grid_files["a"], "--b", grid_files["b"],
                 "--k", "3", "--output-dir", str(out)])
    assert code == 0
    corr = json.loads((out / "correspondence.json").read_text())
    assert sorted(corr["pi"]) == [0, 1, 2]
    assert corr["segmentation_a"]["k"] == 3
    assert (out / "segments.png").stat().st_size > 0


def test_diversity_and_masked_sim_and_btfit(tmp_path, grid_files):
    out = tmp_path / "div"
    code = main(["diversity", "--inputs", grid_files["a"], grid_files["b"],
                 "--output-dir", str(out)])
    assert code == 0
    assert "diversity" in json.loads((out / "metrics.json").read_text())

    mask = tmp_path / "mask.json"
    mask.write_text(json.dumps([1] * 10 + [0] * 15))
    out = tmp_path / "sim"
    code = main(["masked-sim", "--a", grid_files["a"], "--b", grid_files["b"],
                 "--mask-a", str(mask), "--mask-b", str(mask),
                 "--output-dir", str(out)])
    assert code == 0
    value = json.loads((out / "metrics.json").read_text())["masked_similarity"]
    assert -1.0 <= value <= 1.0

    comps = tmp_path / "comps.json"
    comps.write_text(json.dumps([["a", "b"]] * 3 + [["b", "a"]]))
    out = tmp_path / "bt"
    code = main(["btfit", "--comparisons", str(comps), "--output-dir", str(out)])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    ratio = metrics["strengths"][0] / metrics["strengths"][1]
    assert ratio == pytest.approx(3.0, abs=1e-6)
    assert set(metrics["bins"]) == {"low", "medium", "high"}


def test_config_file_merge_and_flag_priority(tmp_path, grid_files):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "total_steps": 10, "hidden_dim": 16, "n_layers": 2, "latent_dim": 5,
        "sample_loss_warmup": 10, "k": 3,
    }))
    out = tmp_path / "model"
    code = main(["train", "--source", grid_files["a"], "--target", grid_files["a"],
                 "--config", str(config), "--latent-dim", "2",
                 "--output-dir", str(out)])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["latent_dim"] == 2  # flag beats config file


def test_validation_errors_exit_2(tmp_path, grid_files, capsys):
    assert main(["eigenmap", "--input", str(tmp_path / "missing.vibe")]) == 2
    assert "file not found" in capsys.readouterr().err

    assert main(["blend", "--a", grid_files["a"], "--b", grid_files["b"],
                 "--alphas", "0,zap", "--output-dir", str(tmp_path / "x")]) == 2
    assert "invalid alphas" in capsys.readouterr().err

    bad_config = tmp_path / "bad.json"
    bad_config.write_text("{not json")
    assert main(["train", "--source", grid_files["a"], "--target", grid_files["a"],
                 "--config", str(bad_config)]) == 2
    assert "not valid JSON" in capsys.readouterr().err

    comps = tmp_path / "onesided.json"
    comps.write_text(json.dumps([["a", "b"], ["a", "b"]]))
    assert main(["btfit", "--comparisons", str(comps),
                 "--output-dir", str(tmp_path / "bt")]) == 2


def test_runtime_errors_exit_1(tmp_path, grid_files):
    model_dir = tmp_path / "model"
    assert main(["train", "--source", grid_files["a"], "--target", grid_files["a"],
                 *TRAIN_FLAGS, "--output-dir", str(model_dir)]) == 0
    blend_dir = tmp_path / "blend"
    assert main(["blend", "--a", grid_files["a"], "--b", grid_files["b"],
                 *TRAIN_FLAGS, "--alphas", "0,1",
                 "--output-dir", str(blend_dir)]) == 0
    empty = tmp_path / "empty"
    empty.mkdir()
    # every realized file is missing -> the provider fails at every alpha
    code = main(["select-alpha", "--model", str(model_dir / "model.vibe"),
                 "--blend-dir", str(blend_dir), "--realized-dir", str(empty),
                 "--k", "3", "--output-dir", str(tmp_path / "sel")])
    assert code == 1
