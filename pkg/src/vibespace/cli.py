"""Command-line surface over VIBE1 feature files and JSON configs.

Exit codes: 0 success, 2 validation error (message names the offending
field), 1 runtime failure. Heavy imports happen after the VIBE_THREADS cap is
applied so the BLAS thread limit takes effect.
"""

import argparse
import csv
import json
import logging
import os
import sys

log = logging.getLogger(__name__)

TRAIN_DEFAULTS = {
    "learning_rate": 0.001,
    "total_steps": 1000,
    "hidden_dim": 256,
    "n_layers": 4,
    "latent_dim": 6,
    "lambda_flag_enc": 1.0,
    "lambda_flag_dec": 0.01,
    "lambda_sample": 0.01,
    "lambda_recon": 1.0,
    "sample_loss_warmup": 500,
    "seed": 0,
}


def _apply_thread_cap():
    cap = os.environ.get("VIBE_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = cap


def _load_config_file(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ValueError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _train_config(args):
    """Merge defaults < JSON config < command-line flags into a TrainConfig."""
    from vibespace.vibe_model import TrainConfig

    merged = dict(TRAIN_DEFAULTS)
    cfg = _load_config_file(getattr(args, "config", None))
    for key in merged:
        if key in cfg:
            merged[key] = cfg[key]
    for key in merged:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    try:
        return TrainConfig(**merged), cfg
    except ValueError as exc:
        raise ValueError(f"invalid training config: {exc}") from exc


def _parse_floats(text, field):
    try:
        return [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise ValueError(f"invalid {field}: {exc}") from exc


def _read_grid(path, field):
    from vibespace.feature_io import read_feature_file

    if not os.path.exists(path):
        raise ValueError(f"{field}: file not found: {path}")
    return read_feature_file(path)


def _write_json(payload, path):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _job_value(args, cfg, name, default):
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    return cfg.get(name, default)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from vibespace.feature_io import synth_point_cloud, write_feature_file

    grid = synth_point_cloud(args.kind, args.n, noise=args.noise, seed=args.seed)
    write_feature_file(grid, args.out)
    print(f"wrote {args.out}: {grid.n_tokens} x {grid.dim} ({grid.image_id})")
    return 0


def cmd_eigenmap(args):
    import numpy as np

    from vibespace.feature_io import FeatureGrid, write_feature_file
    from vibespace.graph_spectral import build_affinity, solve_diffusion_map
    from vibespace.report import save_embedding_figure

    grid = _read_grid(args.input, "input")
    graph = build_affinity(grid.tokens, sigma_sq=args.sigma_sq)
    m = args.m if args.m is not None else min(grid.n_tokens, 11)
    dmap = solve_diffusion_map(graph, m, t=args.t)
    os.makedirs(args.output_dir, exist_ok=True)
    psi_grid = FeatureGrid(
        image_id=f"{grid.image_id}/eigenvectors",
        height=grid.height,
        width=grid.width,
        dim=dmap.m,
        space="raw",
        tokens=dmap.eigenvectors,
    )
    write_feature_file(psi_grid, os.path.join(args.output_dir, "eigenvectors.vibe"))
    with open(os.path.join(args.output_dir, "eigenvalues.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "eigenvalue"])
        for i, val in enumerate(dmap.eigenvalues):
            writer.writerow([i, f"{val:.12g}"])
    _write_json(
        {"image_id": grid.image_id, "m": dmap.m, "t": dmap.t,
         "sigma_sq": graph.sigma_sq, "eigenvalues": dmap.eigenvalues.tolist()},
        os.path.join(args.output_dir, "metrics.json"),
    )
    if dmap.m >= 3:
        save_embedding_figure(
            dmap.eigenvectors[:, 1:3], os.path.join(args.output_dir, "embedding.png")
        )
    print(f"wrote eigen decomposition ({dmap.m} components) to {args.output_dir}")
    return 0


def cmd_train(args):
    from vibespace.blending import _joint_embedding
    from vibespace.vibe_model import save_model, train_vibe_space

    source = _read_grid(args.source, "source")
    target = _read_grid(args.target, "target")
    config, cfg = _train_config(args)
    k = _job_value(args, cfg, "k", 10)
    _, psi, scales = _joint_embedding([target], config, k)
    model = train_vibe_space(source.tokens, target.tokens, psi, scales, config)
    os.makedirs(args.output_dir, exist_ok=True)
    model_path = os.path.join(args.output_dir, "model.vibe")
    save_model(model, model_path)
    _write_json(
        {"final_losses": model.final_losses, "scales": list(model.scales),
         "latent_dim": model.latent_dim, "training_sigma_sq": model.training_sigma_sq},
        os.path.join(args.output_dir, "metrics.json"),
    )
    print(f"wrote {model_path}; final losses {model.final_losses}")
    return 0


def _job_alphas(args, cfg):
    if args.alphas is not None:
        return _parse_floats(args.alphas, "alphas")
    raw = cfg.get("alphas", "0,0.25,0.5,0.75,1")
    if isinstance(raw, list):
        return [float(a) for a in raw]
    return _parse_floats(str(raw), "alphas")


def _run_path_job(args, build_path):
    import numpy as np

    from vibespace.blending import export_blend_path
    from vibespace.report import save_path_figure

    config, cfg = _train_config(args)
    k = _job_value(args, cfg, "k", 10)
    seed = config.seed
    alphas = _job_alphas(args, cfg)
    path = build_path(config, alphas, k, seed)
    export_blend_path(path, args.output_dir, config, k, seed)
    save_path_figure(path.alphas, path.latents, os.path.join(args.output_dir, "path.png"))
    with open(os.path.join(args.output_dir, "path.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "mean_latent_norm", "step_delta_norm"])
        for i, alpha in enumerate(path.alphas):
            step = (
                float(np.linalg.norm(path.step_deltas[i - 1])) if i > 0 else 0.0
            )
            writer.writerow([alpha, float(np.linalg.norm(path.latents[i], axis=1).mean()), step])
    print(f"wrote blend path ({len(path.alphas)} alphas) to {args.output_dir}")
    return 0


def cmd_blend(args):
    from vibespace.blending import vibe_blend

    grid_a = _read_grid(args.a, "a")
    grid_b = _read_grid(args.b, "b")
    target_a = _read_grid(args.target_a, "target-a") if args.target_a else grid_a
    target_b = _read_grid(args.target_b, "target-b") if args.target_b else grid_b

    def build(config, alphas, k, seed):
        return vibe_blend(grid_a, grid_b, target_a, target_b, config, alphas, k=k, seed=seed)

    return _run_path_job(args, build)


def cmd_analogy(args):
    from vibespace.blending import vibe_analogy

    grid_a = _read_grid(args.a, "a")
    grid_b = _read_grid(args.b, "b")
    grid_ap = _read_grid(args.aprime, "aprime")
    targets = [
        _read_grid(args.target_a, "target-a") if args.target_a else grid_a,
        _read_grid(args.target_b, "target-b") if args.target_b else grid_b,
        _read_grid(args.target_aprime, "target-aprime") if args.target_aprime else grid_ap,
    ]

    def build(config, alphas, k, seed):
        return vibe_analogy(grid_a, grid_b, grid_ap, targets, config, alphas, k=k, seed=seed)

    return _run_path_job(args, build)


def cmd_negblend(args):
    from vibespace.blending import negative_blend

    pos_a = _read_grid(args.a, "a")
    pos_b = _read_grid(args.b, "b")
    neg_a = _read_grid(args.neg_a, "neg-a")
    neg_c = _read_grid(args.neg_c, "neg-c")
    targets = [
        _read_grid(args.target_a, "target-a") if args.target_a else pos_a,
        _read_grid(args.target_b, "target-b") if args.target_b else pos_b,
        neg_a,
        neg_c,
    ]

    def build(config, alphas, k, seed):
        return negative_blend(
            pos_a, pos_b, neg_a, neg_c, targets, args.beta, config, alphas, k=k, seed=seed
        )

    return _run_path_job(args, build)


def cmd_nblend(args):
    from vibespace.blending import n_blend
    from vibespace.feature_io import FeatureGrid, write_feature_file

    grids = [_read_grid(p, "inputs") for p in args.inputs]
    weights = _parse_floats(args.weights, "weights")
    config, cfg = _train_config(args)
    k = _job_value(args, cfg, "k", 10)
    decoded = n_blend(grids, grids, args.base, weights, config, k=k, seed=config.seed)
    os.makedirs(args.output_dir, exist_ok=True)
    base = grids[args.base]
    out_grid = FeatureGrid(
        image_id=f"nblend-base-{base.image_id}",
        height=base.height,
        width=base.width,
        dim=decoded.shape[1],
        space="target",
        tokens=decoded,
    )
    out_path = os.path.join(args.output_dir, "nblend.vibe")
    write_feature_file(out_grid, out_path)
    _write_json(
        {"base": args.base, "weights": weights, "inputs": [g.image_id for g in grids]},
        os.path.join(args.output_dir, "metrics.json"),
    )
    print(f"wrote {out_path}")
    return 0


def _load_path_points(blend_dir):
    """Flattened decoded features per alpha from a blend export directory."""
    from vibespace.feature_io import read_feature_file

    manifest_path = os.path.join(blend_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ValueError(f"paths: no manifest.json under {blend_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    points = [
        read_feature_file(os.path.join(blend_dir, name)).tokens.ravel()
        for name in manifest["files"]
    ]
    return manifest, points


def cmd_pns(args):
    from vibespace.metrics import pns_batch
    from vibespace.report import save_pns_figure

    manifests, paths = [], []
    for blend_dir in args.paths:
        manifest, points = _load_path_points(blend_dir)
        manifests.append(manifest)
        paths.append(points)
    reports = pns_batch(paths)
    os.makedirs(args.output_dir, exist_ok=True)
    rows = [
        {
            "pair_id": "+".join(m["image_ids"]),
            "length_ratio": r.length_ratio,
            "direction_change": r.mean_direction_change,
            "normalized_pns": r.normalized_pns,
        }
        for m, r in zip(manifests, reports)
    ]
    _write_json({"paths": rows}, os.path.join(args.output_dir, "metrics.json"))
    with open(os.path.join(args.output_dir, "pns.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["pair_id", "length_ratio", "direction_change", "normalized_pns"]
        )
        writer.writeheader()
        writer.writerows(rows)
    save_pns_figure(reports, os.path.join(args.output_dir, "pns.png"))
    print(f"wrote PNS report for {len(rows)} paths to {args.output_dir}")
    return 0


def cmd_select_alpha(args):
    import numpy as np

    from vibespace.feature_io import read_feature_file
    from vibespace.metrics import select_alpha
    from vibespace.report import save_score_curve
    from vibespace.vibe_model import load_model

    model = load_model(args.model)
    manifest_path = os.path.join(args.blend_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ValueError(f"blend-dir: no manifest.json under {args.blend_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    alphas = manifest["alphas"]
    latents = [
        read_feature_file(os.path.join(args.blend_dir, name)).tokens
        for name in manifest["latent_files"]
    ]
    if len(alphas) < 2:
        raise ValueError("blend-dir: need at least two alphas to recover the direction")
    delta = (latents[1] - latents[0]) / (alphas[1] - alphas[0])
    z_a = latents[0] - alphas[0] * delta

    def provider(alpha):
        i = alphas.index(alpha)
        return read_feature_file(
            os.path.join(args.realized_dir, manifest["files"][i])
        ).tokens

    best, scores = select_alpha(
        model, z_a, delta, alphas, provider, k=args.k, seed=args.seed
    )
    os.makedirs(args.output_dir, exist_ok=True)
    ordered = sorted(scores)
    _write_json(
        {"alpha_star": best, "scores": {str(a): scores[a] for a in ordered}},
        os.path.join(args.output_dir, "metrics.json"),
    )
    save_score_curve(
        ordered, [scores[a] for a in ordered],
        os.path.join(args.output_dir, "consistency.png"), selected=best,
    )
    print(f"alpha* = {best}")
    return 0


def cmd_match(args):
    import numpy as np

    from vibespace.blending import _joint_embedding
    from vibespace.correspondence import match
    from vibespace.report import save_embedding_figure

    grid_a = _read_grid(args.a, "a")
    grid_b = _read_grid(args.b, "b")
    target_a = _read_grid(args.target_a, "target-a") if args.target_a else grid_a
    target_b = _read_grid(args.target_b, "target-b") if args.target_b else grid_b
    _, psi, _ = _joint_embedding([target_a, target_b], None, args.k)
    corr = match(grid_a, grid_b, psi, args.k, seed=args.seed)
    os.makedirs(args.output_dir, exist_ok=True)
    _write_json(
        {
            "pi": corr.pi.tolist(),
            "cost": corr.cost,
            "segmentation_a": corr.seg_A.to_json_dict(),
            "segmentation_b": corr.seg_B.to_json_dict(),
        },
        os.path.join(args.output_dir, "correspondence.json"),
    )
    inv = np.empty(corr.k, dtype=np.int64)
    inv[corr.pi] = np.arange(corr.k)
    labels = np.concatenate([corr.seg_A.labels, inv[corr.seg_B.labels]])
    save_embedding_figure(
        psi[:, :2], os.path.join(args.output_dir, "segments.png"), labels=labels,
        title="matched segments",
    )
    print(f"pi = {corr.pi.tolist()}, cost = {corr.cost:.6g}")
    return 0


def cmd_diversity(args):
    from vibespace.metrics import diversity

    grids = [_read_grid(p, "inputs") for p in args.inputs]
    pooled = [g.tokens.mean(axis=0) for g in grids]
    value = diversity(pooled, dist=args.dist)
    os.makedirs(args.output_dir, exist_ok=True)
    _write_json(
        {"diversity": value, "dist": args.dist, "inputs": [g.image_id for g in grids]},
        os.path.join(args.output_dir, "metrics.json"),
    )
    print(f"diversity = {value:.6g}")
    return 0


def _load_mask(path, field):
    if not os.path.exists(path):
        raise ValueError(f"{field}: file not found: {path}")
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError(f"{field}: mask file must hold a JSON list of 0/1")
    return [bool(v) for v in data]


def cmd_masked_sim(args):
    from vibespace.metrics import masked_similarity

    grid_a = _read_grid(args.a, "a")
    grid_b = _read_grid(args.b, "b")
    mask_a = _load_mask(args.mask_a, "mask-a")
    mask_b = _load_mask(args.mask_b, "mask-b")
    value = masked_similarity(grid_a.tokens, mask_a, grid_b.tokens, mask_b)
    os.makedirs(args.output_dir, exist_ok=True)
    _write_json({"masked_similarity": value}, os.path.join(args.output_dir, "metrics.json"))
    print(f"masked similarity = {value:.6g}")
    return 0


def cmd_btfit(args):
    from vibespace.metrics import bt_bins, bt_fit

    if not os.path.exists(args.comparisons):
        raise ValueError(f"comparisons: file not found: {args.comparisons}")
    with open(args.comparisons) as fh:
        raw = json.load(fh)
    comparisons = [(str(w), str(l)) for w, l in raw]
    scores = bt_fit(comparisons, max_iters=args.max_iters, tol=args.tol)
    os.makedirs(args.output_dir, exist_ok=True)
    _write_json(
        {
            "items": list(scores.items),
            "strengths": scores.strengths.tolist(),
            "converged": scores.converged,
            "iterations": scores.iterations,
            "bins": bt_bins(scores),
        },
        os.path.join(args.output_dir, "metrics.json"),
    )
    for item, s in zip(scores.items, scores.strengths):
        print(f"{item}: {s:.6g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--config", help="JSON config file (defaults < file < flags)")
    p.add_argument("--learning-rate", dest="learning_rate", type=float,
                   help="Adam learning rate (default 0.001)")
    p.add_argument("--total-steps", dest="total_steps", type=int,
                   help="training steps (default 1000)")
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int,
                   help="MLP hidden width (default 256)")
    p.add_argument("--n-layers", dest="n_layers", type=int,
                   help="MLP layer count (default 4)")
    p.add_argument("--latent-dim", dest="latent_dim", type=int,
                   help="Vibe Space dimension d (default 6)")
    p.add_argument("--lambda-flag-enc", dest="lambda_flag_enc", type=float,
                   help="encoder kernel loss weight (default 1)")
    p.add_argument("--lambda-flag-dec", dest="lambda_flag_dec", type=float,
                   help="decoder kernel loss weight (default 0.01)")
    p.add_argument("--lambda-sample", dest="lambda_sample", type=float,
                   help="sampled-latent loss weight (default 0.01)")
    p.add_argument("--lambda-recon", dest="lambda_recon", type=float,
                   help="reconstruction loss weight (default 1)")
    p.add_argument("--sample-loss-warmup", dest="sample_loss_warmup", type=int,
                   help="steps before the sampled term activates (default 500)")
    p.add_argument("--seed", type=int, help="training/matching seed (default 0)")
    p.add_argument("--k", type=int, help="segment count (default 10)")
    p.add_argument("--output-dir", default="out", help="output directory (default out)")


def _add_path_flags(p):
    _add_train_flags(p)
    p.add_argument("--alphas", help="comma-separated interpolation weights "
                                    "(default 0,0.25,0.5,0.75,1)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vibespace",
        description="Manifold-learning feature blending over VIBE1 token grids",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic point cloud")
    p.add_argument("--kind", required=True, choices=["circle", "swiss_roll", "two_arcs"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eigenmap", help="diffusion eigendecomposition of one grid")
    p.add_argument("--input", required=True)
    p.add_argument("--m", type=int, help="eigenpair count (default min(n, 11))")
    p.add_argument("--t", type=float, default=1.0, help="diffusion time (default 1)")
    p.add_argument("--sigma-sq", dest="sigma_sq", type=float,
                   help="kernel bandwidth (default: summed feature variance)")
    p.add_argument("--output-dir", default="out")
    p.set_defaults(func=cmd_eigenmap)

    p = sub.add_parser("train", help="train an encoder/decoder pair")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("blend", help="two-image blend path")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--target-a", dest="target_a", help="target grid for a (default: a)")
    p.add_argument("--target-b", dest="target_b", help="target grid for b (default: b)")
    _add_path_flags(p)
    p.set_defaults(func=cmd_blend)

    p = sub.add_parser("analogy", help="A:B :: A':? displacement transfer")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--aprime", required=True)
    p.add_argument("--target-a", dest="target_a")
    p.add_argument("--target-b", dest="target_b")
    p.add_argument("--target-aprime", dest="target_aprime")
    _add_path_flags(p)
    p.set_defaults(func=cmd_analogy)

    p = sub.add_parser("negblend", help="blend with a filtered-out negative direction")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--neg-a", dest="neg_a", required=True)
    p.add_argument("--neg-c", dest="neg_c", required=True)
    p.add_argument("--target-a", dest="target_a")
    p.add_argument("--target-b", dest="target_b")
    p.add_argument("--beta", type=float, default=1.0, help="filter strength (default 1)")
    _add_path_flags(p)
    p.set_defaults(func=cmd_negblend)

    p = sub.add_parser("nblend", help="blend several images into one base")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--base", type=int, default=0, help="base image index (default 0)")
    p.add_argument("--weights", required=True, help="comma-separated per-image weights")
    _add_train_flags(p)
    p.set_defaults(func=cmd_nblend)

    p = sub.add_parser("pns", help="path-naturalness scores for blend directories")
    p.add_argument("--paths", nargs="+", required=True, help="blend export directories")
    p.add_argument("--output-dir", default="out")
    p.set_defaults(func=cmd_pns)

    p = sub.add_parser("select-alpha", help="pick the blend weight at the consistency dip")
    p.add_argument("--model", required=True)
    p.add_argument("--blend-dir", dest="blend_dir", required=True)
    p.add_argument("--realized-dir", dest="realized_dir", required=True,
                   help="directory of realized features named like the blend files")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default="out")
    p.set_defaults(func=cmd_select_alpha)

    p = sub.add_parser("match", help="segment two grids and match segments")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--target-a", dest="target_a")
    p.add_argument("--target-b", dest="target_b")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default="out")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("diversity", help="mean pairwise distance of pooled features")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--dist", choices=["cosine_distance", "euclidean"],
                   default="cosine_distance")
    p.add_argument("--output-dir", default="out")
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("masked-sim", help="cosine of mean-pooled masked features")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--mask-a", dest="mask_a", required=True, help="JSON list of 0/1")
    p.add_argument("--mask-b", dest="mask_b", required=True, help="JSON list of 0/1")
    p.add_argument("--output-dir", default="out")
    p.set_defaults(func=cmd_masked_sim)

    p = sub.add_parser("btfit", help="Bradley-Terry strengths from pairwise wins")
    p.add_argument("--comparisons", required=True, help="JSON list of [winner, loser]")
    p.add_argument("--max-iters", dest="max_iters", type=int, default=10000)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--output-dir", default="out")
    p.set_defaults(func=cmd_btfit)

    return parser


def main(argv=None):
    _apply_thread_cap()
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
