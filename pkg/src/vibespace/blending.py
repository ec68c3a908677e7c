"""End-to-end blend-path pipelines over latent displacements.

Each pipeline stacks the participating images into one joint graph on their
target-space tokens, trains an encoder/decoder pair against the joint flag
kernel, matches segments between the designated pair, and interpolates the
latents along the per-segment displacement field.
"""

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from vibespace.correspondence import displacement, match
from vibespace.feature_io import FeatureGrid, write_feature_file
from vibespace.flag_space import default_scales
from vibespace.graph_spectral import build_affinity, solve_diffusion_map
from vibespace.vibe_model import decode, encode, filter_negative, train_vibe_space

ALPHA_MIN, ALPHA_MAX = -0.5, 2.0


@dataclass(frozen=True)
class BlendPath:
    """An interpolation path: latents z_A + alpha * direction, and their decodings."""

    alphas: tuple
    latents: list = field(repr=False)
    decoded: list = field(repr=False)
    direction: np.ndarray = field(repr=False)
    step_deltas: list = field(repr=False)
    height: int = 0
    width: int = 0
    image_ids: tuple = ()

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError("alphas must be strictly increasing")
        if len(self.latents) != len(alphas) or len(self.decoded) != len(alphas):
            raise ValueError("one latent and one decoded matrix per alpha required")
        for d in self.decoded:
            if not np.isfinite(d).all():
                raise ValueError("decoded features contain non-finite values")
        object.__setattr__(self, "alphas", alphas)


def _check_alphas(alphas):
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("alphas must be non-empty")
    for a in alphas:
        if not ALPHA_MIN <= a <= ALPHA_MAX:
            raise ValueError(f"alpha {a} outside [{ALPHA_MIN}, {ALPHA_MAX}]")
    return alphas


def _joint_embedding(targets, config, k):
    """Joint graph over stacked target tokens and its nontrivial eigenvectors."""
    x_tgt = np.vstack([t.tokens for t in targets])
    n = x_tgt.shape[0]
    scales = default_scales(min(64, n - 1))
    m = max(scales.max, k) + 1
    graph = build_affinity(x_tgt)
    dmap = solve_diffusion_map(graph, m)
    return x_tgt, dmap.eigenvectors[:, 1:], scales


def _train_joint(grids, targets, config, k, psi_override=None):
    x_tgt, psi, scales = _joint_embedding(targets, config, k)
    if psi_override is not None:
        psi = psi_override
    x_src = np.vstack([g.tokens for g in grids])
    model = train_vibe_space(x_src, x_tgt, psi, scales, config)
    return model, psi


def _interpolate(model, z_a, delta, alphas):
    latents, decoded = [], []
    for alpha in alphas:
        z = z_a + alpha * delta
        latents.append(z)
        decoded.append(np.asarray(decode(model, z), dtype=np.float64))
    step_deltas = [b - a for a, b in zip(decoded, decoded[1:])]
    return latents, decoded, step_deltas


def _token_ranges(grids):
    offsets = np.cumsum([0] + [g.n_tokens for g in grids])
    return [(offsets[i], offsets[i + 1]) for i in range(len(grids))]


def vibe_blend_extra(grids, targets, blend_pair, config, alphas, k=10, seed=0):
    """Blend one designated pair while the graph and training see all grids."""
    if len(grids) < 2 or len(grids) != len(targets):
        raise ValueError("need >= 2 grids with one target grid each")
    ia, ib = blend_pair
    if not (0 <= ia < len(grids) and 0 <= ib < len(grids)) or ia == ib:
        raise ValueError(f"invalid blend pair {blend_pair}")
    alphas = _check_alphas(alphas)
    model, psi = _train_joint(grids, targets, config, k)
    ranges = _token_ranges(grids)
    grid_a, grid_b = grids[ia], grids[ib]
    z_a = np.asarray(encode(model, grid_a.tokens), dtype=np.float64)
    z_b = np.asarray(encode(model, grid_b.tokens), dtype=np.float64)
    psi_pair = np.vstack([psi[slice(*ranges[ia])], psi[slice(*ranges[ib])]])
    corr = match(grid_a, grid_b, psi_pair, k, seed=seed, z_a=z_a, z_b=z_b)
    delta = displacement(corr, z_a, corr.seg_A)
    latents, decoded, step_deltas = _interpolate(model, z_a, delta, alphas)
    return BlendPath(
        alphas=tuple(alphas),
        latents=latents,
        decoded=decoded,
        direction=delta,
        step_deltas=step_deltas,
        height=grid_a.height,
        width=grid_a.width,
        image_ids=(grid_a.image_id, grid_b.image_id),
    )


def vibe_blend(grid_a, grid_b, target_a, target_b, config, alphas, k=10, seed=0):
    """Two-image blend path: the pair-only special case of vibe_blend_extra."""
    return vibe_blend_extra(
        [grid_a, grid_b], [target_a, target_b], (0, 1), config, alphas, k=k, seed=seed
    )


def _dedupe(grids, targets):
    """Collapse grids with identical source and target tokens to one instance."""
    unique, mapping = [], []
    for g, t in zip(grids, targets):
        found = None
        for u, (ug, ut) in enumerate(unique):
            if (
                g.tokens.shape == ug.tokens.shape
                and np.array_equal(g.tokens, ug.tokens)
                and np.array_equal(t.tokens, ut.tokens)
            ):
                found = u
                break
        if found is None:
            unique.append((g, t))
            found = len(unique) - 1
        mapping.append(found)
    return [g for g, _ in unique], [t for _, t in unique], mapping


def vibe_analogy(grid_a, grid_b, grid_aprime, targets, config, alphas, k=10, seed=0):
    """Transfer the A-to-B displacement onto A' through matched segments.

    Exact-duplicate grids are collapsed before graph construction and
    training, so A' = A degenerates to the plain two-image blend.
    """
    if len(targets) != 3:
        raise ValueError("need one target grid per source grid (3)")
    alphas = _check_alphas(alphas)
    grids_u, targets_u, mapping = _dedupe([grid_a, grid_b, grid_aprime], list(targets))
    model, psi = _train_joint(grids_u, targets_u, config, k)
    ranges = _token_ranges(grids_u)

    def rows(role):
        return psi[slice(*ranges[mapping[role]])]

    def latent(role):
        return np.asarray(encode(model, [grid_a, grid_b, grid_aprime][role].tokens), dtype=np.float64)

    z_a, z_b, z_ap = latent(0), latent(1), latent(2)
    corr_ab = match(grid_a, grid_b, np.vstack([rows(0), rows(1)]), k, seed=seed, z_a=z_a, z_b=z_b)
    corr_aap = match(
        grid_a, grid_aprime, np.vstack([rows(0), rows(2)]), k, seed=seed, z_a=z_a, z_b=z_ap
    )
    # per-A-segment displacement toward B, handed to the matched A' segment
    v = corr_ab.centroids_B[corr_ab.pi] - corr_ab.centroids_A
    inv = np.empty(k, dtype=np.int64)
    inv[corr_aap.pi] = np.arange(k)
    seg_ap = corr_aap.seg_B
    delta = v[inv][seg_ap.labels]
    latents, decoded, step_deltas = _interpolate(model, z_ap, delta, alphas)
    return BlendPath(
        alphas=tuple(alphas),
        latents=latents,
        decoded=decoded,
        direction=delta,
        step_deltas=step_deltas,
        height=grid_aprime.height,
        width=grid_aprime.width,
        image_ids=(grid_a.image_id, grid_b.image_id, grid_aprime.image_id),
    )


def negative_blend(pos_a, pos_b, neg_a, neg_c, targets, beta, config, alphas, k=10, seed=0):
    """Blend the positive pair after filtering the negative direction out.

    targets holds the target grids for (pos_a, pos_b, neg_a, neg_c). The
    negative eigenvectors are aligned onto the shared pos_a rows (zeros on
    pos_b rows) before the basis filtering.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if len(targets) != 4:
        raise ValueError("need one target grid per source grid (4)")
    alphas = _check_alphas(alphas)
    if neg_a.n_tokens != pos_a.n_tokens:
        raise ValueError("neg_a must share pos_a's token count")
    _, psi_pos, scales = _joint_embedding(targets[:2], config, k)
    _, psi_neg, _ = _joint_embedding(targets[2:], config, k)
    psi_neg_padded = np.zeros((psi_pos.shape[0], psi_neg.shape[1]))
    psi_neg_padded[: neg_a.n_tokens] = psi_neg[: neg_a.n_tokens]
    psi_filtered = filter_negative(psi_pos, psi_neg_padded, beta)
    model, _ = _train_joint([pos_a, pos_b], targets[:2], config, k, psi_override=psi_filtered)
    z_a = np.asarray(encode(model, pos_a.tokens), dtype=np.float64)
    z_b = np.asarray(encode(model, pos_b.tokens), dtype=np.float64)
    corr = match(pos_a, pos_b, psi_filtered, k, seed=seed, z_a=z_a, z_b=z_b)
    delta = displacement(corr, z_a, corr.seg_A)
    latents, decoded, step_deltas = _interpolate(model, z_a, delta, alphas)
    return BlendPath(
        alphas=tuple(alphas),
        latents=latents,
        decoded=decoded,
        direction=delta,
        step_deltas=step_deltas,
        height=pos_a.height,
        width=pos_a.width,
        image_ids=(pos_a.image_id, pos_b.image_id),
    )


def n_blend(grids, targets, base_index, weights, config, k=10, seed=0):
    """Blend several images into the base image's structure.

    Each non-base image contributes its matched-centroid displacement scaled
    by its weight; returns the decoded token matrix for the base grid.
    """
    if len(grids) < 2 or len(grids) != len(targets):
        raise ValueError("need >= 2 grids with one target grid each")
    if not 0 <= base_index < len(grids):
        raise ValueError(f"invalid base_index {base_index}")
    others = [i for i in range(len(grids)) if i != base_index]
    if len(weights) != len(others):
        raise ValueError(f"need {len(others)} weights, got {len(weights)}")
    for w in weights:
        if not ALPHA_MIN <= w <= ALPHA_MAX:
            raise ValueError(f"weight {w} outside [{ALPHA_MIN}, {ALPHA_MAX}]")
    model, psi = _train_joint(grids, targets, config, k)
    ranges = _token_ranges(grids)
    base = grids[base_index]
    z_base = np.asarray(encode(model, base.tokens), dtype=np.float64)
    z_blend = z_base.copy()
    for w, i in zip(weights, others):
        z_i = np.asarray(encode(model, grids[i].tokens), dtype=np.float64)
        psi_pair = np.vstack([psi[slice(*ranges[base_index])], psi[slice(*ranges[i])]])
        corr = match(base, grids[i], psi_pair, k, seed=seed, z_a=z_base, z_b=z_i)
        z_blend += w * displacement(corr, z_base, corr.seg_A)
    return np.asarray(decode(model, z_blend), dtype=np.float64)


def export_blend_path(path, out_dir, config, k, seed):
    """Write one VIBE1 file per alpha plus a JSON manifest into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    files, latent_files = [], []
    for i, alpha in enumerate(path.alphas):
        name = f"blend_{i:03d}.vibe"
        grid = FeatureGrid(
            image_id=f"{'+'.join(path.image_ids)}@alpha={alpha:g}",
            height=path.height,
            width=path.width,
            dim=path.decoded[i].shape[1],
            space="target",
            tokens=path.decoded[i],
        )
        write_feature_file(grid, os.path.join(out_dir, name))
        files.append(name)
        latent_name = f"latent_{i:03d}.vibe"
        latent_grid = FeatureGrid(
            image_id=f"{grid.image_id}/latent",
            height=path.height,
            width=path.width,
            dim=path.latents[i].shape[1],
            space="raw",
            tokens=path.latents[i],
        )
        write_feature_file(latent_grid, os.path.join(out_dir, latent_name))
        latent_files.append(latent_name)
    manifest = {
        "alphas": list(path.alphas),
        "seed": seed,
        "config": asdict(config),
        "k": k,
        "image_ids": list(path.image_ids),
        "files": files,
        "latent_files": latent_files,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
