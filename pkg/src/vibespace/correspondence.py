"""Spectral segmentation of token grids and Hungarian segment matching.

Segmentation follows the normalized-cut recipe: take the leading k
eigenvector columns for the image's rows, length-normalize each row, and
cluster with k-means. Matched segments yield per-segment displacement fields.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from vibespace.graph_spectral import pairwise_sq_dists


@dataclass(frozen=True)
class Segmentation:
    """k-way token labels for one image; every label in [0, k) is used."""

    image_id: str
    k: int
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if self.k < 1:
            raise ValueError("k must be positive")
        if labels.ndim != 1:
            raise ValueError("labels must be a flat vector")
        used = np.unique(labels)
        if used.min() < 0 or used.max() >= self.k or used.size != self.k:
            raise ValueError(f"labels must use every value in [0, {self.k})")
        object.__setattr__(self, "labels", labels)

    def to_json_dict(self):
        return {"image_id": self.image_id, "k": self.k, "labels": self.labels.tolist()}


@dataclass(frozen=True)
class Correspondence:
    """Segment bijection pi between two images with latent-space centroids."""

    pi: np.ndarray
    centroids_A: np.ndarray = field(repr=False)
    centroids_B: np.ndarray = field(repr=False)
    cost: float
    seg_A: Segmentation = None
    seg_B: Segmentation = None

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.int64)
        k = pi.shape[0]
        if sorted(pi.tolist()) != list(range(k)):
            raise ValueError("pi must be a permutation of [0, k)")
        object.__setattr__(self, "pi", pi)

    @property
    def k(self):
        return self.pi.shape[0]


def _kmeans_once(points, k, rng):
    """One k-means++ seeded Lloyd run; returns (labels, inertia)."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.einsum("ij,ij->i", points - centers[0], points - centers[0])
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = points[rng.integers(n)]
        else:
            centers[c] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", points - centers[c], points - centers[c]))
    labels = None
    for _ in range(300):
        dist = pairwise_sq_dists(points, centers)
        new_labels = dist.argmin(axis=1)
        # re-seed empty clusters from the globally farthest point
        for c in range(k):
            if not np.any(new_labels == c):
                far = dist[np.arange(n), new_labels].argmax()
                centers[c] = points[far]
                dist[:, c] = np.einsum("ij,ij->i", points - centers[c], points - centers[c])
                new_labels = dist.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            member = labels == c
            if member.any():
                centers[c] = points[member].mean(axis=0)
    # degenerate duplicates can defeat re-seeding; force singletons so every
    # label is used
    for c in range(k):
        if not np.any(labels == c):
            dist = pairwise_sq_dists(points, centers)
            far = dist[np.arange(n), labels].argmax()
            labels = labels.copy()
            labels[far] = c
            centers[c] = points[far]
    inertia = float(pairwise_sq_dists(points, centers)[np.arange(n), labels].sum())
    return labels, inertia


def segment_tokens(psi_rows, k, seed=0, image_id="", restarts=20):
    """Cluster the image's eigenvector rows into k segments.

    Rows of the leading k columns are length-normalized, then clustered by
    Lloyd iteration with k-means++ seeding, best of ``restarts`` runs by
    inertia. Deterministic for a fixed seed.
    """
    psi_rows = np.asarray(psi_rows, dtype=np.float64)
    n = psi_rows.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if psi_rows.shape[1] < k:
        raise ValueError(f"need at least {k} eigenvector columns, got {psi_rows.shape[1]}")
    if np.unique(psi_rows[:, :k], axis=0).shape[0] < k:
        raise ValueError(f"fewer than {k} distinct rows; cannot form {k} segments")
    points = psi_rows[:, :k].copy()
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    np.divide(points, norms, out=points, where=norms > 0)
    if k == 1:
        return Segmentation(image_id=image_id, k=1, labels=np.zeros(n, dtype=np.int64))
    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, np.inf
    for _ in range(restarts):
        labels, inertia = _kmeans_once(points, k, rng)
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    # canonical label order: by first occurrence, so equal-seed runs are stable
    remap = {}
    for lab in best_labels:
        if lab not in remap:
            remap[lab] = len(remap)
    labels = np.array([remap[lab] for lab in best_labels], dtype=np.int64)
    return Segmentation(image_id=image_id, k=k, labels=labels)


def segment_centroids(values, seg):
    """Per-segment means of the value rows."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != seg.labels.shape[0]:
        raise ValueError(
            f"row count {values.shape[0]} does not match segmentation {seg.labels.shape[0]}"
        )
    out = np.empty((seg.k, values.shape[1]))
    for c in range(seg.k):
        out[c] = values[seg.labels == c].mean(axis=0)
    return out


def hungarian(cost):
    """Minimum-cost assignment; ties broken by the lexicographically smallest pi."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost must be a square matrix")
    if not np.isfinite(cost).all():
        raise ValueError("cost entries must be finite")
    k = cost.shape[0]
    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    tol = 1e-9 * (1.0 + abs(best))

    # fix rows in order, choosing the smallest column that still attains the optimum
    pi = np.full(k, -1, dtype=np.int64)
    free_cols = list(range(k))
    running = 0.0
    for i in range(k):
        remaining_rows = list(range(i + 1, k))
        for j in sorted(free_cols):
            candidate = running + cost[i, j]
            if remaining_rows:
                sub_cols = [c for c in free_cols if c != j]
                sub = cost[np.ix_(remaining_rows, sub_cols)]
                r, c = linear_sum_assignment(sub)
                candidate += float(sub[r, c].sum())
            if candidate <= best + tol:
                pi[i] = j
                running += cost[i, j]
                free_cols.remove(j)
                break
    return pi, float(cost[np.arange(k), pi].sum())


def match(grid_a, grid_b, psi_joint, k, seed=0, z_a=None, z_b=None):
    """Match segments of two images embedded in one joint eigenvector matrix.

    Rows of psi_joint are grid_a's tokens followed by grid_b's. The Hungarian
    cost is built over source-feature centroids; the returned Correspondence
    stores latent (Vibe-space) centroids when z_a/z_b are given, falling back
    to the source centroids otherwise, with the cost recomputed over the
    stored centroids.
    """
    psi_joint = np.asarray(psi_joint, dtype=np.float64)
    n_a, n_b = grid_a.n_tokens, grid_b.n_tokens
    if psi_joint.shape[0] != n_a + n_b:
        raise ValueError(
            f"psi_joint has {psi_joint.shape[0]} rows, expected {n_a + n_b}"
        )
    seg_a = segment_tokens(psi_joint[:n_a], k, seed=seed, image_id=grid_a.image_id)
    seg_b = segment_tokens(psi_joint[n_a:], k, seed=seed, image_id=grid_b.image_id)
    src_cent_a = segment_centroids(grid_a.tokens, seg_a)
    src_cent_b = segment_centroids(grid_b.tokens, seg_b)
    cost_matrix = np.sqrt(pairwise_sq_dists(src_cent_a, src_cent_b))
    pi, _ = hungarian(cost_matrix)
    cent_a = segment_centroids(np.asarray(z_a), seg_a) if z_a is not None else src_cent_a
    cent_b = segment_centroids(np.asarray(z_b), seg_b) if z_b is not None else src_cent_b
    cost = float(np.linalg.norm(cent_a - cent_b[pi], axis=1).sum())
    return Correspondence(
        pi=pi, centroids_A=cent_a, centroids_B=cent_b, cost=cost, seg_A=seg_a, seg_B=seg_b
    )


def displacement(corr, z_a, seg_a):
    """Per-token displacement: token with label i moves by c_{pi(i)}^B - c_i^A."""
    z_a = np.asarray(z_a, dtype=np.float64)
    if z_a.shape[0] != seg_a.labels.shape[0]:
        raise ValueError("z_a row count does not match the segmentation")
    if z_a.shape[1] != corr.centroids_A.shape[1]:
        raise ValueError("latent dimension does not match stored centroids")
    per_segment = corr.centroids_B[corr.pi] - corr.centroids_A
    return per_segment[seg_a.labels]
