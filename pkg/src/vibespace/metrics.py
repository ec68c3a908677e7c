"""Path-geometry and evaluation metrics.

Covers path-naturalness scoring (excess length + turning angles), the
consistency-dip blend-weight selector, masked feature similarity, output
diversity, and Bradley-Terry preference aggregation.
"""

import logging
from dataclasses import dataclass

import numpy as np

from vibespace.correspondence import Correspondence, Segmentation, segment_centroids, segment_tokens
from vibespace.graph_spectral import build_affinity, solve_diffusion_map
from vibespace.vibe_model import decode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PnsReport:
    """Per-path naturalness summary; normalized_pns is defined within its batch."""

    length_ratio: float
    mean_direction_change: float
    normalized_pns: float


@dataclass(frozen=True)
class BtScores:
    """Fitted Bradley-Terry strengths, normalized to geometric mean 1."""

    items: tuple
    strengths: np.ndarray
    converged: bool
    iterations: int


def length_ratio(path):
    """Curved-over-straight length: sum of segment norms / endpoint distance."""
    pts = np.asarray(path, dtype=np.float64)
    if pts.shape[0] < 2:
        raise ValueError("path needs at least 2 points")
    chord = float(np.linalg.norm(pts[-1] - pts[0]))
    if chord == 0.0:
        raise ValueError("identical endpoints: length ratio undefined")
    segments = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return float(segments.sum() / chord)


def direction_change(path):
    """Mean turning angle (radians) between consecutive path segments."""
    pts = np.asarray(path, dtype=np.float64)
    if pts.shape[0] < 3:
        raise ValueError("path needs at least 3 points")
    deltas = np.diff(pts, axis=0)
    norms = np.linalg.norm(deltas, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-length path segment: turning angle undefined")
    cos = np.einsum("ij,ij->i", deltas[:-1], deltas[1:]) / (norms[:-1] * norms[1:])
    return float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))


def _minmax(values):
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def pns_batch(paths):
    """Min-max normalize both sub-metrics across the batch, then average them."""
    if not paths:
        raise ValueError("need at least one path")
    ratios = np.array([length_ratio(p) for p in paths])
    turns = np.array([direction_change(p) for p in paths])
    scores = 0.5 * (_minmax(ratios) + _minmax(turns))
    return [
        PnsReport(length_ratio=float(r), mean_direction_change=float(t), normalized_pns=float(s))
        for r, t, s in zip(ratios, turns, scores)
    ]


def consistency_score(ideal, realized, corr, seg_ideal, seg_realized=None):
    """Mean cosine between matched per-segment mean features.

    Segment c of the ideal features is compared to segment pi(c) of the
    realized features (seg_realized defaults to seg_ideal). Segment pairs with
    a zero-norm mean are excluded from the average (logged).
    """
    ideal = np.asarray(ideal, dtype=np.float64)
    realized = np.asarray(realized, dtype=np.float64)
    if seg_realized is None:
        seg_realized = seg_ideal
    mu_ideal = segment_centroids(ideal, seg_ideal)
    mu_real = segment_centroids(realized, seg_realized)[corr.pi]
    cosines = []
    for c in range(seg_ideal.k):
        na, nb = np.linalg.norm(mu_ideal[c]), np.linalg.norm(mu_real[c])
        if na == 0.0 or nb == 0.0:
            log.warning("segment %d has a zero-norm mean; excluded from consistency", c)
            continue
        cosines.append(float(mu_ideal[c] @ mu_real[c] / (na * nb)))
    if not cosines:
        raise ValueError("all segment means are zero; consistency undefined")
    return float(np.mean(cosines))


def _identity_corr(k, dim):
    zeros = np.zeros((k, dim))
    return Correspondence(
        pi=np.arange(k, dtype=np.int64), centroids_A=zeros, centroids_B=zeros, cost=0.0
    )


def ideal_segmentation(features, k, seed=0):
    """Segment a feature matrix by its own diffusion embedding (k leading columns)."""
    features = np.asarray(features, dtype=np.float64)
    graph = build_affinity(features)
    dmap = solve_diffusion_map(graph, min(k + 1, graph.n))
    return segment_tokens(dmap.eigenvectors[:, 1:], k, seed=seed)


def select_alpha(model, z_a, delta, alphas, realized_provider, k=10, seed=0):
    """Pick the blend weight where realized features dip furthest from the ideal.

    Decodes the ideal path z_a + alpha*delta, asks the provider for realized
    features at each alpha, and scores consistency on the alpha=0 ideal
    segmentation with token-aligned (identity) correspondence. Returns
    (alpha*, {alpha: score}); the argmin with ties going to the smallest
    alpha. Provider failures skip that alpha (logged); all failing is an
    error.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("alphas must be non-empty")
    z_a = np.asarray(z_a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    ideal0 = np.asarray(decode(model, z_a), dtype=np.float64)
    seg0 = ideal_segmentation(ideal0, min(k, ideal0.shape[0]), seed=seed)
    corr = _identity_corr(seg0.k, z_a.shape[1])
    scores = {}
    for alpha in alphas:
        ideal = np.asarray(decode(model, z_a + alpha * delta), dtype=np.float64)
        try:
            realized = realized_provider(alpha)
        except Exception as exc:  # provider totality is its own contract
            log.warning("realized-feature provider failed at alpha=%g: %s", alpha, exc)
            continue
        scores[alpha] = consistency_score(ideal, np.asarray(realized, dtype=np.float64), corr, seg0)
    if not scores:
        raise RuntimeError("realized-feature provider failed at every alpha")
    best = min(sorted(scores), key=lambda a: scores[a])
    return best, scores


def masked_similarity(feats_a, mask_a, feats_b, mask_b):
    """Cosine similarity of mean-pooled features over each mask."""
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    mask_a = np.asarray(mask_a, dtype=bool)
    mask_b = np.asarray(mask_b, dtype=bool)
    if not mask_a.any() or not mask_b.any():
        raise ValueError("masks must select at least one token")
    va = feats_a[mask_a].mean(axis=0)
    vb = feats_b[mask_b].mean(axis=0)
    denom = np.linalg.norm(va) * np.linalg.norm(vb)
    if denom == 0.0:
        raise ValueError("zero-norm pooled features")
    return float(va @ vb / denom)


def diversity(features, dist="cosine_distance"):
    """Mean pairwise distance over all C(n, 2) feature pairs."""
    feats = [np.asarray(f, dtype=np.float64) for f in features]
    n = len(feats)
    if n < 2:
        raise ValueError("diversity needs at least 2 items")
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            if dist == "euclidean":
                total += float(np.linalg.norm(feats[i] - feats[j]))
            elif dist == "cosine_distance":
                denom = np.linalg.norm(feats[i]) * np.linalg.norm(feats[j])
                if denom == 0.0:
                    raise ValueError("zero-norm feature in cosine distance")
                total += 1.0 - float(feats[i] @ feats[j] / denom)
            else:
                raise ValueError(f"unknown distance {dist!r}")
    return total / (n * (n - 1) / 2)


def _connected_components(items, edges):
    index = {item: i for i, item in enumerate(items)}
    parent = list(range(len(items)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in edges:
        ra, rb = find(index[a]), find(index[b])
        if ra != rb:
            parent[ra] = rb
    groups = {}
    for item in items:
        groups.setdefault(find(index[item]), []).append(item)
    return list(groups.values())


def bt_fit(comparisons, max_iters=10000, tol=1e-10):
    """Bradley-Terry strengths by minorization-maximization.

    Requires a connected comparison graph and at least one win and one loss
    per item (otherwise the maximum-likelihood strength diverges). Strengths
    are gauge-fixed to geometric mean 1.
    """
    if not comparisons:
        raise ValueError("no comparisons given")
    items = sorted({x for pair in comparisons for x in pair})
    components = _connected_components(items, comparisons)
    if len(components) > 1:
        raise ValueError(f"comparison graph disconnected: components {components}")
    idx = {item: i for i, item in enumerate(items)}
    n = len(items)
    wins = np.zeros(n)
    games = np.zeros((n, n))
    for winner, loser in comparisons:
        i, j = idx[winner], idx[loser]
        wins[i] += 1
        games[i, j] += 1
        games[j, i] += 1
    losses = games.sum(axis=1) - wins
    for i, item in enumerate(items):
        if wins[i] == 0 or losses[i] == 0:
            raise ValueError(f"item {item!r} has no {'wins' if wins[i] == 0 else 'losses'}; "
                             "strength is unbounded")
    p = np.ones(n)
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        denom = (games / (p[:, None] + p[None, :])).sum(axis=1)
        p_new = wins / denom
        p_new /= np.exp(np.mean(np.log(p_new)))
        if np.max(np.abs(np.log(p_new) - np.log(p))) < tol:
            p = p_new
            converged = True
            break
        p = p_new
    return BtScores(items=tuple(items), strengths=p, converged=converged, iterations=iterations)


def bt_bins(scores):
    """Tertile binning of items into low / medium / high strength groups."""
    order = np.argsort(scores.strengths, kind="stable")
    n = len(scores.items)
    bins = {"low": [], "medium": [], "high": []}
    cut1, cut2 = n // 3, 2 * n // 3
    for rank, i in enumerate(order):
        name = "low" if rank < cut1 else ("medium" if rank < cut2 else "high")
        bins[name].append(scores.items[i])
    return bins
