"""Gaussian affinity graphs and generalized Laplacian eigenproblems.

The generalized problem (D - W) psi = lambda D psi is solved through the
equivalent symmetric problem D^{-1/2}(D - W)D^{-1/2} u = lambda u with
psi = D^{-1/2} u, which keeps the columns D-orthonormal.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from vibespace.errors import DegenerateGraphError

log = logging.getLogger(__name__)

NULLSPACE_TOL = 1e-8


@dataclass(frozen=True)
class AffinityGraph:
    """Symmetric Gaussian affinity matrix with its degree vector and bandwidth."""

    weights: np.ndarray = field(repr=False)
    degrees: np.ndarray = field(repr=False)
    sigma_sq: float

    @property
    def n(self):
        return self.weights.shape[0]


@dataclass(frozen=True)
class DiffusionMap:
    """Generalized eigenpairs of a graph Laplacian plus a diffusion time.

    Eigenvalues are ascending with the first ~0; eigenvector columns are
    D-orthonormal when ``d_orthonormal`` and sign-fixed so the
    maximum-magnitude entry of each column is positive.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray = field(repr=False)
    t: float = 1.0
    d_orthonormal: bool = True

    @property
    def n(self):
        return self.eigenvectors.shape[0]

    @property
    def m(self):
        return self.eigenvectors.shape[1]


def pairwise_sq_dists(a, b=None):
    """Squared Euclidean distances between rows of a and b (b defaults to a)."""
    if b is None:
        b = a
    aa = np.einsum("ij,ij->i", a, a)
    bb = aa if b is a else np.einsum("ij,ij->i", b, b)
    d2 = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def default_sigma_sq(tokens):
    """Bandwidth matching the global feature variance: sum of per-dim variances."""
    tokens = np.asarray(tokens, dtype=np.float64)
    sigma_sq = float(tokens.var(axis=0).sum())
    if sigma_sq <= 0.0:
        raise DegenerateGraphError("all tokens identical: default sigma^2 is zero")
    return sigma_sq


def build_affinity(tokens, sigma_sq=None):
    """Build the Gaussian affinity graph W_ij = exp(-||x_i - x_j||^2 / sigma^2)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 2:
        raise ValueError("tokens must be an n x D matrix with n >= 2")
    if not np.isfinite(tokens).all():
        raise ValueError("tokens contain non-finite values")
    if sigma_sq is None:
        sigma_sq = default_sigma_sq(tokens)
    elif sigma_sq <= 0:
        raise ValueError("sigma_sq must be positive")
    d2 = pairwise_sq_dists(tokens)
    weights = np.exp(-d2 / sigma_sq)
    np.fill_diagonal(weights, 1.0)
    weights = 0.5 * (weights + weights.T)
    return AffinityGraph(weights=weights, degrees=weights.sum(axis=1), sigma_sq=float(sigma_sq))


def _solve_symmetric(weights, degrees, m, t):
    """Smallest-m generalized eigenpairs via the symmetric normalization."""
    n = weights.shape[0]
    inv_sqrt_d = 1.0 / np.sqrt(degrees)
    sym = -(weights * inv_sqrt_d[:, None]) * inv_sqrt_d[None, :]
    sym[np.diag_indices(n)] += 1.0
    sym = 0.5 * (sym + sym.T)
    vals, vecs = scipy.linalg.eigh(
        sym, subset_by_index=(0, m - 1), driver="evr", overwrite_a=True, check_finite=False
    )
    psi = vecs * inv_sqrt_d[:, None]
    # deterministic sign: the max-|entry| of each column is positive
    idx = np.argmax(np.abs(psi), axis=0)
    signs = np.sign(psi[idx, np.arange(m)])
    signs[signs == 0] = 1.0
    psi = psi * signs[None, :]
    vals = np.clip(vals, 0.0, None)
    return DiffusionMap(eigenvalues=vals, eigenvectors=psi, t=float(t), d_orthonormal=True)


def solve_diffusion_map(graph, m, t=1.0):
    """Solve (D - W) psi = lambda D psi for the m smallest eigenpairs."""
    if not 1 <= m <= graph.n:
        raise ValueError(f"m must be in [1, {graph.n}], got {m}")
    dmap = _solve_symmetric(graph.weights, graph.degrees, m, t)
    resid = eigen_residual(dmap, graph.weights, graph.degrees)
    if resid > 1e-6:
        raise RuntimeError(f"eigensolver did not converge: relative residual {resid:.3e}")
    return dmap


def eigen_residual(dmap, weights, degrees):
    """Relative generalized eigen-residual ||L Psi - D Psi diag(lambda)||_F / ||D Psi||_F."""
    psi = dmap.eigenvectors
    dpsi = degrees[:, None] * psi
    lpsi = dpsi - weights @ psi
    return float(np.linalg.norm(lpsi - dpsi * dmap.eigenvalues[None, :]) / np.linalg.norm(dpsi))


def nystrom_diffusion_map(tokens, anchors, m, t=1.0, seed=0, sigma_sq=None):
    """Diffusion map of the Nystrom kernel W~ = W_NS W_SS^-1 W_NS^T.

    Anchors are sampled uniformly without replacement; an ill-conditioned
    anchor block falls back to the pseudo-inverse (logged).
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    n = tokens.shape[0]
    if not 1 <= m <= anchors <= n:
        raise ValueError(f"need m <= anchors <= n, got m={m}, anchors={anchors}, n={n}")
    if sigma_sq is None:
        sigma_sq = default_sigma_sq(tokens)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=anchors, replace=False))
    w_ns = np.exp(-pairwise_sq_dists(tokens, tokens[idx]) / sigma_sq)
    w_ss = w_ns[idx]
    w_ss = 0.5 * (w_ss + w_ss.T)
    cond = np.linalg.cond(w_ss)
    if cond > 1e12:
        log.warning("Nystrom anchor block ill-conditioned (cond=%.2e); using pseudo-inverse", cond)
        solved = np.linalg.pinv(w_ss, rcond=1e-12) @ w_ns.T
    else:
        solved = scipy.linalg.solve(w_ss, w_ns.T, assume_a="sym")
    w_tilde = w_ns @ solved
    w_tilde = 0.5 * (w_tilde + w_tilde.T)
    degrees = w_tilde.sum(axis=1)
    if np.any(degrees <= 0):
        raise DegenerateGraphError("Nystrom kernel produced non-positive degrees")
    return _solve_symmetric(w_tilde, degrees, m, t)


def nystrom_kernel(tokens, anchors, seed=0, sigma_sq=None):
    """The approximate kernel W~ itself, for error analysis against the exact W."""
    tokens = np.asarray(tokens, dtype=np.float64)
    n = tokens.shape[0]
    if sigma_sq is None:
        sigma_sq = default_sigma_sq(tokens)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=anchors, replace=False))
    w_ns = np.exp(-pairwise_sq_dists(tokens, tokens[idx]) / sigma_sq)
    w_ss = 0.5 * (w_ns[idx] + w_ns[idx].T)
    if np.linalg.cond(w_ss) > 1e12:
        solved = np.linalg.pinv(w_ss, rcond=1e-12) @ w_ns.T
    else:
        solved = scipy.linalg.solve(w_ss, w_ns.T, assume_a="sym")
    w_tilde = w_ns @ solved
    return 0.5 * (w_tilde + w_tilde.T)


def nystrom_extension(dmap, graph, training_tokens, x_new):
    """Out-of-sample eigenvector values at x_new via kernel-weighted projection.

    psi_k(x) = sum_j w(x, x_j) psi_k(j) / ((1 - lambda_k) deg(x)); components
    with 1 - lambda_k below tolerance are skipped (set to zero).
    """
    training_tokens = np.asarray(training_tokens, dtype=np.float64)
    x_new = np.asarray(x_new, dtype=np.float64)
    d2 = np.einsum("ij,ij->i", training_tokens - x_new[None, :], training_tokens - x_new[None, :])
    w = np.exp(-d2 / graph.sigma_sq)
    deg = w.sum()
    if deg < 1e-300:
        raise FloatingPointError("query point too distant: degree underflow")
    mu = 1.0 - dmap.eigenvalues
    out = np.zeros(dmap.m)
    keep = mu >= NULLSPACE_TOL
    out[keep] = (w @ dmap.eigenvectors[:, keep]) / (mu[keep] * deg)
    return out


def diffusion_coords(dmap, rows=None):
    """Diffusion coordinates (1 - lambda_k)^t psi_k over the nontrivial components.

    The trivial (constant, lambda ~ 0) leading component is excluded; it
    carries no distance information.
    """
    mu = 1.0 - dmap.eigenvalues[1:]
    scale = np.where(mu > 0, mu, 0.0) ** dmap.t
    psi = dmap.eigenvectors[:, 1:]
    if rows is not None:
        psi = psi[rows]
    return psi * scale[None, :]


def extension_coords(dmap, graph, training_tokens, x_new):
    """Diffusion coordinates of an out-of-sample point (nontrivial components)."""
    psi_new = nystrom_extension(dmap, graph, training_tokens, x_new)[1:]
    mu = 1.0 - dmap.eigenvalues[1:]
    return psi_new * np.where(mu > 0, mu, 0.0) ** dmap.t


def diffusion_distance(dmap, i, j):
    """Euclidean distance between diffusion coordinates of training points i and j."""
    n = dmap.n
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"indices ({i}, {j}) out of range for n={n}")
    coords = diffusion_coords(dmap)
    return float(np.linalg.norm(coords[i] - coords[j]))
