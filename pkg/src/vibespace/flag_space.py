"""Flag kernels over nested eigenvector prefixes and the slow geodesic oracle.

The flag kernel averages Gram matrices of nested eigenvector prefixes; the
inverse mapping recovers a feature-space point whose (extended) diffusion
coordinates match a target, via numerical-gradient descent.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from vibespace.errors import SolverDivergenceError
from vibespace.graph_spectral import extension_coords

log = logging.getLogger(__name__)

DEFAULT_SCALE_LADDER = (4, 8, 16, 32, 64)


@dataclass(frozen=True)
class FlagScales:
    """Strictly increasing prefix sizes m_1 < ... < m_M."""

    scales: tuple

    def __post_init__(self):
        scales = tuple(int(m) for m in self.scales)
        if not scales:
            raise ValueError("scales must be non-empty")
        if scales[0] < 1 or any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scales must be strictly increasing positive ints, got {scales}")
        object.__setattr__(self, "scales", scales)

    def __iter__(self):
        return iter(self.scales)

    def __len__(self):
        return len(self.scales)

    @property
    def max(self):
        return self.scales[-1]


@dataclass(frozen=True)
class FlagKernel:
    """Symmetric PSD n x n kernel matrix averaged over prefix Gram matrices."""

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.matrix, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError("flag kernel must be square")
        if not np.array_equal(s, s.T):
            raise ValueError("flag kernel must be symmetric")
        object.__setattr__(self, "matrix", s)

    @property
    def n(self):
        return self.matrix.shape[0]


def default_scales(available):
    """The ladder {4, 8, 16, 32, 64}, clipped to the available column count."""
    if available < 1:
        raise ValueError("need at least one available column")
    clipped = sorted({min(m, available) for m in DEFAULT_SCALE_LADDER})
    return FlagScales(tuple(clipped))


def flag_kernel(psi, scales):
    """S = (1/|M|) sum_k Psi^{1:m_k} (Psi^{1:m_k})^T over the prefix scales."""
    psi = np.asarray(psi, dtype=np.float64)
    if scales.max > psi.shape[1]:
        raise ValueError(f"scale {scales.max} exceeds available columns {psi.shape[1]}")
    n = psi.shape[0]
    s = np.zeros((n, n))
    for m in scales:
        prefix = psi[:, :m]
        s += prefix @ prefix.T
    s /= len(scales)
    s = 0.5 * (s + s.T)
    return FlagKernel(matrix=s)


def _flag_objective(coords, targets_per_scale, scales):
    total = 0.0
    for m, target in zip(scales, targets_per_scale):
        diff = coords[:m] - target[:m]
        total += float(diff @ diff)
    return total / len(scales)


def _descend(objective, init, max_iters, step, tol, h_scale):
    """Normalized-numerical-gradient descent with backtracking on the step size.

    Central differences with h = 1e-4 * h_scale; the step halves whenever the
    objective would increase, and 10 consecutive rejected steps raise
    SolverDivergenceError.
    """
    x = np.asarray(init, dtype=np.float64).copy()
    d = x.shape[0]
    h = 1e-4 * h_scale
    f = objective(x)
    rejects = 0
    for _ in range(max_iters):
        if f <= tol:
            break
        grad = np.empty(d)
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            grad[k] = (objective(x + e) - objective(x - e)) / (2.0 * h)
        gnorm = np.linalg.norm(grad)
        if gnorm < 1e-14:
            break
        trial_step = step
        accepted = False
        while not accepted:
            x_new = x - trial_step * grad / gnorm
            f_new = objective(x_new)
            if f_new < f:
                improvement = f - f_new
                x, f = x_new, f_new
                rejects = 0
                accepted = True
            else:
                rejects += 1
                if rejects >= 10:
                    raise SolverDivergenceError(
                        f"inverse mapping diverged: objective stuck at {f:.3e}"
                    )
                trial_step *= 0.5
        if improvement < tol:
            break
    return x


def inverse_map_point(dmap, graph, training_tokens, target, init, max_iters=200, step=None, tol=1e-10):
    """Recover x* minimizing ||Psi_t(x*) - target||^2 with Psi_t by Nystrom extension."""
    training_tokens = np.asarray(training_tokens, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.shape[0] != dmap.m - 1:
        raise ValueError(
            f"target has {target.shape[0]} components, map has {dmap.m - 1} nontrivial"
        )
    scale = _cloud_scale(training_tokens)
    if step is None:
        step = 0.05 * scale

    def objective(x):
        diff = extension_coords(dmap, graph, training_tokens, x) - target
        return float(diff @ diff)

    return _descend(objective, init, max_iters, step, tol, scale)


def inverse_map_flag(
    dmap, graph, training_tokens, targets_per_scale, scales, init, max_iters=200, step=None, tol=1e-10
):
    """Minimize the scale-averaged prefix objective (1/|M|) sum_k ||prefix diff||^2."""
    training_tokens = np.asarray(training_tokens, dtype=np.float64)
    targets = [np.asarray(t, dtype=np.float64) for t in targets_per_scale]
    if len(targets) != len(scales):
        raise ValueError(f"need one target per scale: {len(targets)} vs {len(scales)}")
    if scales.max > dmap.m - 1:
        raise ValueError(f"scale {scales.max} exceeds {dmap.m - 1} nontrivial components")
    for m, t in zip(scales, targets):
        if t.shape[0] < m:
            raise ValueError(f"target for scale {m} has only {t.shape[0]} components")
    cloud = _cloud_scale(training_tokens)
    if step is None:
        step = 0.05 * cloud

    def objective(x):
        coords = extension_coords(dmap, graph, training_tokens, x)
        return _flag_objective(coords, targets, scales)

    return _descend(objective, init, max_iters, step, tol, cloud)


def geodesic_path_oracle(dmap, graph, training_tokens, x_a, x_b, n_steps, scales, max_iters=200, step=None, tol=1e-10):
    """Geodesic gamma(alpha_i), alpha equally spaced in [0, 1], endpoints exact.

    Interior points invert linearly interpolated diffusion coordinates (one
    full interpolation, prefix-sliced per scale), each warm-started from the
    previous path point to stay on-manifold.
    """
    if n_steps < 2:
        raise ValueError(f"n_steps must be >= 2, got {n_steps}")
    training_tokens = np.asarray(training_tokens, dtype=np.float64)
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    coords_a = extension_coords(dmap, graph, training_tokens, x_a)
    coords_b = extension_coords(dmap, graph, training_tokens, x_b)
    path = [x_a.copy()]
    prev = x_a
    for i in range(1, n_steps - 1):
        alpha = i / (n_steps - 1)
        target = (1.0 - alpha) * coords_a + alpha * coords_b
        try:
            point = inverse_map_flag(
                dmap, graph, training_tokens,
                [target] * len(scales), scales, prev,
                max_iters=max_iters, step=step, tol=tol,
            )
        except SolverDivergenceError as exc:
            raise SolverDivergenceError(f"geodesic solve failed at alpha={alpha:.4f}: {exc}") from exc
        path.append(point)
        prev = point
    path.append(x_b.copy())
    return path


def _cloud_scale(tokens):
    """Per-dimension feature scale of the cloud, used for h and default steps."""
    spread = tokens.max(axis=0) - tokens.min(axis=0)
    scale = float(np.max(spread))
    return scale if scale > 0 else 1.0
