"""Encoder/decoder training for the latent Vibe Space.

The encoder f maps source tokens to a low-dimensional latent z whose Gram
matrix zz^T is trained to match the multi-scale flag kernel of the target
eigenvectors; the decoder g maps z back to target features. Both are small
MLPs trained jointly with Adam and hand-rolled backpropagation.

Gradient convention: the eigendecomposition of decoded tokens inside the
decoder-side kernel terms is treated as a constant per step (no gradient
through the eigensolver). Under this convention the sampled-latent
regularizer contributes no gradient at all and is tracked for reporting.
"""

import ctypes
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from vibespace.errors import FeatureFileError, TrainingError
from vibespace.feature_io import MAGIC
from vibespace.flag_space import FlagKernel, FlagScales, flag_kernel
from vibespace.graph_spectral import default_sigma_sq, pairwise_sq_dists, _solve_symmetric

log = logging.getLogger(__name__)

ACTIVATION = "silu"  # smooth rectifier x * sigmoid(x); identity at the output layer


def _tune_allocator():
    """Raise glibc's mmap/trim thresholds so per-step buffers are reused.

    The training loop allocates many ~0.5 MB temporaries per step; with the
    default 128 KB mmap threshold each one is a fresh mapping whose page
    faults dominate the arithmetic. Serving them from the heap roughly halves
    the step time. Best-effort: silently skipped on non-glibc platforms.
    """
    try:
        libc = ctypes.CDLL(None)
        libc.mallopt(-3, 64 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 32 * 1024 * 1024)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases of a plain MLP with a fixed hidden nonlinearity."""

    layer_sizes: tuple
    weights: list = field(repr=False)
    biases: list = field(repr=False)
    activation: str = ACTIVATION

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"bad layer sizes {sizes}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("one weight/bias pair per layer required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i} shape mismatch: {w.shape}, {b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i} has non-finite parameters")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loss-weight settings."""

    learning_rate: float = 0.001
    total_steps: int = 1000
    hidden_dim: int = 256
    n_layers: int = 4
    latent_dim: int = 6
    lambda_flag_enc: float = 1.0
    lambda_flag_dec: float = 0.01
    lambda_sample: float = 0.01
    lambda_recon: float = 1.0
    sample_loss_warmup: int = 500
    sample_batch: int = 128
    bbox_expand: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_flag_enc", "lambda_flag_dec", "lambda_sample", "lambda_recon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.sample_loss_warmup > self.total_steps:
            raise ValueError("sample_loss_warmup must not exceed total_steps")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.n_layers < 1 or self.hidden_dim < 1 or self.total_steps < 1:
            raise ValueError("n_layers, hidden_dim and total_steps must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


@dataclass(frozen=True)
class VibeSpaceModel:
    """A trained encoder/decoder pair with its target flag kernel."""

    encoder: MlpParams
    decoder: MlpParams
    scales: FlagScales
    target_kernel: FlagKernel = field(repr=False)
    source_dim: int
    target_dim: int
    latent_dim: int
    training_sigma_sq: float
    final_losses: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.encoder.layer_sizes[0] != self.source_dim:
            raise ValueError("encoder input dim must equal source_dim")
        if self.encoder.layer_sizes[-1] != self.latent_dim:
            raise ValueError("encoder output dim must equal latent_dim")
        if self.decoder.layer_sizes[0] != self.latent_dim:
            raise ValueError("decoder input dim must equal latent_dim")
        if self.decoder.layer_sizes[-1] != self.target_dim:
            raise ValueError("decoder output dim must equal target_dim")


# ---------------------------------------------------------------------------
# MLP forward/backward


def _sigmoid(x):
    # tanh-based form: substantially faster than expit and equally stable
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _scale_column_weights(scales, dtype=np.float64):
    """Per-column weights turning the prefix-Gram average into one product.

    Column j of psi appears in every prefix with m_k >= j+1, so
    S = (1/|M|) sum_k prefix Grams = psi diag(w) psi^T with
    w_j = |{k : m_k > j}| / |M|.
    """
    w = np.array([sum(1 for m in scales if m > j) for j in range(scales.max)], dtype=dtype)
    return w / len(scales)


def _flag_kernel_fast(psi, scales, col_weights=None):
    """S = (1/|M|) sum of prefix Grams via the single weighted product."""
    if col_weights is None:
        col_weights = _scale_column_weights(scales, dtype=psi.dtype)
    psi = psi[:, : scales.max]
    return (psi * col_weights[None, :]) @ psi.T


def init_mlp(layer_sizes, rng, dtype=np.float32):
    """He-style normal initialization, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(layer_sizes=tuple(layer_sizes), weights=weights, biases=biases)


def mlp_forward(params, x, want_cache=False):
    """Forward pass; the cache holds per-layer inputs, pre-activations, gates."""
    dtype = params.weights[0].dtype
    h = np.asarray(x, dtype=dtype)
    if h.ndim != 2 or h.shape[1] != params.layer_sizes[0]:
        raise ValueError(
            f"input shape {h.shape} incompatible with layer sizes {params.layer_sizes}"
        )
    n_layers = len(params.weights)
    cache = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ w
        pre += b
        if i < n_layers - 1:
            gate = _sigmoid(pre)
            cache.append((h, pre, gate))
            h = pre * gate
        else:
            cache.append((h, pre, None))
            h = pre
    return (h, cache) if want_cache else h


def mlp_backward(params, cache, grad_out):
    """Backpropagate grad_out; returns ([(dW, db) per layer], grad wrt input)."""
    n_layers = len(params.weights)
    grads = [None] * n_layers
    g = grad_out
    owns_g = False
    for i in range(n_layers - 1, -1, -1):
        h_in, pre, gate = cache[i]
        if gate is not None:
            # d silu = gate * (1 + pre * (1 - gate)), applied in place
            tmp = 1.0 - gate
            tmp *= pre
            tmp += 1.0
            tmp *= gate
            if owns_g:
                g *= tmp
            else:
                g = g * tmp
                owns_g = True
        grads[i] = (h_in.T @ g, g.sum(axis=0))
        g = g @ params.weights[i].T
        owns_g = True
    return grads, g


# ---------------------------------------------------------------------------
# losses


def _decoded_psi(decoded, sigma_sq, m):
    """Eigenvectors of the affinity graph built on decoded tokens (training sigma^2).

    Returns the nontrivial columns. Raises TrainingError if the decoded batch
    is degenerate (all tokens identical).
    """
    decoded = np.ascontiguousarray(decoded)
    d2 = pairwise_sq_dists(decoded)
    if float(d2.max()) <= 0.0:
        raise TrainingError("decoded tokens collapsed to a single point")
    weights = np.exp(-d2 / decoded.dtype.type(sigma_sq))
    np.fill_diagonal(weights, 1.0)
    dmap = _solve_symmetric(weights, weights.sum(axis=1), m, t=1.0)
    return dmap.eigenvectors[:, 1:]


def _gram_residual_sq(z, s):
    r = z @ z.T
    r -= s
    return r, float(np.einsum("ij,ij->", r, r))


def encode(model, x_source):
    """z = f(x_source)."""
    return mlp_forward(model.encoder, x_source)


def decode(model, z):
    """x_hat = g(z)."""
    return mlp_forward(model.decoder, z)


def _sample_latents(z, config, rng):
    lo = z.min(axis=0)
    hi = z.max(axis=0)
    span = hi - lo
    lo = lo - 0.5 * config.bbox_expand * span
    hi = hi + 0.5 * config.bbox_expand * span
    batch = min(z.shape[0], config.sample_batch)
    return rng.uniform(lo, hi, size=(batch, z.shape[1])).astype(z.dtype)


def loss_terms(model, x_source, x_target, psi, config, step, rng):
    """The four loss terms at the given step (unweighted, non-negative).

    flag_enc matches the latent Gram to the target flag kernel; flag_dec
    matches it to the kernel of the re-embedded decoded tokens; recon is the
    squared reconstruction residual; sample is the decoder regularizer on
    latents drawn from the expanded bounding box of z, zero before warmup.
    """
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape[1] < model.scales.max:
        raise ValueError(f"psi has {psi.shape[1]} columns, need >= {model.scales.max}")
    z = np.asarray(encode(model, x_source), dtype=np.float64)
    x_hat = np.asarray(decode(model, z.astype(np.float32)), dtype=np.float64)
    x_target = np.asarray(x_target, dtype=np.float64)
    s_enc = flag_kernel(psi, model.scales).matrix
    _, flag_enc = _gram_residual_sq(z, s_enc)
    psi_dec = _decoded_psi(x_hat, model.training_sigma_sq, model.scales.max + 1)
    _, flag_dec = _gram_residual_sq(z, flag_kernel(psi_dec, model.scales).matrix)
    recon = float(np.sum((x_target - x_hat) ** 2))
    sample = 0.0
    if step >= config.sample_loss_warmup and config.lambda_sample > 0:
        z_s = np.asarray(_sample_latents(z, config, rng), dtype=np.float64)
        decoded_s = np.asarray(decode(model, z_s.astype(np.float32)), dtype=np.float64)
        scales_s = _clip_scales(model.scales, z_s.shape[0] - 1)
        psi_s = _decoded_psi(decoded_s, model.training_sigma_sq, scales_s.max + 1)
        _, sample = _gram_residual_sq(z_s, flag_kernel(psi_s, scales_s).matrix)
    return {"flag_enc": flag_enc, "flag_dec": flag_dec, "sample": sample, "recon": recon}


def _clip_scales(scales, available):
    return FlagScales(tuple(sorted({min(m, available) for m in scales})))


# ---------------------------------------------------------------------------
# training


class _DecodedGraphSolver:
    """Leading eigenvectors of the decoded-token graph, warm-started across steps.

    The basis is recomputed every ``stride`` calls (the graph drifts very
    little per optimizer step); on recomputing calls, a dense subset
    eigensolve runs every ``refresh_every``-th time and otherwise one
    Rayleigh-Ritz step over the span [X, AX] of the previous basis tracks the
    slowly drifting graph. The flag kernel is invariant to eigenvector signs,
    so no sign convention is needed here.
    """

    def __init__(self, m, refresh_every=10, expand_every=3, stride=3):
        self.m = m
        self.refresh_every = refresh_every
        self.expand_every = expand_every
        self.stride = stride
        self.u = None
        self.calls = 0
        self.computes = 0
        self._psi = None
        self._a = None

    def decoded_psi(self, decoded, sigma_sq):
        if self._psi is not None and self.calls % self.stride:
            self.calls += 1
            return self._psi
        self.calls += 1
        # in-place affinity build: gram -> squared distances -> kernel
        n = decoded.shape[0]
        if self._a is None or self._a.shape[0] != n or self._a.dtype != decoded.dtype:
            self._a = np.empty((n, n), dtype=decoded.dtype)
        sq = np.einsum("ij,ij->i", decoded, decoded)
        a = np.matmul(decoded, decoded.T, out=self._a)
        a *= -2.0
        a += sq[:, None]
        a += sq[None, :]
        if not float(a.max()) > 0.0:
            raise TrainingError("decoded tokens collapsed to a single point")
        a *= -1.0 / decoded.dtype.type(sigma_sq)
        np.exp(a, out=a)
        np.fill_diagonal(a, 1.0)
        inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
        a *= inv_sqrt[:, None]
        a *= inv_sqrt[None, :]
        n = a.shape[0]
        # the graph drifts fastest early in training: refresh densely more
        # often for the first computes, then settle into the steady cadence
        refresh = 4 if self.computes < 32 else self.refresh_every
        dense = self.u is None or self.computes % refresh == 0 or 2 * self.m >= n
        if dense:
            _, vecs = scipy.linalg.eigh(
                a, subset_by_index=(n - self.m, n - 1), driver="evr",
                overwrite_a=True, check_finite=False,
            )
            u = vecs[:, ::-1]
        elif self.computes % self.expand_every == 0:
            # expanded Rayleigh-Ritz: enlarge the subspace with the residual
            # directions so the basis can follow the drifting graph
            x = self.u
            ax = a @ x
            resid = ax - x @ (x.T @ ax)
            q_new, _ = np.linalg.qr(resid)
            z = np.concatenate([x, q_new], axis=1)
            az = np.concatenate([ax, a @ q_new], axis=1)
            b = z.T @ az
            b = 0.5 * (b + b.T)
            _, q = scipy.linalg.eigh(b, check_finite=False)
            u = z @ q[:, ::-1][:, : self.m]
        else:
            # plain Rayleigh-Ritz within the tracked subspace
            x = self.u
            ax = a @ x
            b = x.T @ ax
            b = 0.5 * (b + b.T)
            _, q = scipy.linalg.eigh(b, check_finite=False)
            u = x @ q[:, ::-1]
        self.u = u
        self.computes += 1
        psi = u * inv_sqrt[:, None]
        self._psi = psi[:, 1:]
        return self._psi


class _MlpBuffers:
    """Preallocated forward/backward arrays for one MLP at a fixed batch size.

    Reusing the same buffers every step keeps the working set resident and
    avoids the per-step allocation churn that otherwise dominates on one core.
    """

    def __init__(self, params, n):
        dtype = params.weights[0].dtype
        sizes = params.layer_sizes
        self.pre = [np.empty((n, s), dtype) for s in sizes[1:]]
        self.gate = [np.empty((n, s), dtype) for s in sizes[1:-1]]
        self.hidden = [np.empty((n, s), dtype) for s in sizes[1:-1]]
        self.scratch = [np.empty((n, s), dtype) for s in sizes[1:-1]]
        self.g_in = [np.empty((n, s), dtype) for s in sizes[:-1]]
        self.dw = [np.empty_like(w) for w in params.weights]
        self.db = [np.empty_like(b) for b in params.biases]
        self.inputs = None


def _forward_buffered(params, x, buf):
    """mlp_forward into preallocated buffers; records layer inputs on buf."""
    h = x
    n_layers = len(params.weights)
    inputs = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        pre = np.matmul(h, w, out=buf.pre[i])
        pre += b
        if i < n_layers - 1:
            gate = buf.gate[i]
            # sigmoid via tanh, fully in place
            np.multiply(pre, 0.5, out=gate)
            np.tanh(gate, out=gate)
            gate += 1.0
            gate *= 0.5
            h = np.multiply(pre, gate, out=buf.hidden[i])
        else:
            h = pre
    buf.inputs = inputs
    return h


def _backward_buffered(params, buf, grad_out, want_input_grad=True):
    """mlp_backward against the buffers filled by _forward_buffered.

    Returns ([(dW, db) per layer], grad wrt input); all arrays are views of
    the workspace and are overwritten on the next call.
    """
    n_layers = len(params.weights)
    g = grad_out
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            # d silu = gate * (1 + pre * (1 - gate)) = gate + h - h * gate,
            # with h = silu(pre) already in the forward buffer (dead here)
            h, gate, sc = buf.hidden[i], buf.gate[i], buf.scratch[i]
            np.multiply(h, gate, out=sc)
            np.subtract(h, sc, out=sc)
            sc += gate
            g *= sc
        np.matmul(buf.inputs[i].T, g, out=buf.dw[i])
        g.sum(axis=0, out=buf.db[i])
        if i > 0 or want_input_grad:
            g = np.matmul(g, params.weights[i].T, out=buf.g_in[i])
        else:
            g = None
    return list(zip(buf.dw, buf.db)), g


class _StepWorkspace:
    """All per-step buffers for the joint training step."""

    def __init__(self, encoder, decoder, n, scales):
        dtype = encoder.weights[0].dtype
        d_latent = encoder.layer_sizes[-1]
        d_tgt = decoder.layer_sizes[-1]
        self.enc = _MlpBuffers(encoder, n)
        self.dec = _MlpBuffers(decoder, n)
        self.gram = np.empty((n, n), dtype)
        self.r_enc = np.empty((n, n), dtype)
        self.s_dec = np.empty((n, n), dtype)
        self.resid = np.empty((n, d_tgt), dtype)
        self.dz = np.empty((n, d_latent), dtype)
        self.dz2 = np.empty((n, d_latent), dtype)
        self.col_weights = _scale_column_weights(scales, dtype=dtype)
        self.last_psi = None


def _step_losses_and_grads(encoder, decoder, x_src, x_tgt, s_target, scales, sigma_sq, config,
                           dec_solver=None, ws=None):
    """One training step's losses and parameter gradients.

    The decoded-token eigendecomposition is a constant for the step, so the
    decoder-side kernel term back-propagates only through z into the encoder,
    and the sampled regularizer (handled outside) has no gradient.
    """
    if ws is None:
        ws = _StepWorkspace(encoder, decoder, x_src.shape[0], scales)
    z = _forward_buffered(encoder, x_src, ws.enc)
    x_hat = _forward_buffered(decoder, z, ws.dec)

    gram = np.matmul(z, z.T, out=ws.gram)
    np.subtract(gram, s_target, out=ws.r_enc)
    flag_enc = float(np.vdot(ws.r_enc, ws.r_enc))
    dz = np.matmul(ws.r_enc, z, out=ws.dz)
    dz *= 4.0 * config.lambda_flag_enc

    flag_dec = 0.0
    if config.lambda_flag_dec > 0:
        if dec_solver is not None:
            psi_dec = dec_solver.decoded_psi(x_hat, sigma_sq)
        else:
            psi_dec = _decoded_psi(x_hat, sigma_sq, scales.max + 1)
        if psi_dec is not ws.last_psi:  # unchanged basis -> cached kernel
            psi32 = np.asarray(psi_dec[:, : scales.max], dtype=z.dtype)
            np.matmul(psi32 * ws.col_weights, psi32.T, out=ws.s_dec)
            ws.last_psi = psi_dec
        gram -= ws.s_dec
        flag_dec = float(np.vdot(gram, gram))
        dz2 = np.matmul(gram, z, out=ws.dz2)
        dz2 *= 4.0 * config.lambda_flag_dec
        dz += dz2

    np.subtract(x_hat, x_tgt, out=ws.resid)
    recon = float(np.vdot(ws.resid, ws.resid))
    ws.resid *= 2.0 * config.lambda_recon
    dec_grads, dz_recon = _backward_buffered(decoder, ws.dec, ws.resid)
    dz += dz_recon
    enc_grads, _ = _backward_buffered(encoder, ws.enc, dz, want_input_grad=False)

    losses = {"flag_enc": flag_enc, "flag_dec": flag_dec, "sample": 0.0, "recon": recon}
    return losses, enc_grads, dec_grads, z


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self._scratch = np.empty(max(p.size for p in params), dtype=params[0].dtype)

    def update(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        # fold both bias corrections into the step size:
        # lr * (m/bc1) / (sqrt(v/bc2) + eps) == lr_t * m / (sqrt(v) + eps_t)
        lr_t = self.lr * np.sqrt(bc2) / bc1
        eps_t = self.eps * np.sqrt(bc2)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = np.asarray(g, dtype=p.dtype)
            s = self._scratch[: p.size].reshape(p.shape)
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=s)
            m += s
            v *= self.beta2
            np.multiply(g, g, out=s)
            s *= 1.0 - self.beta2
            v += s
            np.sqrt(v, out=s)
            s += eps_t
            np.divide(m, s, out=s)
            s *= lr_t
            p -= s


def train_vibe_space(x_source, x_target, psi, scales, config, callback=None):
    """Train the encoder/decoder pair with Adam for config.total_steps.

    Deterministic for a fixed config.seed. ``callback(step, losses)``, if
    given, observes the per-step loss terms. Raises TrainingError on
    non-finite losses or if the final reconstruction exceeds the initial one.
    """
    x_source = np.asarray(x_source, dtype=np.float32)
    x_target = np.asarray(x_target, dtype=np.float32)
    psi = np.asarray(psi, dtype=np.float64)
    n = x_source.shape[0]
    if x_target.shape[0] != n or psi.shape[0] != n:
        raise ValueError("source, target and psi must have the same token count")
    if psi.shape[1] < scales.max:
        raise ValueError(f"psi has {psi.shape[1]} columns, need >= {scales.max}")

    sigma_sq = default_sigma_sq(x_target)
    s_target = flag_kernel(psi, scales).matrix.astype(np.float32)

    rng = np.random.default_rng(config.seed)
    d_src, d_tgt, d = x_source.shape[1], x_target.shape[1], config.latent_dim
    hidden = [config.hidden_dim] * (config.n_layers - 1)
    encoder = init_mlp([d_src, *hidden, d], rng)
    decoder = init_mlp([d, *hidden, d_tgt], rng)
    enc_flat = encoder.weights + encoder.biases
    dec_flat = decoder.weights + decoder.biases
    opt = _Adam(enc_flat + dec_flat, config.learning_rate)

    dec_solver = _DecodedGraphSolver(scales.max + 1)
    ws = _StepWorkspace(encoder, decoder, n, scales)
    initial_recon = None
    losses = None
    for step in range(config.total_steps):
        losses, enc_grads, dec_grads, _ = _step_losses_and_grads(
            encoder, decoder, x_source, x_target, s_target, scales, sigma_sq, config,
            dec_solver=dec_solver, ws=ws,
        )
        if not all(np.isfinite(v) for v in losses.values()):
            raise TrainingError(f"non-finite loss at step {step}: {losses}")
        if initial_recon is None:
            initial_recon = losses["recon"]
        if callback is not None:
            callback(step, dict(losses))
        grads = (
            [g for g, _ in enc_grads] + [b for _, b in enc_grads]
            + [g for g, _ in dec_grads] + [b for _, b in dec_grads]
        )
        opt.update(enc_flat + dec_flat, grads)

    model = VibeSpaceModel(
        encoder=encoder,
        decoder=decoder,
        scales=scales,
        target_kernel=flag_kernel(psi, scales),
        source_dim=d_src,
        target_dim=d_tgt,
        latent_dim=d,
        training_sigma_sq=float(sigma_sq),
    )
    final = loss_terms(model, x_source, x_target, psi, config, config.total_steps, rng)
    if final["recon"] > initial_recon:
        raise TrainingError(
            f"training diverged: recon {final['recon']:.4e} > initial {initial_recon:.4e}"
        )
    model.final_losses.update(final)
    return model


# ---------------------------------------------------------------------------
# gradient verification


def finite_difference_check(model, x, loss="recon", h=1e-5, n_samples=200, seed=0, x_target=None):
    """Max relative error between analytic and central-difference gradients.

    Checks up to ``n_samples`` randomly chosen parameters in float64. ``loss``
    selects "recon" (target defaults to zeros) or "flag_enc" (against the
    model's stored kernel).
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-6, 1e-3]")
    if loss not in ("recon", "flag_enc"):
        raise ValueError(f"unknown loss selector {loss!r}")
    x = np.asarray(x, dtype=np.float64)
    if x_target is None:
        x_target = np.zeros((x.shape[0], model.target_dim))
    x_target = np.asarray(x_target, dtype=np.float64)
    s_target = model.target_kernel.matrix

    def to64(p):
        return MlpParams(
            layer_sizes=p.layer_sizes,
            weights=[w.astype(np.float64) for w in p.weights],
            biases=[b.astype(np.float64) for b in p.biases],
            activation=p.activation,
        )

    encoder, decoder = to64(model.encoder), to64(model.decoder)

    def objective_and_grads():
        z, enc_cache = mlp_forward(encoder, x, want_cache=True)
        if loss == "recon":
            x_hat, dec_cache = mlp_forward(decoder, z, want_cache=True)
            resid = x_hat - x_target
            value = float(np.sum(resid**2))
            dec_grads, dz = mlp_backward(decoder, dec_cache, 2.0 * resid)
            enc_grads, _ = mlp_backward(encoder, enc_cache, dz)
            return value, enc_grads, dec_grads
        r, value = _gram_residual_sq(z, s_target)
        enc_grads, _ = mlp_backward(encoder, enc_cache, 4.0 * (r @ z))
        dec_grads = [(np.zeros_like(w), np.zeros_like(b))
                     for w, b in zip(decoder.weights, decoder.biases)]
        return value, enc_grads, dec_grads

    _, enc_grads, dec_grads = objective_and_grads()
    arrays = encoder.weights + encoder.biases + decoder.weights + decoder.biases
    grad_arrays = (
        [g for g, _ in enc_grads] + [b for _, b in enc_grads]
        + [g for g, _ in dec_grads] + [b for _, b in dec_grads]
    )
    total = sum(a.size for a in arrays)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.cumsum([0] + [a.size for a in arrays])

    max_err = 0.0
    for flat_idx in picks:
        ai = int(np.searchsorted(offsets, flat_idx, side="right")) - 1
        local = int(flat_idx - offsets[ai])
        arr = arrays[ai]
        idx = np.unravel_index(local, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        f_plus, _, _ = objective_and_grads()
        arr[idx] = orig - h
        f_minus, _, _ = objective_and_grads()
        arr[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = float(grad_arrays[ai][idx])
        denom = max(abs(numeric), abs(analytic))
        if denom < 1e-12:
            continue
        max_err = max(max_err, abs(numeric - analytic) / denom)
    return max_err


# ---------------------------------------------------------------------------
# negative-vibe basis filtering


def filter_negative(psi_pos, psi_neg, beta):
    """Psi_filtered = Psi_pos - beta * Q (Q^T Psi_pos), Q an orthonormal basis of psi_neg.

    psi_neg is orthonormalized internally (SVD); rank-deficient columns are
    dropped with a log report. Row counts must already be aligned on the
    shared token set.
    """
    psi_pos = np.asarray(psi_pos, dtype=np.float64)
    psi_neg = np.asarray(psi_neg, dtype=np.float64)
    if psi_pos.shape[0] != psi_neg.shape[0]:
        raise ValueError(
            f"row counts differ: {psi_pos.shape[0]} vs {psi_neg.shape[0]}"
        )
    if beta == 0.0:
        return psi_pos.copy()
    u, s, _ = np.linalg.svd(psi_neg, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-12)) if s.size and s[0] > 0 else 0
    if rank < psi_neg.shape[1]:
        log.warning(
            "negative basis rank-deficient: kept %d of %d columns", rank, psi_neg.shape[1]
        )
    if rank == 0:
        return psi_pos.copy()
    q = u[:, :rank]
    return psi_pos - beta * (q @ (q.T @ psi_pos))


# ---------------------------------------------------------------------------
# persistence


def save_model(model, path):
    """Write the model as a VIBE1-style container: JSON metadata + raw payload.

    Parameters are stored as little-endian float32 (their in-memory dtype);
    the target kernel as float64, so loading round-trips bit-exactly.
    """
    sections = []
    payloads = []
    for prefix, mlp in (("encoder", model.encoder), ("decoder", model.decoder)):
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            sections.append({"name": f"{prefix}.w{i}", "shape": list(w.shape), "dtype": "f32"})
            payloads.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
            sections.append({"name": f"{prefix}.b{i}", "shape": list(b.shape), "dtype": "f32"})
            payloads.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    kernel = model.target_kernel.matrix
    sections.append({"name": "target_kernel", "shape": list(kernel.shape), "dtype": "f64"})
    payloads.append(np.ascontiguousarray(kernel, dtype="<f8").tobytes())
    meta = {
        "kind": "vibe-model",
        "version": 1,
        "activation": model.encoder.activation,
        "encoder_sizes": list(model.encoder.layer_sizes),
        "decoder_sizes": list(model.decoder.layer_sizes),
        "scales": list(model.scales),
        "source_dim": model.source_dim,
        "target_dim": model.target_dim,
        "latent_dim": model.latent_dim,
        "training_sigma_sq": model.training_sigma_sq,
        "final_losses": model.final_losses,
        "sections": sections,
        "endian": "little",
    }
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for chunk in payloads:
            fh.write(chunk)


def load_model(path):
    """Read a model container written by save_model."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise FeatureFileError(f"{path}: bad magic, not a VIBE1-style file")
    (header_len,) = struct.unpack_from("<I", data, len(MAGIC))
    header_end = len(MAGIC) + 4 + header_len
    try:
        meta = json.loads(data[len(MAGIC) + 4 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FeatureFileError(f"{path}: unreadable header: {exc}") from exc
    if meta.get("kind") != "vibe-model":
        raise FeatureFileError(f"{path}: not a model container (kind={meta.get('kind')!r})")
    dtypes = {"f32": ("<f4", 4), "f64": ("<f8", 8)}
    arrays = {}
    offset = header_end
    for sec in meta["sections"]:
        np_dtype, itemsize = dtypes[sec["dtype"]]
        shape = tuple(sec["shape"])
        nbytes = int(np.prod(shape)) * itemsize
        if offset + nbytes > len(data):
            raise FeatureFileError(f"{path}: truncated payload in section {sec['name']}")
        arrays[sec["name"]] = np.frombuffer(
            data, dtype=np_dtype, count=int(np.prod(shape)), offset=offset
        ).reshape(shape).copy()
        offset += nbytes

    def build_mlp(prefix, sizes):
        n = len(sizes) - 1
        return MlpParams(
            layer_sizes=tuple(sizes),
            weights=[arrays[f"{prefix}.w{i}"] for i in range(n)],
            biases=[arrays[f"{prefix}.b{i}"] for i in range(n)],
            activation=meta["activation"],
        )

    return VibeSpaceModel(
        encoder=build_mlp("encoder", meta["encoder_sizes"]),
        decoder=build_mlp("decoder", meta["decoder_sizes"]),
        scales=FlagScales(tuple(meta["scales"])),
        target_kernel=FlagKernel(matrix=arrays["target_kernel"]),
        source_dim=int(meta["source_dim"]),
        target_dim=int(meta["target_dim"]),
        latent_dim=int(meta["latent_dim"]),
        training_sigma_sq=float(meta["training_sigma_sq"]),
        final_losses=dict(meta.get("final_losses", {})),
    )
