"""Training internals: gradient checks, buffered paths, Adam, persistence."""

import numpy as np
import pytest
from scipy.special import expit

from vibespace.errors import FeatureFileError, TrainingError
from vibespace.feature_io import synth_point_cloud
from vibespace.flag_space import FlagScales, flag_kernel
from vibespace.graph_spectral import build_affinity, solve_diffusion_map
from vibespace.vibe_model import (
    MlpParams,
    TrainConfig,
    VibeSpaceModel,
    _Adam,
    _backward_buffered,
    _clip_scales,
    _decoded_psi,
    _DecodedGraphSolver,
    _flag_kernel_fast,
    _forward_buffered,
    _MlpBuffers,
    _sample_latents,
    _step_losses_and_grads,
    _StepWorkspace,
    decode,
    encode,
    filter_negative,
    finite_difference_check,
    init_mlp,
    load_model,
    loss_terms,
    mlp_backward,
    mlp_forward,
    save_model,
    train_vibe_space,
)


def _small_problem(n=48, seed=0):
    src = synth_point_cloud("circle", n, noise=0.05, seed=seed).tokens
    tgt = synth_point_cloud("two_arcs", n, noise=0.05, seed=seed + 1).tokens
    graph = build_affinity(tgt)
    dmap = solve_diffusion_map(graph, 9)
    psi = dmap.eigenvectors[:, 1:]
    scales = FlagScales((2, 4, 8))
    return src, tgt, psi, scales


def _small_config(**overrides):
    base = dict(
        total_steps=40, hidden_dim=32, n_layers=3, latent_dim=4,
        sample_loss_warmup=40, learning_rate=0.003, seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _train_small(**overrides):
    src, tgt, psi, scales = _small_problem()
    return train_vibe_space(src, tgt, psi, scales, _small_config(**overrides))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_recon=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(total_steps=100, sample_loss_warmup=101)
    with pytest.raises(ValueError):
        TrainConfig(latent_dim=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(seed=-1)


def test_mlp_params_validation(rng):
    w = [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]
    b = [np.zeros(4), np.zeros(2)]
    MlpParams(layer_sizes=(3, 4, 2), weights=w, biases=b)
    with pytest.raises(ValueError, match="shape"):
        MlpParams(layer_sizes=(3, 5, 2), weights=w, biases=b)
    with pytest.raises(ValueError, match="non-finite"):
        bad = [w[0], np.full((4, 2), np.inf)]
        MlpParams(layer_sizes=(3, 4, 2), weights=bad, biases=b)


def test_init_mlp_shapes_and_determinism():
    a = init_mlp([3, 8, 2], np.random.default_rng(7))
    b = init_mlp([3, 8, 2], np.random.default_rng(7))
    assert a.layer_sizes == (3, 8, 2)
    assert all(w.dtype == np.float32 for w in a.weights)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert all((bias == 0).all() for bias in a.biases)
    assert a.n_params == 3 * 8 + 8 + 8 * 2 + 2


def test_forward_matches_direct_silu_computation(rng):
    params = init_mlp([3, 5, 2], rng, dtype=np.float64)
    x = rng.standard_normal((7, 3))
    pre = x @ params.weights[0] + params.biases[0]
    hidden = pre * expit(pre)  # silu with an independent sigmoid
    expected = hidden @ params.weights[1] + params.biases[1]
    np.testing.assert_allclose(mlp_forward(params, x), expected, atol=1e-12)


def test_backward_matches_finite_differences(rng):
    params = init_mlp([3, 6, 6, 2], rng, dtype=np.float64)
    x = rng.standard_normal((5, 3))

    def scalar_loss():
        return float(np.sum(mlp_forward(params, x) ** 2))

    out, cache = mlp_forward(params, x, want_cache=True)
    grads, _ = mlp_backward(params, cache, 2.0 * out)
    h = 1e-6
    for li in range(3):
        w = params.weights[li]
        for idx in [(0, 0), (1, 1)]:
            orig = w[idx]
            w[idx] = orig + h
            f_plus = scalar_loss()
            w[idx] = orig - h
            f_minus = scalar_loss()
            w[idx] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            assert abs(numeric - grads[li][0][idx]) <= 1e-6 * max(1.0, abs(numeric))


def test_buffered_forward_matches_public_path(rng):
    params = init_mlp([4, 16, 16, 3], rng)
    x = rng.standard_normal((10, 4)).astype(np.float32)
    buf = _MlpBuffers(params, 10)
    np.testing.assert_array_equal(_forward_buffered(params, x, buf), mlp_forward(params, x))


def test_buffered_backward_matches_public_path(rng):
    params = init_mlp([4, 16, 16, 3], rng)
    x = rng.standard_normal((10, 4)).astype(np.float32)
    grad_out = rng.standard_normal((10, 3)).astype(np.float32)

    out, cache = mlp_forward(params, x, want_cache=True)
    ref_grads, ref_gin = mlp_backward(params, cache, grad_out.copy())

    buf = _MlpBuffers(params, 10)
    _forward_buffered(params, x, buf)
    got_grads, got_gin = _backward_buffered(params, buf, grad_out.copy())
    # the buffered silu' uses the algebraically equal form gate + h - h*gate,
    # which differs from the public path only by f32 rounding
    for (gw, gb), (rw, rb) in zip(got_grads, ref_grads):
        np.testing.assert_allclose(gw, rw, atol=1e-4)
        np.testing.assert_allclose(gb, rb, atol=1e-4)
    np.testing.assert_allclose(got_gin, ref_gin, atol=1e-4)


def test_step_losses_match_reference_terms():
    src, tgt, psi, scales = _small_problem()
    config = _small_config()
    rng = np.random.default_rng(0)
    encoder = init_mlp([2, 16, 4], rng)
    decoder = init_mlp([4, 16, 2], rng)
    s_target = flag_kernel(psi, scales).matrix.astype(np.float32)
    x_src = src.astype(np.float32)
    x_tgt = tgt.astype(np.float32)
    losses, _, _, z = _step_losses_and_grads(
        encoder, decoder, x_src, x_tgt, s_target, scales, 1.0, config
    )
    z64 = np.asarray(mlp_forward(encoder, x_src), dtype=np.float64)
    x_hat = np.asarray(mlp_forward(decoder, z64.astype(np.float32)), dtype=np.float64)
    r = z64 @ z64.T - flag_kernel(psi, scales).matrix
    assert losses["flag_enc"] == pytest.approx(float((r * r).sum()), rel=1e-3)
    assert losses["recon"] == pytest.approx(float(((x_hat - tgt) ** 2).sum()), rel=1e-4)
    psi_dec = _decoded_psi(x_hat, 1.0, scales.max + 1)
    r2 = z64 @ z64.T - flag_kernel(psi_dec, scales).matrix
    assert losses["flag_dec"] == pytest.approx(float((r2 * r2).sum()), rel=1e-3)
    assert losses["sample"] == 0.0
    np.testing.assert_array_equal(z, mlp_forward(encoder, x_src))


def test_flag_kernel_fast_matches_reference(rng):
    psi = rng.standard_normal((12, 8))
    scales = FlagScales((2, 5, 8))
    np.testing.assert_allclose(
        _flag_kernel_fast(psi, scales), flag_kernel(psi, scales).matrix, atol=1e-12
    )


def test_adam_matches_textbook_update(rng):
    p = rng.standard_normal(6)
    ref_p = p.copy()
    m = np.zeros(6)
    v = np.zeros(6)
    opt = _Adam([p], lr=0.01)
    for t in range(1, 6):
        g = rng.standard_normal(6)
        opt.update([p], [g.copy()])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1 - 0.9**t)
        v_hat = v / (1 - 0.999**t)
        ref_p = ref_p - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
        # the implementation folds eps differently: lr_t*m/(sqrt(v)+eps_t)
        np.testing.assert_allclose(p, ref_p, atol=1e-9)


def test_training_reduces_reconstruction_and_is_deterministic():
    seen = []
    src, tgt, psi, scales = _small_problem()
    config = _small_config()
    model = train_vibe_space(src, tgt, psi, scales, config,
                             callback=lambda s, l: seen.append((s, l)))
    assert len(seen) == config.total_steps
    assert set(seen[0][1]) == {"flag_enc", "flag_dec", "sample", "recon"}
    assert model.final_losses["recon"] < seen[0][1]["recon"]

    again = train_vibe_space(src, tgt, psi, scales, config)
    for a, b in zip(model.encoder.weights, again.encoder.weights):
        np.testing.assert_array_equal(a, b)


def test_training_input_validation():
    src, tgt, psi, scales = _small_problem()
    with pytest.raises(ValueError, match="token count"):
        train_vibe_space(src[:-1], tgt, psi, scales, _small_config())
    with pytest.raises(ValueError, match="columns"):
        train_vibe_space(src, tgt, psi[:, :4], scales, _small_config())


def test_finite_difference_check_both_losses():
    model = _train_small()
    src, tgt, _, _ = _small_problem()
    assert finite_difference_check(model, src, loss="recon", x_target=tgt) <= 1e-4
    assert finite_difference_check(model, src, loss="flag_enc") <= 1e-4
    with pytest.raises(ValueError):
        finite_difference_check(model, src, h=1e-2)
    with pytest.raises(ValueError):
        finite_difference_check(model, src, loss="bogus")


def test_loss_terms_sample_regularizer_after_warmup():
    model = _train_small()
    src, tgt, psi, _ = _small_problem()
    config = _small_config(sample_loss_warmup=10, sample_batch=32)
    rng = np.random.default_rng(1)
    before = loss_terms(model, src, tgt, psi, config, step=5, rng=rng)
    after = loss_terms(model, src, tgt, psi, config, step=10, rng=rng)
    assert before["sample"] == 0.0
    assert after["sample"] > 0.0
    for key in ("flag_enc", "flag_dec", "recon"):
        assert after[key] == pytest.approx(before[key])


def test_sample_latents_stay_in_expanded_box(rng):
    z = rng.standard_normal((40, 3)).astype(np.float32)
    config = _small_config(sample_batch=16, bbox_expand=0.2)
    samples = _sample_latents(z, config, rng)
    assert samples.shape == (16, 3)
    span = z.max(axis=0) - z.min(axis=0)
    assert (samples >= z.min(axis=0) - 0.1 * span - 1e-6).all()
    assert (samples <= z.max(axis=0) + 0.1 * span + 1e-6).all()


def test_clip_scales():
    assert _clip_scales(FlagScales((4, 8, 16)), 10).scales == (4, 8, 10)
    assert _clip_scales(FlagScales((4, 8)), 3).scales == (3,)


def test_decoded_psi_rejects_collapsed_batch():
    with pytest.raises(TrainingError, match="collapsed"):
        _decoded_psi(np.ones((10, 3), dtype=np.float32), 1.0, 4)


def test_decoded_graph_solver_matches_dense_on_first_call(rng):
    decoded = rng.standard_normal((60, 3)).astype(np.float32)
    solver = _DecodedGraphSolver(5)
    psi = solver.decoded_psi(decoded, 2.0)
    ref = _decoded_psi(decoded, 2.0, 5)
    scales = FlagScales((2, 4))
    np.testing.assert_allclose(
        _flag_kernel_fast(np.asarray(psi, np.float64), scales),
        _flag_kernel_fast(ref, scales),
        atol=1e-5,
    )
    # strided calls reuse the cached basis object until the next recompute
    assert solver.decoded_psi(decoded, 2.0) is psi
    assert solver.decoded_psi(decoded, 2.0) is psi
    assert solver.decoded_psi(decoded, 2.0) is not psi


def test_decoded_graph_solver_tracks_drifting_graph(rng):
    # feed a slowly drifting cloud and keep the tracked kernel close to the
    # dense recompute, like decoded tokens during training
    base = rng.standard_normal((80, 3)).astype(np.float32)
    drift = rng.standard_normal((80, 3)).astype(np.float32)
    solver = _DecodedGraphSolver(5, stride=1)
    scales = FlagScales((2, 4))
    for i in range(40):
        decoded = base + 0.002 * i * drift
        psi = solver.decoded_psi(decoded, 2.0)
        ref = _decoded_psi(decoded, 2.0, 5)
        got_k = _flag_kernel_fast(np.asarray(psi, np.float64), scales)
        ref_k = _flag_kernel_fast(ref, scales)
        err = np.linalg.norm(got_k - ref_k) / np.linalg.norm(ref_k)
        assert err <= 0.08, f"call {i}: kernel error {err:.3f}"


def test_encode_decode_round_shapes():
    model = _train_small()
    src, _, _, _ = _small_problem()
    z = encode(model, src)
    assert z.shape == (48, model.latent_dim)
    assert decode(model, z).shape == (48, model.target_dim)


def test_save_load_round_trip_bit_exact(tmp_path):
    model = _train_small()
    path = tmp_path / "model.vibe"
    save_model(model, path)
    back = load_model(path)
    for a, b in zip(model.encoder.weights + model.decoder.weights,
                    back.encoder.weights + back.decoder.weights):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(model.encoder.biases + model.decoder.biases,
                    back.encoder.biases + back.decoder.biases):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.target_kernel.matrix, model.target_kernel.matrix)
    assert back.scales.scales == model.scales.scales
    assert back.training_sigma_sq == model.training_sigma_sq
    assert back.final_losses == pytest.approx(model.final_losses)
    src, _, _, _ = _small_problem()
    np.testing.assert_array_equal(encode(back, src), encode(model, src))


def test_load_model_rejects_bad_containers(tmp_path):
    bad = tmp_path / "bad.vibe"
    bad.write_bytes(b"NOTAMODEL" + b"\x00" * 8)
    with pytest.raises(FeatureFileError, match="magic"):
        load_model(bad)

    model = _train_small()
    path = tmp_path / "model.vibe"
    save_model(model, path)
    truncated = tmp_path / "trunc.vibe"
    truncated.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(FeatureFileError, match="truncated"):
        load_model(truncated)


def test_model_container_validates_dims():
    model = _train_small()
    with pytest.raises(ValueError, match="source_dim"):
        VibeSpaceModel(
            encoder=model.encoder, decoder=model.decoder, scales=model.scales,
            target_kernel=model.target_kernel, source_dim=99,
            target_dim=model.target_dim, latent_dim=model.latent_dim,
            training_sigma_sq=1.0,
        )


def test_filter_negative_orthogonality(rng):
    psi_pos = rng.standard_normal((30, 5))
    psi_neg = rng.standard_normal((30, 2))
    filtered = filter_negative(psi_pos, psi_neg, beta=1.0)
    q, _ = np.linalg.qr(psi_neg)
    assert np.abs(q.T @ filtered).max() <= 1e-10
    np.testing.assert_array_equal(filter_negative(psi_pos, psi_neg, 0.0), psi_pos)
    half = filter_negative(psi_pos, psi_neg, 0.5)
    np.testing.assert_allclose(half, 0.5 * (psi_pos + filtered), atol=1e-12)


def test_filter_negative_rank_deficient_and_mismatch(rng, caplog):
    psi_pos = rng.standard_normal((20, 3))
    col = rng.standard_normal((20, 1))
    degenerate = np.concatenate([col, 2.0 * col], axis=1)
    with caplog.at_level("WARNING"):
        filtered = filter_negative(psi_pos, degenerate, 1.0)
    assert "rank-deficient" in caplog.text
    assert np.abs(col.T @ filtered).max() <= 1e-8
    with pytest.raises(ValueError, match="row counts"):
        filter_negative(psi_pos, rng.standard_normal((19, 2)), 1.0)
