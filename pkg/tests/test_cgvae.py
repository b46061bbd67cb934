import math

import numpy as np
import pytest

from dislab.cgvae import (
    CheckpointError,
    CgvaeModel,
    DivergenceError,
    MLP,
    TrainConfig,
    build_model,
    checkpoint_load,
    checkpoint_save,
    decoder_jacobian,
    elbo_terms,
    encode,
    encode_stats,
    objective,
    sparse_penalty_exact,
    sparse_penalty_fd,
    train,
)
from dislab.flows import DeepSigmoidFlow
from dislab.numerics import Tensor, backward, square, sum_
from dislab.synthgen import preset, sample_dataset

from conftest import central_diff


def _tiny(seed=0, n=2, obs=2, domains=2, hidden=4, **kw):
    cfg = TrainConfig(seed=seed, hidden=hidden, flow_units=2, **kw)
    return build_model(obs, n, domains, cfg), cfg


def _linear_decoder(W, b=None):
    """One affine layer; W is [n_obs, n_latent] as a Jacobian."""
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[0]) if b is None else b
    return MLP([Tensor(W.T.copy(), True)], [Tensor(np.asarray(b, float), True)])


def _constant_decoder(n, obs, rng):
    sizes = [n, 5, obs]
    mlp = MLP.init(sizes, rng)
    mlp.weights[0].data[:] = 0.0
    return mlp


# ------------------------------------------------------------------ config


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(beta=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(penalty_kind="L3")
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1.0})


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.alpha, cfg.beta) == (3e-3, 64, 5e-2, 1e-3)
    assert TrainConfig(alpha_zero_ablation=True).effective_alpha == 0.0


def test_architecture_shapes():
    model, _ = _tiny(n=3, obs=5, hidden=7)
    assert model.encoder.sizes == [5, 7, 7, 7, 7, 6]
    assert model.decoder.sizes == [3, 7, 7, 7, 7, 5]
    assert len(model.encoder.weights) == 5


# ------------------------------------------------------------------ encode


def test_zero_noise_gives_mean(rng):
    model, _ = _tiny()
    x = rng.standard_normal((6, 2))
    mu, _, z = encode(model, x, np.zeros((6, 2)))
    assert np.array_equal(z.data, mu.data)


def test_logvar_clamped(rng):
    model, _ = _tiny()
    model.encoder.biases[-1].data[2:] = -1e3
    _, logvar = encode_stats(model, rng.standard_normal((4, 2)))
    assert np.all(logvar.data >= -10.0)
    assert np.all(np.exp(0.5 * logvar.data) >= math.exp(-5) - 1e-15)


def test_encoder_gradient_matches_fd(rng):
    model, _ = _tiny(seed=3)
    x = rng.standard_normal((5, 2))
    eta = rng.standard_normal((5, 2))
    f = lambda: sum_(square(encode(model, x, eta)[2]))
    grads = backward(f())
    for w in model.encoder.weights:
        base = w.data.copy()

        def g(v, w=w):
            w.data = v
            return f().item()

        num = central_diff(g, base.copy())
        w.data = base
        assert np.max(np.abs(grads[w] - num)) < 1e-4


def test_nonfinite_activation_names_layer(rng):
    model, _ = _tiny()
    model.encoder.weights[2].data[0, 0] = np.inf
    with pytest.raises(DivergenceError, match="layer"):
        encode(model, np.ones((1, 2)), np.zeros((1, 2)))


# ------------------------------------------------------------------- ELBO


def test_perfect_reconstruction(rng):
    model, _ = _tiny()
    model.encoder.weights[-1].data[:] = 0.0
    model.encoder.biases[-1].data[:] = 0.0
    x = np.full((3, 2), 0.25)
    model.decoder = _constant_decoder(2, 2, rng)
    model.decoder.biases[-1].data[:] = 0.0
    model.decoder.weights[-1].data[:] = 0.0
    model.decoder.biases[-1].data[:] = 0.25
    terms = elbo_terms(model, x, [0, 1, 0], rng=rng)
    assert terms.L_r.item() == 0.0


def _gaussian_q(model, mean_value):
    model.encoder.weights[-1].data[:] = 0.0
    model.encoder.biases[-1].data[:] = 0.0
    model.encoder.biases[-1].data[: model.n_latent] = mean_value
    model.flow = DeepSigmoidFlow.identity(model.flow.n_domains, model.n_latent)


def test_kl_zero_when_q_matches_prior(rng):
    model, _ = _tiny(n=3, obs=3)
    _gaussian_q(model, 0.0)
    x = rng.standard_normal((40, 3))
    eta = rng.standard_normal((40, 3))
    from dislab.cgvae import LOG_2PI, prior_logdensity

    _, logvar, z = encode(model, x, eta)
    log_q = (-0.5 * LOG_2PI - 0.5 * logvar.data - 0.5 * eta**2).sum(1)
    log_p = prior_logdensity(model.flow, z, rng.integers(0, 2, 40)).data
    assert np.max(np.abs(log_q - log_p)) < 1e-12
    assert abs(elbo_terms(model, x, np.zeros(40, int), eta).L_KL.item()) < 1e-12


def test_kl_monte_carlo_matches_closed_form():
    m = 0.8
    model, _ = _tiny(n=2, obs=2)
    _gaussian_q(model, m)
    n = 100_000
    rng = np.random.default_rng(7)
    eta = rng.standard_normal((n, 2))
    x = np.zeros((n, 2))
    from dislab.cgvae import LOG_2PI, prior_logdensity

    _, _, z = encode(model, x, eta)
    pointwise = (-0.5 * LOG_2PI - 0.5 * eta**2).sum(1) - prior_logdensity(model.flow, z, np.zeros(n, int)).data
    est = pointwise.mean()
    se = pointwise.std(ddof=1) / math.sqrt(n)
    assert abs(est - 2 * m * m / 2) < 3 * se


def test_empty_batch_rejected():
    model, _ = _tiny()
    with pytest.raises(ValueError, match="empty"):
        elbo_terms(model, np.zeros((0, 2)), [])


# -------------------------------------------------------------- penalties


def test_linear_decoder_penalty(rng):
    W = rng.standard_normal((3, 2))
    model, _ = _tiny(obs=3)
    model.decoder = _linear_decoder(W)
    z = rng.standard_normal((7, 2))
    assert sparse_penalty_exact(model, z, "L1").item() == pytest.approx(np.abs(W).sum(), rel=1e-12)
    assert sparse_penalty_exact(model, z, "L2").item() == pytest.approx((W**2).sum(), rel=1e-12)
    fd = sparse_penalty_fd(model, z, step=1e-3).item()
    assert fd == pytest.approx(np.abs(W.sum(axis=1)).sum(), abs=1e-8)
    fd_entry = sparse_penalty_fd(model, z, step=1e-3, reduce="entrywise").item()
    assert fd_entry == pytest.approx(np.abs(W).sum(), abs=1e-8)


def test_constant_decoder_penalty(rng):
    model, _ = _tiny()
    model.decoder = _constant_decoder(2, 2, rng)
    z = rng.standard_normal((5, 2))
    assert sparse_penalty_exact(model, z).item() == 0.0
    assert sparse_penalty_fd(model, z).item() == 0.0


def test_exact_jacobian_matches_fd(rng):
    model, _ = _tiny(seed=2, n=3, obs=3, hidden=8)
    z = rng.standard_normal((6, 3))
    J = decoder_jacobian(model, z)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        col = (model.decoder(z + e).data - model.decoder(z - e).data) / (2 * h)
        assert np.max(np.abs(J[:, :, j] - col)) < 1e-4
    assert sparse_penalty_exact(model, z).item() == pytest.approx(np.abs(J).sum(axis=(1, 2)).mean(), rel=1e-12)


def test_fd_penalty_richardson(rng):
    model, _ = _tiny(seed=5, n=2, obs=3, hidden=6)
    z = rng.standard_normal((4, 2))
    exact = np.abs(decoder_jacobian(model, z).sum(axis=2)).sum(axis=1).mean()
    for step in (1e-2, 1e-3):
        full = sparse_penalty_fd(model, z, step=step).item()
        half = sparse_penalty_fd(model, z, step=step / 2).item()
        scale = 1.0 + exact
        assert abs(full - half) <= 10 * step * scale
        assert abs(half - exact) <= 10 * step * scale


def test_penalty_gradient_matches_fd(rng):
    model, _ = _tiny(seed=6)
    z = rng.standard_normal((3, 2))
    grads = backward(sparse_penalty_exact(model, z, "L2"))
    w = model.decoder.weights[1]
    base = w.data.copy()

    def g(v):
        w.data = v
        return sparse_penalty_exact(model, z, "L2").item()

    num = central_diff(g, base.copy())
    w.data = base
    assert np.max(np.abs(grads[w] - num)) < 1e-5


def test_objective_gradient_matches_fd(rng):
    model, cfg = _tiny(seed=8, alpha=0.5, beta=0.3)
    x = rng.standard_normal((6, 2))
    u = np.array([0, 1, 0, 1, 1, 0])
    eta = rng.standard_normal((6, 2))
    total, _ = objective(model, x, u, cfg, eta)
    grads = backward(total)
    for name, p in model.named_parameters():
        base = p.data.copy()

        def g(v, p=p):
            p.data = v
            return objective(model, x, u, cfg, eta)[0].item()

        num = central_diff(g, base.copy(), h=1e-6)
        p.data = base
        scale = max(np.max(np.abs(num)), 1e-6)
        assert np.max(np.abs(grads.get(p, 0) - num)) / scale < 1e-3, name


# --------------------------------------------------------------- training


@pytest.fixture(scope="module")
def small_data():
    spec, prior = preset("A", 2, 0)
    return sample_dataset(spec, prior, 150, 0)


@pytest.mark.parametrize("seed", range(3))
def test_autoencoder_descent(seed):
    spec, prior = preset("A", 2, 0)
    data = sample_dataset(spec, prior, 1000, 0)
    model, cfg = _tiny(seed=seed, n=4, obs=4, hidden=16, alpha=0.0, beta=0.0, epochs=5)
    hist = train(model, data, cfg).history
    mse = [-h.L_r for h in hist]
    smoothed = np.convolve(mse, np.ones(2) / 2, mode="valid")
    assert np.all(np.diff(smoothed) < 0)


def test_training_deterministic(small_data):
    cfg = TrainConfig(seed=4, hidden=8, epochs=2)
    a = train(build_model(4, 4, 2, cfg), small_data, cfg).model
    b = train(build_model(4, 4, 2, cfg), small_data, cfg).model
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p.data, q.data)


def test_ablation_equals_alpha_zero(small_data):
    base = dict(seed=1, hidden=8, epochs=2)
    c1 = TrainConfig(alpha=0.0, **base)
    c2 = TrainConfig(alpha_zero_ablation=True, **base)
    h1 = train(build_model(4, 4, 2, c1), small_data, c1).history
    h2 = train(build_model(4, 4, 2, c2), small_data, c2).history
    assert [(h.L_r, h.L_KL, h.total) for h in h1] == [(h.L_r, h.L_KL, h.total) for h in h2]


def test_divergence_reports_epoch(small_data):
    cfg = TrainConfig(seed=0, hidden=8, epochs=1)
    model = build_model(4, 4, 2, cfg)
    model.decoder.weights[0].data[0, 0] = np.nan
    with pytest.raises(DivergenceError, match="epoch 0"):
        train(model, small_data, cfg)


def test_mc_samples_stack_batch(small_data):
    cfg = TrainConfig(seed=0, hidden=8, epochs=1, mc_samples=3)
    res = train(build_model(4, 4, 2, cfg), small_data, cfg)
    assert np.isfinite(res.history[-1].total)
    with pytest.raises(ValueError):
        TrainConfig(mc_samples=0)


# ------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    model, cfg = _tiny(seed=9, use_mask=True)
    checkpoint_save(model, tmp_path / "a", cfg, "abc")
    back, manifest = checkpoint_load(tmp_path / "a")
    assert manifest["dataset_digest"] == "abc"
    for (n1, p), (n2, q) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(p.data, q.data)
    checkpoint_save(back, tmp_path / "b", cfg, "abc")
    for f in ("params.f64le", "model.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    x = rng.standard_normal((5, 2))
    eta = rng.standard_normal((5, 2))
    u = [0, 1, 1, 0, 0]
    t1, t2 = elbo_terms(model, x, u, eta), elbo_terms(back, x, u, eta)
    assert t1.L_r.item() == t2.L_r.item() and t1.L_KL.item() == t2.L_KL.item()


def test_checkpoint_truncated(tmp_path):
    model, cfg = _tiny()
    checkpoint_save(model, tmp_path, cfg)
    blob = (tmp_path / "params.f64le").read_bytes()
    (tmp_path / "params.f64le").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_load(tmp_path)


def test_checkpoint_digest_and_version(tmp_path):
    import json

    model, cfg = _tiny()
    checkpoint_save(model, tmp_path, cfg)
    blob = bytearray((tmp_path / "params.f64le").read_bytes())
    blob[0] ^= 1
    (tmp_path / "params.f64le").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="digest"):
        checkpoint_load(tmp_path)
    m = json.loads((tmp_path / "model.json").read_text())
    m["version"] = 99
    (tmp_path / "model.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(tmp_path)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="large alpha collapses the decoder instead of sparsifying it; see notes on the objective")
def test_large_alpha_concentrates_jacobian_on_graph():
    from dislab.theory import off_support_mass

    spec, prior = preset("A", 2, 0)
    data = sample_dataset(spec, prior, 500, 0)
    cfg = TrainConfig(seed=0, hidden=16, alpha=10.0, epochs=40)
    model = train(build_model(4, 4, 2, cfg), data, cfg).model
    x, z, _ = data.test()
    assert off_support_mass(model, model.posterior_mean(x), spec, z) < 0.05
