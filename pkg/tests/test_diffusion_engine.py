import numpy as np
import pytest
from scipy.integrate import quad

from latent_dit._validation import DomainError, NonFiniteError
from latent_dit.analytic_score import AnalyticScore
from latent_dit.diffusion_engine import (
    TrainConfig,
    backward_sample,
    dist_proxy,
    dsm_loss,
    dsm_target,
    loss_and_grads,
    subspace_error,
    train,
)
from latent_dit.dit_score_net import ReshapeSpec, ScoreNetwork
from latent_dit.subspace_data import DiffusionSchedule, LatentMixtureSpec, sample_basis, sample_dataset

SCH = DiffusionSchedule()


def noisy_batch(rng, X, sch, n):
    idx = rng.integers(0, len(X), n)
    t = rng.uniform(sch.early_stop, sch.horizon, n)
    x0 = X[idx]
    xt = sch.beta(t)[:, None] * x0 + np.sqrt(sch.sigma(t))[:, None] * rng.standard_normal(x0.shape)
    return x0, t, xt


def test_dsm_loss_oracle_zero_and_nonneg(rng):
    X = rng.standard_normal((50, 4))
    x0, t, xt = noisy_batch(rng, X, SCH, 32)
    target = dsm_target(x0, t, xt, SCH)
    assert dsm_loss(None, x0, t, xt, SCH, score=lambda x, tt: target) == 0.0
    net = ScoreNetwork.init(4, ReshapeSpec(2, 2), seed=0)
    assert dsm_loss(net, x0, t, xt, SCH) >= 0.0
    with pytest.raises(DomainError):
        dsm_loss(net, x0, np.full(32, 0.001), xt, SCH)


def test_dsm_loss_gaussian_quadrature():
    # D = 1 standard Gaussian data; with the exact score the residual has mean square beta^2 / sigma
    sch = DiffusionSchedule(horizon=3.0, early_stop=0.5, step=0.01)
    spec = sample_basis(1, 1, seed=0)
    lat = LatentMixtureSpec.standard(1)
    r = np.random.default_rng(11)
    n = 100_000
    x0 = r.standard_normal((n, 1))
    t = r.uniform(0.5, 3.0, n)
    xt = sch.beta(t)[:, None] * x0 + np.sqrt(sch.sigma(t))[:, None] * r.standard_normal((n, 1))
    mc = dsm_loss(None, x0, t, xt, sch, score=AnalyticScore(spec, lat, sch))
    exact = quad(lambda s: sch.beta(s) ** 2 / sch.sigma(s), 0.5, 3.0)[0] / 2.5
    assert abs(mc - exact) <= 2e-2 * exact


def test_network_gradients_match_finite_differences(rng):
    net = ScoreNetwork.init(18, ReshapeSpec(4, 2), n_blocks=1, heads=2, head_dim=2, hidden=5, weight_scale=0.8, seed=1)
    net.time_scale[:] = 0.3 * rng.standard_normal((4, 2))
    net.time_shift[:] = 0.3 * rng.standard_normal((4, 2))
    net.blocks[0].b1[:] = 0.1 * rng.standard_normal(5)
    X = rng.standard_normal((20, 18))
    x0, t, xt = noisy_batch(rng, X, SCH, 4)
    _, g = loss_and_grads(net, x0, t, xt, SCH)
    for name, v in net.named_params().items():
        fd = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            o = v[i]
            v[i] = o + 1e-6
            lp = dsm_loss(net, x0, t, xt, SCH)
            v[i] = o - 1e-6
            lm = dsm_loss(net, x0, t, xt, SCH)
            v[i] = o
            fd[i] = (lp - lm) / 2e-6
        assert np.max(np.abs(fd - g[name])) <= 1e-6 * max(1.0, np.max(np.abs(fd))), name


def small_problem(D=8, d0=4, n=512, seed=0):
    spec = sample_basis(D, d0, seed=seed)
    X = sample_dataset(spec, LatentMixtureSpec.standard(d0), n, seed=seed)
    return spec, X


def test_zero_learning_rate_keeps_parameters():
    spec, X = small_problem()
    net = ScoreNetwork.init(8, ReshapeSpec(2, 2), seed=0)
    res = train(TrainConfig(steps=5, learning_rate=0.0, batch_size=8), X, net)
    a, b = net.named_params(), res.net.named_params()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert len(res.history) == 5


def test_training_deterministic_and_orthonormal():
    spec, X = small_problem()
    net = ScoreNetwork.init(8, ReshapeSpec(2, 2), seed=0)
    cfg = TrainConfig(steps=30, learning_rate=1e-3, batch_size=16, seed=4,
                      schedule=DiffusionSchedule(5.0, 0.1, 0.01))
    r1 = train(cfg, X, net)
    r2 = train(cfg, X, net)
    assert [h["loss"] for h in r1.history] == [h["loss"] for h in r2.history]
    W = r1.net.w_b
    assert np.max(np.abs(W.T @ W - np.eye(4))) <= 1e-8


def test_training_recovers_subspace():
    # D=8 with a 4-dim latent; square patches need a square latent dimension
    spec, X = small_problem(n=2048)
    net = ScoreNetwork.init(8, ReshapeSpec(2, 2), hidden=16, seed=0)
    cfg = TrainConfig(steps=2000, learning_rate=1e-3, batch_size=64, seed=0,
                      schedule=DiffusionSchedule(5.0, 0.1, 0.01))
    res = train(cfg, X, net, basis=spec.basis)
    assert res.history[-1]["subspace_error"] <= 0.1


def test_non_finite_aborts():
    spec, X = small_problem()
    X = X.copy()
    X[:] = np.nan
    net = ScoreNetwork.init(8, ReshapeSpec(2, 2), seed=0)
    with pytest.raises(NonFiniteError):
        train(TrainConfig(steps=1, batch_size=4), X, net)


def test_fast_exact_parity_one_step():
    spec = sample_basis(24, 16, seed=1)
    X = sample_dataset(spec, LatentMixtureSpec.standard(16), 256, seed=2)
    net = ScoreNetwork.init(24, ReshapeSpec(4, 2), heads=2, head_dim=2, hidden=8, weight_scale=0.3, seed=3)
    out = []
    for fast in (False, True):
        cfg = TrainConfig(batch_size=16, steps=1, learning_rate=1e-2, seed=0, use_fast_grad=fast, eps_target=1e-8,
                          schedule=DiffusionSchedule(5.0, 0.5, 0.01))
        out.append(train(cfg, X, net).net.named_params())
    assert max(np.max(np.abs(out[0][k] - out[1][k])) for k in out[0]) <= 1e-6


def test_subspace_error_examples(rng):
    B = sample_basis(6, 2, seed=0).basis
    assert subspace_error(B, B) == 0.0
    U, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    assert subspace_error(B @ U, B) <= 1e-24
    E = np.eye(4)
    assert subspace_error(E[:, 2:], E[:, :2]) == 4.0
    with pytest.warns(RuntimeWarning):
        v = subspace_error(2 * B, B)
    assert not v.orthonormal


def test_sampler_contract():
    spec = sample_basis(8, 2, seed=0)
    lat = LatentMixtureSpec.standard(2)
    sch = DiffusionSchedule(5.0, 0.01, 0.01)
    rep = backward_sample(AnalyticScore(spec, lat, sch), sch, 50, seed=0, basis=spec.basis)
    assert rep.steps_taken == 499 == round((5.0 - 0.01) / 0.01)
    assert rep.samples.shape == (50, 8)
    with pytest.raises(DomainError):
        backward_sample(lambda y, t: -y, DiffusionSchedule(5.0, 0.03, 0.02), 4, dim=3)
    with pytest.raises(NonFiniteError):
        backward_sample(lambda y, t: y * np.nan, sch, 4, dim=3)


def test_sampler_on_support_covariance():
    spec = sample_basis(8, 2, seed=0)
    lat = LatentMixtureSpec.standard(2)
    sch = DiffusionSchedule(5.0, 0.01, 0.01)
    rep = backward_sample(AnalyticScore(spec, lat, sch), sch, 5000, seed=1, basis=spec.basis)
    assert rep.on_cov_spectral <= 0.15
    assert rep.orth_cov_spectral <= 1.5 * np.e * (0.01 + 0.01)


def test_sampler_step_halving():
    spec = sample_basis(8, 2, seed=0)
    lat = LatentMixtureSpec.standard(2)
    means = []
    for mu in (0.04, 0.02, 0.01):
        sch = DiffusionSchedule(5.0, 0.04, mu)
        rep = backward_sample(AnalyticScore(spec, lat, sch), sch, 2000, seed=1, basis=spec.basis, noise_step=0.01)
        means.append(rep.mean)
    ratio = np.linalg.norm(means[0] - means[1]) / np.linalg.norm(means[1] - means[2])
    assert 1.5 <= ratio <= 2.5


def test_dist_proxy_examples():
    r = np.random.default_rng(0)
    a = r.standard_normal((500, 3))
    assert dist_proxy(a, a, seed=1) == 0.0
    b, c = r.standard_normal((10_000, 3)), r.standard_normal((10_000, 3))
    assert dist_proxy(b, c, seed=1) <= 0.05
    assert dist_proxy(b, c, seed=1) == dist_proxy(c, b, seed=1)
    x, y = r.standard_normal(10_000), 3 + r.standard_normal(10_000)
    assert dist_proxy(x, y, n_slices=8) >= 0.8
