import numpy as np
import pytest
from scipy.special import logsumexp

from latent_dit._validation import DomainError
from latent_dit.analytic_score import (
    AnalyticScore,
    decompose_score,
    latent_log_density,
    latent_score,
    q_function,
)
from latent_dit.subspace_data import DiffusionSchedule, LatentMixtureSpec, sample_basis

SCH = DiffusionSchedule()


def mixture3():
    return LatentMixtureSpec(
        (0.2, 0.5, 0.3), ((1.0, -1.0), (-0.5, 0.5), (2.0, 1.0)), (0.3, 0.6, 0.2)
    )


def test_standard_gaussian_score(rng):
    lat = LatentMixtureSpec.standard(3)
    h = rng.standard_normal((10, 3))
    for t in (0.05, 1.0, 4.0):
        assert np.allclose(latent_score(lat, h, t, SCH), -h, atol=1e-12)


def test_symmetric_mixture_origin():
    m = np.array([1.0, 2.0])
    lat = LatentMixtureSpec((0.5, 0.5), (m, -m), (0.4, 0.4))
    assert np.allclose(latent_score(lat, np.zeros(2), 0.7, SCH), 0.0, atol=1e-15)


def test_latent_score_monte_carlo():
    lat = mixture3()
    t = 1.0
    h = np.array([0.3, -0.4])
    r = np.random.default_rng(7)
    k = r.choice(3, size=1_000_000, p=lat.weights)
    h0 = lat.means[k] + np.sqrt(lat.cov_scales[k])[:, None] * r.standard_normal((1_000_000, 2))
    b, s = SCH.beta(t), SCH.sigma(t)
    diff = h[None] - b * h0
    logw = -0.5 * np.sum(diff**2, axis=1) / s
    w = np.exp(logw - logsumexp(logw))
    mc = -(w[:, None] * diff).sum(axis=0) / s
    got = latent_score(lat, h, t, SCH)
    assert np.linalg.norm(got - mc) <= 1e-2 * np.linalg.norm(mc)


def test_latent_score_is_log_density_gradient(rng):
    lat = mixture3()
    h = rng.standard_normal(2)
    e = 1e-6
    fd = np.array([
        (latent_log_density(lat, h + e * u, 0.4, SCH) - latent_log_density(lat, h - e * u, 0.4, SCH)) / (2 * e)
        for u in np.eye(2)
    ])
    assert np.allclose(fd, latent_score(lat, h, 0.4, SCH), atol=1e-7)


def test_far_tail_is_finite():
    lat = mixture3()
    out = latent_score(lat, np.array([40.0, -40.0]), 0.5, SCH)
    assert np.all(np.isfinite(out))


def test_point_mass_needs_positive_t():
    lat = LatentMixtureSpec((1.0,), ((0.0,),), (0.0,))
    with pytest.raises(DomainError):
        latent_score(lat, np.zeros(1), 0.0, SCH)
    assert np.allclose(latent_score(lat, np.ones(1), 1.0, SCH), -1.0 / SCH.sigma(1.0))


def test_decomposition_properties(rng):
    spec = sample_basis(7, 2, seed=1)
    lat = mixture3()
    P = spec.projector
    for _ in range(20):
        x = 2 * rng.standard_normal(7)
        t = rng.uniform(0.05, 5.0)
        dec = decompose_score(spec, lat, x, t, SCH)
        assert np.allclose(dec.total, dec.on_support + dec.orthogonal, atol=1e-12, rtol=0)
        assert np.max(np.abs(spec.basis.T @ dec.orthogonal)) <= 1e-10
        assert np.max(np.abs(dec.on_support - P @ dec.on_support)) <= 1e-10
        ip = abs(dec.on_support @ dec.orthogonal)
        assert ip <= 1e-8 * np.linalg.norm(dec.on_support) * np.linalg.norm(dec.orthogonal) + 1e-300
        q = q_function(lat, x @ spec.basis, t, SCH)
        assert np.allclose(dec.total, (spec.basis @ q - x) / SCH.sigma(t), atol=1e-10, rtol=0)


def test_in_span_has_no_orthogonal_part(rng):
    spec = sample_basis(5, 2, seed=2)
    x = spec.basis @ rng.standard_normal(2)
    dec = decompose_score(spec, mixture3(), x, 0.3, SCH)
    assert np.max(np.abs(dec.orthogonal)) <= 1e-12


def test_standard_gaussian_total(rng):
    spec = sample_basis(6, 3, seed=0)
    P = spec.projector
    x = rng.standard_normal(6)
    t = 0.8
    want = -P @ x - (np.eye(6) - P) @ x / SCH.sigma(t)
    assert np.allclose(decompose_score(spec, LatentMixtureSpec.standard(3), x, t, SCH).total, want, atol=1e-12)


def test_linear_in_x_for_gaussian(rng):
    spec = sample_basis(6, 3, seed=0)
    s = AnalyticScore(spec, LatentMixtureSpec.standard(3), SCH)
    x, y = rng.standard_normal(6), rng.standard_normal(6)
    a = 0.3
    assert np.allclose(s(a * x + (1 - a) * y, 1.2), a * s(x, 1.2) + (1 - a) * s(y, 1.2), atol=1e-12)


def ambient_log_density_quadrature(spec, lat, x, t, n=40001):
    # log of the integral over h of N(x; beta B h, sigma I) p_h(h), D=3, d0=1
    h = np.linspace(-14, 14, n)
    dh = h[1] - h[0]
    b, s = SCH.beta(t), SCH.sigma(t)
    B = spec.basis[:, 0]
    lp_h = logsumexp(
        np.log(lat.weights)[None] - 0.5 * np.log(2 * np.pi * lat.cov_scales)[None]
        - 0.5 * (h[:, None] - lat.means[None, :, 0]) ** 2 / lat.cov_scales[None],
        axis=1,
    )
    r2 = np.sum((x[None] - b * h[:, None] * B[None]) ** 2, axis=1)
    lk = -0.5 * 3 * np.log(2 * np.pi * s) - 0.5 * r2 / s
    return logsumexp(lp_h + lk) + np.log(dh)


def test_total_matches_quadrature_gradient():
    spec = sample_basis(3, 1, seed=5)
    lat = LatentMixtureSpec((0.35, 0.65), ((-1.2,), (0.8,)), (0.25, 0.5))
    r = np.random.default_rng(3)
    for t in (0.2, 1.0):
        x = r.standard_normal(3)
        e = 1e-4
        fd = np.array([
            (ambient_log_density_quadrature(spec, lat, x + e * u, t)
             - ambient_log_density_quadrature(spec, lat, x - e * u, t)) / (2 * e)
            for u in np.eye(3)
        ])
        got = decompose_score(spec, lat, x, t, SCH).total
        assert np.max(np.abs(got - fd)) <= 1e-3


def test_per_row_times(rng):
    spec = sample_basis(5, 2, seed=1)
    x = rng.standard_normal((4, 5))
    t = np.array([0.1, 0.5, 1.0, 3.0])
    batch = decompose_score(spec, mixture3(), x, t, SCH).total
    rows = np.array([decompose_score(spec, mixture3(), x[i], t[i], SCH).total for i in range(4)])
    assert np.allclose(batch, rows, atol=1e-13)
