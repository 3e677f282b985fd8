import numpy as np
import pytest

from latent_dit._validation import DimensionError, DomainError
from latent_dit.subspace_data import (
    DiffusionSchedule,
    LatentMixtureSpec,
    SubspaceSpec,
    perturb,
    read_dataset,
    sample_basis,
    sample_dataset,
    write_dataset,
)


def test_square_basis_is_orthogonal():
    spec = sample_basis(5, 5, seed=3)
    assert np.max(np.abs(spec.basis @ spec.basis.T - np.eye(5))) <= 1e-10


def test_single_column_unit_norm():
    spec = sample_basis(3, 1, seed=0)
    assert abs(np.linalg.norm(spec.basis[:, 0]) - 1.0) <= 1e-12


def test_basis_deterministic():
    a, b = sample_basis(7, 3, seed=11), sample_basis(7, 3, seed=11)
    assert np.array_equal(a.basis, b.basis)
    assert not np.array_equal(a.basis, sample_basis(7, 3, seed=12).basis)


def test_spec_validation():
    with pytest.raises(DimensionError):
        sample_basis(2, 3)
    with pytest.raises(DomainError):
        SubspaceSpec(2, 1, np.array([[1.0], [1.0]]))
    with pytest.raises(DomainError):
        LatentMixtureSpec((0.5, 0.6), ((0.0,), (1.0,)), (1.0, 1.0))
    with pytest.raises(DomainError):
        DiffusionSchedule(horizon=1.0, early_stop=2.0, step=0.1)
    with pytest.raises(DomainError):
        DiffusionSchedule(horizon=5.0, early_stop=0.01, step=0.02)


def test_point_mass_latent():
    spec = sample_basis(4, 2, seed=0)
    lat = LatentMixtureSpec((1.0,), ((0.0, 0.0),), (0.0,))
    assert np.array_equal(sample_dataset(spec, lat, 10, seed=1), np.zeros((10, 4)))


def test_gaussian_latent_covariance():
    spec = sample_basis(6, 2, seed=0)
    X = sample_dataset(spec, LatentMixtureSpec.standard(2), 10_000, seed=1)
    C = np.cov(X @ spec.basis, rowvar=False)
    assert np.linalg.norm(C - np.eye(2), 2) <= 0.1


def test_two_component_mean():
    spec = sample_basis(6, 2, seed=0)
    m = np.array([1.5, -0.5])
    lat = LatentMixtureSpec((0.3, 0.7), (m, -m), (0.2, 0.2))
    X = sample_dataset(spec, lat, 10_000, seed=2)
    assert np.linalg.norm((X @ spec.basis).mean(axis=0) - (0.3 * m - 0.7 * m)) <= 0.1


def test_samples_on_subspace():
    spec = sample_basis(9, 3, seed=4)
    X = sample_dataset(spec, LatentMixtureSpec.standard(3), 500, seed=0)
    resid = X - X @ spec.projector
    assert np.max(np.linalg.norm(resid, axis=1)) <= 1e-10


def test_perturb_examples():
    sch = DiffusionSchedule()
    x0 = np.arange(4.0)
    assert np.array_equal(perturb(x0, 0.0, sch, seed=1), x0)
    # beta(ln 4) = 1/2
    assert abs(sch.beta(np.log(4.0)) - 0.5) < 1e-15
    xs = np.stack([perturb(x0, np.log(4.0), sch, seed=s) for s in range(2000)])
    assert np.max(np.abs(xs.mean(axis=0) - 0.5 * x0)) <= 0.06
    Z = perturb(np.zeros((10_000, 3)), 8.0, DiffusionSchedule(horizon=10.0), seed=5)
    assert np.linalg.norm(np.cov(Z, rowvar=False) - np.eye(3), 2) <= 0.05
    with pytest.raises(DomainError):
        perturb(x0, 6.0, sch)


def test_schedule_identity():
    t = np.linspace(0.0, 20.0, 100)
    s = DiffusionSchedule
    assert np.max(np.abs(s.beta(t) ** 2 + s.sigma(t) - 1.0)) <= 1e-14


def test_dataset_roundtrip(tmp_path):
    spec = sample_basis(5, 2, seed=7)
    lat = LatentMixtureSpec((0.4, 0.6), ((1.0, 0.0), (0.0, -1.0)), (0.5, 1.0))
    X = sample_dataset(spec, lat, 20, seed=3)
    stem = str(tmp_path / "d")
    write_dataset(stem, X, spec, lat, seed=3)
    header = open(stem + ".csv").readline().strip()
    assert header == "sample_id,x_0,x_1,x_2,x_3,x_4"
    X2, spec2, lat2, meta = read_dataset(stem)
    assert np.array_equal(X, X2)
    assert np.array_equal(spec.basis, spec2.basis)
    assert np.array_equal(lat.means, lat2.means)
    assert meta["n"] == 20 and meta["seed"] == 3
