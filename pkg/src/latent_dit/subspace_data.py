"""Synthetic data on a linear latent subspace and the forward noising kernel."""

import json
from dataclasses import dataclass, field

import numpy as np

from ._validation import DimensionError, DomainError, as_vector, make_rng

__all__ = [
    "SubspaceSpec",
    "LatentMixtureSpec",
    "DiffusionSchedule",
    "sample_basis",
    "sample_latent",
    "sample_dataset",
    "perturb",
    "write_dataset",
    "read_dataset",
]


@dataclass(frozen=True)
class SubspaceSpec:
    """Ambient dimension, latent dimension and orthonormal basis ``B`` (D x d0)."""

    ambient_dim: int
    latent_dim: int
    basis: np.ndarray
    seed: int = 0

    def __post_init__(self):
        B = np.asarray(self.basis, dtype=np.float64)
        if self.latent_dim > self.ambient_dim:
            raise DimensionError("latent_dim must not exceed ambient_dim")
        if B.shape != (self.ambient_dim, self.latent_dim):
            raise DimensionError(f"basis shape {B.shape} != ({self.ambient_dim}, {self.latent_dim})")
        if not np.allclose(B.T @ B, np.eye(self.latent_dim), atol=1e-10, rtol=0):
            raise DomainError("basis columns are not orthonormal")
        object.__setattr__(self, "basis", B)

    @property
    def projector(self):
        return self.basis @ self.basis.T


@dataclass(frozen=True)
class LatentMixtureSpec:
    """Finite isotropic Gaussian mixture ``sum_k w_k N(m_k, s_k I)``.

    ``cov_scale`` of exactly 0 is allowed and means a point mass at the mean.
    """

    weights: tuple
    means: tuple
    cov_scales: tuple
    lipschitz_hint: float = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        s = np.asarray(self.cov_scales, dtype=np.float64)
        if not (w.ndim == 1 and s.ndim == 1 and len(w) == len(s) == m.shape[0]):
            raise DimensionError("weights, means and cov_scales must have one entry per component")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("weights must be positive and sum to 1")
        if np.any(s < 0):
            raise DomainError("cov_scales must be non-negative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "cov_scales", s)

    @property
    def dim(self):
        return self.means.shape[1]

    @classmethod
    def standard(cls, d0):
        return cls(weights=(1.0,), means=(np.zeros(d0),), cov_scales=(1.0,))

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "cov_scales": self.cov_scales.tolist(),
            "lipschitz_hint": self.lipschitz_hint,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            weights=tuple(d["weights"]),
            means=tuple(map(tuple, d["means"])),
            cov_scales=tuple(d["cov_scales"]),
            lipschitz_hint=d.get("lipschitz_hint"),
        )


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance-preserving schedule with ``w = 1`` and loss weight ``gamma = 1``.

    ``beta(t) = exp(-t/2)`` and ``sigma(t) = 1 - exp(-t)``; ``sigma`` is the
    noise variance, not a standard deviation.
    """

    horizon: float = 5.0
    early_stop: float = 0.01
    step: float = 0.01
    weight: float = field(default=1.0, init=False)
    loss_weight: float = field(default=1.0, init=False)

    def __post_init__(self):
        T, T0, mu = self.horizon, self.early_stop, self.step
        if not (0 < T0 < T):
            raise DomainError(f"need 0 < T0 < T, got T0={T0}, T={T}")
        if not (0 < mu <= T0):
            raise DomainError(f"need 0 < mu <= T0, got mu={mu}")

    @staticmethod
    def beta(t):
        return np.exp(-0.5 * np.asarray(t, dtype=np.float64))

    @staticmethod
    def sigma(t):
        return -np.expm1(-np.asarray(t, dtype=np.float64))

    def n_steps(self):
        return int(round((self.horizon - self.early_stop) / self.step))

    def to_dict(self):
        return {"horizon": self.horizon, "early_stop": self.early_stop, "step": self.step}


def sample_basis(D, d0, seed=0):
    """Random ``D x d0`` matrix with orthonormal columns.

    Classical Gram-Schmidt (applied twice for stability) on seeded Gaussian draws.
    """
    D, d0 = int(D), int(d0)
    if d0 > D:
        raise DimensionError(f"d0={d0} exceeds D={D}")
    if d0 < 1:
        raise DomainError("d0 must be positive")
    G = make_rng(seed, 1).standard_normal((D, d0))
    Q = np.zeros_like(G)
    for j in range(d0):
        v = G[:, j].copy()
        for _ in range(2):
            v -= Q[:, :j] @ (Q[:, :j].T @ v)
        Q[:, j] = v / np.linalg.norm(v)
    return SubspaceSpec(D, d0, Q, seed)


def sample_latent(latent, n, seed):
    """Draw ``n`` latent vectors from the mixture."""
    rng = make_rng(seed, 2)
    k = rng.choice(len(latent.weights), size=n, p=latent.weights)
    z = rng.standard_normal((n, latent.dim))
    return latent.means[k] + np.sqrt(latent.cov_scales[k])[:, None] * z


def sample_dataset(spec, latent, n, seed=0):
    """Clean samples ``x = B h`` with ``h`` from ``latent``; shape (n, D)."""
    if latent.dim != spec.latent_dim:
        raise DimensionError(f"latent dim {latent.dim} != spec latent_dim {spec.latent_dim}")
    h = sample_latent(latent, n, seed)
    return h @ spec.basis.T


def perturb(x0, t, schedule, seed=0):
    """Forward kernel draw ``x_t = beta(t) x0 + sqrt(sigma(t)) z``.

    ``x0`` may be a vector or a batch of row vectors.
    """
    if not (0 <= t <= schedule.horizon):
        raise DomainError(f"t={t} outside [0, {schedule.horizon}]")
    x0 = np.asarray(x0, dtype=np.float64)
    z = make_rng(seed, 3).standard_normal(x0.shape)
    return schedule.beta(t) * x0 + np.sqrt(schedule.sigma(t)) * z


def write_dataset(path_stem, X, spec, latent, seed):
    """Write ``<stem>.csv``, ``<stem>.json`` and ``<stem>_basis.csv``."""
    X = np.asarray(X)
    D = X.shape[1]
    header = "sample_id," + ",".join(f"x_{j}" for j in range(D))
    ids = np.arange(X.shape[0])[:, None]
    np.savetxt(
        f"{path_stem}.csv",
        np.hstack([ids, X]),
        delimiter=",",
        header=header,
        comments="",
        fmt=["%d"] + ["%.17g"] * D,
    )
    np.savetxt(f"{path_stem}_basis.csv", spec.basis, delimiter=",", fmt="%.17g")
    meta = {
        "D": spec.ambient_dim,
        "d0": spec.latent_dim,
        "seed": int(seed),
        "basis_seed": int(spec.seed),
        "n": int(X.shape[0]),
        "mixture": latent.to_dict(),
    }
    with open(f"{path_stem}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def read_dataset(path_stem):
    """Inverse of :func:`write_dataset`; returns ``(X, spec, latent, meta)``."""
    arr = np.loadtxt(f"{path_stem}.csv", delimiter=",", skiprows=1, ndmin=2)
    with open(f"{path_stem}.json") as fh:
        meta = json.load(fh)
    B = np.loadtxt(f"{path_stem}_basis.csv", delimiter=",", ndmin=2)
    spec = SubspaceSpec(meta["D"], meta["d0"], B, meta.get("basis_seed", 0))
    latent = LatentMixtureSpec.from_dict(meta["mixture"])
    return arr[:, 1:], spec, latent, meta
