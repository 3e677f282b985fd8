"""Closed-form scores of noised Gaussian-mixture latents and their lift to ambient space."""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._validation import DimensionError, DomainError

__all__ = [
    "ScoreDecomposition",
    "latent_log_density",
    "latent_score",
    "decompose_score",
    "q_function",
    "AnalyticScore",
]


@dataclass(frozen=True)
class ScoreDecomposition:
    on_support: np.ndarray
    orthogonal: np.ndarray
    total: np.ndarray


def _check_t(t, schedule):
    t = np.asarray(t, dtype=np.float64)
    if not np.all((t > 0) & (t <= schedule.horizon)):
        raise DomainError(f"t={t} outside (0, {schedule.horizon}]")


def _component_terms(latent, h_bar, t, schedule):
    h = np.atleast_2d(np.asarray(h_bar, dtype=np.float64))
    if h.shape[1] != latent.dim:
        raise DimensionError(f"h_bar has dim {h.shape[1]}, latent dim is {latent.dim}")
    # t is a scalar or one time per row
    tt = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    if tt.shape[0] not in (1, h.shape[0]):
        raise DimensionError("t must be scalar or have one entry per row")
    beta = schedule.beta(tt)
    var = beta**2 * latent.cov_scales[None, :] + schedule.sigma(tt)  # (n or 1, K)
    if np.any(var <= 0):
        raise DomainError("singular noised density: point-mass component at t = 0")
    diff = h[:, None, :] - beta[:, :, None] * latent.means[None, :, :]  # (n, K, d0)
    d0 = latent.dim
    logp = (
        np.log(latent.weights)[None, :]
        - 0.5 * d0 * np.log(2 * np.pi * var)
        - 0.5 * np.sum(diff**2, axis=2) / var
    )
    return h, diff, var, logp


def latent_log_density(latent, h_bar, t, schedule):
    """``log p_t^h(h_bar)`` for one vector or a batch of rows."""
    _, _, _, logp = _component_terms(latent, h_bar, t, schedule)
    out = logsumexp(logp, axis=1)
    return out[0] if np.ndim(h_bar) == 1 else out


def latent_score(latent, h_bar, t, schedule):
    """Gradient of the log density of the noised latent law.

    The noised law is the mixture of ``N(beta m_k, (beta^2 s_k + sigma) I)``;
    responsibilities are computed in the log domain.

    Parameters
    ----------
    latent : LatentMixtureSpec
    h_bar : ndarray of shape (d0,) or (n, d0)
    t : float in (0, T], or ndarray (n,) with one time per row
    schedule : DiffusionSchedule
    """
    _check_t(t, schedule)
    h, diff, var, logp = _component_terms(latent, h_bar, t, schedule)
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    score = -np.einsum("nk,nkd->nd", resp / var, diff)
    return score[0] if np.ndim(h_bar) == 1 else score


def decompose_score(spec, latent, x_bar, t, schedule):
    """Split the ambient score into its on-subspace and orthogonal parts.

    ``total = B s_+(B^T x) - (I - B B^T) x / sigma(t)``.
    """
    _check_t(t, schedule)
    x = np.asarray(x_bar, dtype=np.float64)
    if x.shape[-1] != spec.ambient_dim:
        raise DimensionError(f"x_bar has dim {x.shape[-1]}, expected {spec.ambient_dim}")
    B = spec.basis
    h = x @ B
    on = latent_score(latent, h, t, schedule) @ B.T
    sig = schedule.sigma(t)
    sig = sig[:, None] if np.ndim(sig) == 1 else sig
    orth = -(x - h @ B.T) / sig
    return ScoreDecomposition(on, orth, on + orth)


def q_function(latent, h_bar, t, schedule):
    """``q(h, t) = sigma(t) * latent_score(h, t) + h``, the target of the network's f."""
    sig = schedule.sigma(t)
    sig = sig[:, None] if np.ndim(sig) == 1 else sig
    return sig * latent_score(latent, h_bar, t, schedule) + np.asarray(h_bar, dtype=np.float64)


class AnalyticScore:
    """Callable ``score(x, t)`` wrapping :func:`decompose_score`, usable by the sampler."""

    def __init__(self, spec, latent, schedule):
        self.spec = spec
        self.latent = latent
        self.schedule = schedule

    def __call__(self, x, t):
        return decompose_score(self.spec, self.latent, x, t, self.schedule).total
