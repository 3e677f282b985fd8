"""Denoising score matching, reverse-SDE sampling and recovery metrics."""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ks_2samp

from ._validation import DimensionError, DomainError, NonFiniteError, make_rng
from .dit_score_net import score_backward, score_forward
from .fast_attention import AttentionInstance, InfeasibilityWarning, grad_fast
from .subspace_data import DiffusionSchedule

__all__ = [
    "TrainConfig",
    "TrainResult",
    "SampleRunReport",
    "SubspaceError",
    "dsm_target",
    "dsm_loss",
    "loss_and_grads",
    "train",
    "backward_sample",
    "subspace_error",
    "dist_proxy",
]


@dataclass
class TrainConfig:
    """Minibatch gradient-descent settings.

    ``n_samples`` caps how many dataset rows are used (all if None).
    """

    n_samples: int = None
    batch_size: int = 64
    steps: int = 1000
    learning_rate: float = 1e-3
    seed: int = 0
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    use_fast_grad: bool = False
    eps_target: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DomainError("learning_rate must be >= 0")
        if self.steps < 0:
            raise DomainError("steps must be >= 0")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.eps_target <= 0:
            raise DomainError("eps_target must be > 0")

    def to_dict(self):
        out = {k: getattr(self, k) for k in
               ("n_samples", "batch_size", "steps", "learning_rate", "seed", "use_fast_grad", "eps_target")}
        out["schedule"] = self.schedule.to_dict()
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sched = DiffusionSchedule(**d.pop("schedule", {}))
        return cls(schedule=sched, **d)


def dsm_target(x0, t, xt, schedule):
    """Transition-kernel score ``(beta(t) x0 - x_t) / sigma(t)`` row-wise."""
    t = np.asarray(t, dtype=np.float64)[:, None]
    return (schedule.beta(t) * x0 - xt) / schedule.sigma(t)


def _check_batch(x0, t, xt, schedule):
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if x0.shape != xt.shape or t.shape != (x0.shape[0],):
        raise DimensionError("x0, t, x_t batch shapes disagree")
    lo, hi = schedule.early_stop, schedule.horizon
    if np.any(t < lo) or np.any(t > hi):
        raise DomainError(f"every t must lie in [{lo}, {hi}]")
    return x0, t, xt


def dsm_loss(net, x0, t, xt, schedule, score=None):
    """Mean over the batch of ``|s(x_t, t) - (beta x0 - x_t)/sigma|^2``.

    Parameters
    ----------
    net : ScoreNetwork or None
        Ignored when ``score`` is given.
    score : callable, optional
        ``score(X, t) -> ndarray`` on the batch with per-row times ``t``.
    """
    x0, t, xt = _check_batch(x0, t, xt, schedule)
    if score is None:
        s = score_forward(net, xt, t, schedule)
    else:
        s = np.asarray(score(xt, t), dtype=np.float64).reshape(xt.shape)
    r = s - dsm_target(x0, t, xt, schedule)
    return float(np.mean(np.sum(r**2, axis=1)))


def _fast_attn_grad(eps_target):
    def attn_grad(Xm, blk, i, Y):
        inst = AttentionInstance(Xm, Xm, Xm, w_ov=blk.w_ov(i), y=Y, mode="self",
                                 w_k=blk.w_q[i], w_q=blk.w_k[i])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", InfeasibilityWarning)
            return grad_fast(inst, eps_target)

    return attn_grad


def loss_and_grads(net, x0, t, xt, schedule, use_fast_grad=False, eps_target=1e-8):
    """DSM loss of a batch and its gradient for every named parameter."""
    x0, t, xt = _check_batch(x0, t, xt, schedule)
    s, cache = score_forward(net, xt, t, schedule, return_cache=True)
    r = s - dsm_target(x0, t, xt, schedule)
    n = len(t)
    loss = float(np.mean(np.sum(r**2, axis=1)))
    attn = _fast_attn_grad(eps_target) if use_fast_grad else None
    grads = score_backward(net, cache, 2.0 * r / n, attn_grad=attn)
    return loss, grads


def _retract(w_b):
    q, r = np.linalg.qr(w_b)
    sgn = np.sign(np.diag(r))
    sgn[sgn == 0] = 1.0
    return q * sgn


@dataclass
class TrainResult:
    net: object
    history: list  # dicts with step, loss, subspace_error


def train(config, dataset, net, basis=None):
    """Plain minibatch gradient descent on the DSM loss.

    Each step draws ``batch_size`` row indices and times ``t ~ U[T0, T]``,
    noises the rows with the forward kernel, takes one gradient step on every
    parameter and re-orthonormalises the encoder by a sign-fixed QR
    retraction. With ``learning_rate == 0`` no update or retraction is
    applied so parameters stay bitwise identical.

    Parameters
    ----------
    config : TrainConfig
    dataset : ndarray (n, D)
    net : ScoreNetwork
        Not modified; a trained copy is returned.
    basis : ndarray (D, d0), optional
        True subspace basis; when given, history records ``subspace_error``.
    """
    X = np.asarray(dataset, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError("dataset must be a nonempty (n, D) array")
    if X.shape[1] != net.ambient_dim:
        raise DimensionError(f"dataset has D={X.shape[1]}, network expects {net.ambient_dim}")
    if config.n_samples is not None:
        X = X[: config.n_samples]
    sched = config.schedule
    net = net.copy()
    rng = make_rng(config.seed, 31)
    history = []
    for step in range(config.steps):
        idx = rng.integers(0, X.shape[0], size=config.batch_size)
        t = rng.uniform(sched.early_stop, sched.horizon, size=config.batch_size)
        z = rng.standard_normal((config.batch_size, X.shape[1]))
        x0 = X[idx]
        xt = sched.beta(t)[:, None] * x0 + np.sqrt(sched.sigma(t))[:, None] * z
        loss, grads = loss_and_grads(net, x0, t, xt, sched, config.use_fast_grad, config.eps_target)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteError(f"non-finite loss or gradient at step {step} (loss={loss})")
        if config.learning_rate > 0:
            params = net.named_params()
            for k, g in grads.items():
                params[k] -= config.learning_rate * g
            net.w_b = _retract(net.w_b)
        rec = {"step": step, "loss": loss}
        if basis is not None:
            rec["subspace_error"] = float(subspace_error(net.w_b, basis))
        history.append(rec)
    return TrainResult(net, history)


class SubspaceError(float):
    """Float value of ``|W W^T - B B^T|_F^2`` with an ``orthonormal`` flag."""

    orthonormal = True


def subspace_error(w_b, basis, tol=1e-8):
    """Squared Frobenius distance between the two column-space projectors.

    Inputs that are not column-orthonormal (to ``tol``) still produce a value
    but carry ``orthonormal = False`` and emit a warning.
    """
    W = np.asarray(w_b, dtype=np.float64)
    B = np.asarray(basis, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != B.shape[0]:
        raise DimensionError("W_B and B must share the ambient dimension")
    val = SubspaceError(np.sum((W @ W.T - B @ B.T) ** 2))
    ok = all(np.max(np.abs(A.T @ A - np.eye(A.shape[1]))) <= tol for A in (W, B))
    if not ok:
        warnings.warn("subspace_error input is not column-orthonormal", RuntimeWarning, stacklevel=2)
    val.orthonormal = ok
    return val


@dataclass
class SampleRunReport:
    """Reverse-SDE samples at ``T0`` and summary metrics.

    ``subspace_error`` is the mean squared distance of samples to the
    subspace, ``on_cov_spectral`` the spectral distance of the projected
    covariance to ``B B^T`` and ``orth_cov_spectral`` the spectral norm of the
    covariance of the orthogonal part. Metrics are NaN without a basis.
    """

    samples: np.ndarray
    subspace_error: float
    orth_cov_spectral: float
    steps_taken: int
    on_cov_spectral: float = float("nan")
    mean: np.ndarray = None


def backward_sample(score, schedule, n, seed=0, dim=None, basis=None, noise_step=None):
    """Euler-Maruyama on the reverse SDE with drift frozen over each step.

    ``y <- y + mu * (y / 2 + score(y, T - k mu)) + sqrt(mu) z`` for
    ``k = 0 .. N - 1`` with ``N = (T - T0) / mu``, starting from ``N(0, I)``.

    Parameters
    ----------
    score : callable
        ``score(Y, t)`` on a batch ``Y`` of shape (n, D).
    dim : int, optional
        Ambient dimension; taken from ``basis`` when omitted.
    noise_step : float, optional
        Resolution of the underlying Brownian path (default ``mu``). Each
        step sums the ``mu / noise_step`` finer increments, so runs with
        different ``mu`` but equal ``noise_step`` share one path.
    """
    T, T0, mu = schedule.horizon, schedule.early_stop, schedule.step
    nsteps = (T - T0) / mu
    N = int(round(nsteps))
    if abs(nsteps - N) > 1e-9:
        raise DomainError(f"mu={mu} does not divide T - T0 = {T - T0}")
    if dim is None:
        if basis is None:
            raise DimensionError("need dim or basis")
        dim = np.asarray(basis).shape[0]
    h = mu if noise_step is None else noise_step
    sub = mu / h
    n_sub = int(round(sub))
    if n_sub < 1 or abs(sub - n_sub) > 1e-9:
        raise DomainError("noise_step must divide mu")
    y = make_rng(seed, 40).standard_normal((n, dim))
    noise = make_rng(seed, 41)
    sq = np.sqrt(h)
    for k in range(N):
        s = np.asarray(score(y, T - k * mu), dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise NonFiniteError(f"score returned non-finite values at step {k}")
        dw = np.zeros((n, dim))
        for _ in range(n_sub):
            dw += sq * noise.standard_normal((n, dim))
        y = y + mu * (0.5 * y + s) + dw
    sub_err = orth = on = float("nan")
    if basis is not None:
        B = np.asarray(basis, dtype=np.float64)
        P = B @ B.T
        Q = np.eye(dim) - P
        C = np.cov(y, rowvar=False).reshape(dim, dim)
        sub_err = float(np.mean(np.sum((y @ Q) ** 2, axis=1)))
        orth = float(np.linalg.norm(Q @ C @ Q, 2))
        on = float(np.linalg.norm(P @ C @ P - P, 2))
    return SampleRunReport(y, sub_err, orth, N, on, y.mean(axis=0))


def dist_proxy(samples_a, samples_b, n_slices=64, seed=0):
    """Mean two-sample KS statistic over random one-dimensional projections.

    A cheap distance proxy between two sample clouds; it is not a total
    variation estimate.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DomainError("sample sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise DimensionError("sample sets differ in dimension")
    U = make_rng(seed, 51).standard_normal((n_slices, a.shape[1]))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    pa, pb = a @ U.T, b @ U.T
    return float(np.mean([ks_2samp(pa[:, j], pb[:, j]).statistic for j in range(n_slices)]))
