"""Exact and low-rank single-layer attention: inference and weight gradient.

Conventions
-----------
For key/query/value inputs ``A1, A2, A3`` (each ``d x L``), a weight ``W``
(``d x d``) and an output map ``W_OV``::

    f   = D^{-1} exp(A1^T W A2),  D = diag(exp(A1^T W A2) 1)   # rows sum to 1
    out = W_OV A3 f^T                                          # d x L
    loss = 0.5 * || out - Y ||_F^2

The low-rank paths replace ``exp`` by its degree-``g`` Taylor polynomial,
which factors through weighted monomial features ``phi(x)_a = x^a / sqrt(a!)``
so that ``phi(q) . phi(k) = sum_{n<=g} (q.k)^n / n!``. Features are streamed in
column chunks, so no ``L x L`` array and no full ``L x k1`` factor is ever held
by :func:`inference_fast` or :func:`grad_fast`.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import (
    DegeneracyError,
    DimensionError,
    DomainError,
    OverflowGuardError,
    as_matrix,
    make_rng,
)
from .tensor_linalg import LowRankFactors, kron, row_kron, vectorize

__all__ = [
    "AttentionInstance",
    "GradientWorkspace",
    "OpCounter",
    "InfeasibilityWarning",
    "MonomialFeatureMap",
    "attention_exact",
    "attention_loss",
    "grad_exact",
    "grad_exact_summation",
    "rank_for_accuracy",
    "exp_lowrank",
    "inference_fast",
    "grad_fast",
    "random_instance",
]

EXP_GUARD = 700.0
# columns of a single streamed feature chunk, times rows, stays under this many floats
_CHUNK_FLOATS = 1 << 21
# one prefix monomial may expand to at most this many tail monomials
_TAIL_CAP = 4096


class InfeasibilityWarning(UserWarning):
    """The polynomial rank exceeds ``L^2``: the approximation is not profitable."""


@dataclass
class OpCounter:
    """Per-call instrumentation: multiply-add count of dense kernels."""

    flops: int = 0
    peak_chunk_floats: int = 0

    def matmul(self, m, k, n):
        self.flops += 2 * m * k * n

    def elementwise(self, n):
        self.flops += n

    def chunk(self, n_floats):
        self.peak_chunk_floats = max(self.peak_chunk_floats, n_floats)


@dataclass
class AttentionInstance:
    """One single-layer attention problem.

    Attributes
    ----------
    a1, a2, a3 : ndarray (d, L)
        Key-side, query-side and value inputs. In ``mode="self"`` ``a1`` and
        ``a2`` must be equal.
    w : ndarray (d, d)
        Bilinear score weight. If omitted it is ``w_k.T @ w_q``.
    w_ov : ndarray (d, d)
    y : ndarray (d, L)
        Regression target of the loss.
    w_k, w_q : ndarray (m, d), optional
        Factors of ``w``; when present the low-rank paths use the feature
        inputs ``(w_k a1)^T`` and ``(w_q a2)^T``.
    """

    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    w: np.ndarray = None
    w_ov: np.ndarray = None
    y: np.ndarray = None
    mode: str = "cross"
    w_k: np.ndarray = None
    w_q: np.ndarray = None

    def __post_init__(self):
        self.a1 = as_matrix(self.a1, "a1")
        self.a2 = as_matrix(self.a2, "a2")
        self.a3 = as_matrix(self.a3, "a3")
        d, L = self.a1.shape
        if self.a2.shape != (d, L) or self.a3.shape[1] != L:
            raise DimensionError("a1, a2 must share shape and a3 must have L columns")
        if self.w is None:
            if self.w_k is None or self.w_q is None:
                raise DimensionError("need w or both w_k and w_q")
            self.w_k = as_matrix(self.w_k, "w_k")
            self.w_q = as_matrix(self.w_q, "w_q")
            self.w = self.w_k.T @ self.w_q
        self.w = as_matrix(self.w, "w")
        if self.w.shape != (d, d):
            raise DimensionError(f"w must be {d}x{d}")
        if self.w_ov is None:
            self.w_ov = np.eye(self.a3.shape[0])
        self.w_ov = as_matrix(self.w_ov, "w_ov")
        if self.w_ov.shape[1] != self.a3.shape[0]:
            raise DimensionError("w_ov columns must match a3 rows")
        if self.y is None:
            self.y = np.zeros((self.w_ov.shape[0], L))
        self.y = as_matrix(self.y, "y")
        if self.y.shape != (self.w_ov.shape[0], L):
            raise DimensionError("y must match the output shape")
        if self.mode not in ("self", "cross"):
            raise DomainError(f"mode must be 'self' or 'cross', got {self.mode!r}")
        if self.mode == "self" and not np.array_equal(self.a1, self.a2):
            raise DomainError("self-attention requires a1 == a2")
        if (self.w_k is None) != (self.w_q is None):
            raise DimensionError("w_k and w_q must be given together")

    @property
    def L(self):
        return self.a1.shape[1]

    @property
    def d(self):
        return self.a1.shape[0]

    def h(self):
        """Value rows ``h = A3^T W_OV^T`` of shape (L, d_out)."""
        return self.a3.T @ self.w_ov.T

    def feature_inputs(self):
        """Row inputs ``(Qt, Kt)`` whose inner products are the attention scores."""
        if self.w_k is not None:
            return (self.w_k @ self.a1).T, (self.w_q @ self.a2).T
        return self.a1.T @ self.w, self.a2.T.copy()

    def with_w(self, w):
        return AttentionInstance(self.a1, self.a2, self.a3, w=w, w_ov=self.w_ov, y=self.y, mode=self.mode)


@dataclass
class GradientWorkspace:
    """Intermediate quantities of the exact gradient.

    ``f`` row-softmax matrix, ``h`` value rows, ``c = f h - Y^T``,
    ``q = c h^T``, ``p1 = f * q``, ``r`` the row sums of ``p1``,
    ``p2 = diag(r) f`` and ``p = p1 - p2``.
    """

    f: np.ndarray
    h: np.ndarray
    c: np.ndarray
    q: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    p: np.ndarray
    r: np.ndarray


def _scores(inst):
    s = inst.a1.T @ inst.w @ inst.a2
    bound = float(np.max(np.abs(s))) if s.size else 0.0
    if bound > EXP_GUARD:
        raise OverflowGuardError(f"attention score magnitude {bound:.4g} exceeds exp guard {EXP_GUARD}")
    return s


def _softmax_rows(s):
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def attention_exact(inst, row_block=None):
    """Exact attention output ``W_OV A3 f^T`` (d_out x L).

    Parameters
    ----------
    inst : AttentionInstance
    row_block : int, optional
        Evaluate ``f`` in blocks of this many rows to cap memory at
        ``row_block * L``. The arithmetic stays quadratic in ``L``.
    """
    L = inst.L
    h = inst.h()
    if row_block is None or row_block >= L:
        f = _softmax_rows(_scores(inst))
        return (f @ h).T
    qt = inst.a1.T @ inst.w
    out = np.empty((L, h.shape[1]))
    for start in range(0, L, row_block):
        s = qt[start:start + row_block] @ inst.a2
        bound = float(np.max(np.abs(s)))
        if bound > EXP_GUARD:
            raise OverflowGuardError(f"attention score magnitude {bound:.4g} exceeds exp guard {EXP_GUARD}")
        e = np.exp(s)
        out[start:start + row_block] = (e @ h) / e.sum(axis=1, keepdims=True)
    return out.T


def attention_loss(inst):
    """``0.5 * ||W_OV A3 f^T - Y||_F^2``."""
    r = attention_exact(inst) - inst.y
    return 0.5 * float(np.sum(r * r))


def grad_exact(inst, return_workspace=False):
    """Gradient of :func:`attention_loss` with respect to ``W`` (d x d).

    Built from the workspace ``f, h, c, q, p1, p2`` and assembled as
    ``A1 (p1 - p2) A2^T``.
    """
    f = _softmax_rows(_scores(inst))
    h = inst.h()
    c = f @ h - inst.y.T
    q = c @ h.T
    p1 = f * q
    r = p1.sum(axis=1)
    p2 = r[:, None] * f
    p = p1 - p2
    g = inst.a1 @ p @ inst.a2.T
    if return_workspace:
        return g, GradientWorkspace(f, h, c, q, p1, p2, p, r)
    return g


def grad_exact_summation(inst):
    """Same gradient as :func:`grad_exact`, summed term by term.

    Uses the Kronecker rows ``A_{j0} = (A1^T kron A2^T)[j0 L : (j0+1) L]`` and
    the per-row softmax Jacobian ``diag(f_j0) - f_j0 f_j0^T``. Cubic in ``L``
    and ``d``; a cross-check for small instances only.
    """
    f = _softmax_rows(_scores(inst))
    h = inst.h()
    c = f @ h - inst.y.T
    L, d = inst.L, inst.d
    big = kron(inst.a1.T, inst.a2.T)  # (L*L, d*d)
    g = np.zeros(d * d)
    for j0 in range(L):
        a_j0 = big[j0 * L:(j0 + 1) * L]
        fj = f[j0]
        jac = np.diag(fj) - np.outer(fj, fj)
        for i0 in range(h.shape[1]):
            g += c[j0, i0] * (a_j0.T @ (jac @ h[:, i0]))
    return g.reshape(d, d)


def _log_tail(bbar, g):
    # log of e^B * B^(g+1) / (g+1)!
    return bbar + (g + 1) * math.log(bbar) - math.lgamma(g + 2)


def rank_for_accuracy(gamma_bound, d, eps_target, L=None, max_degree=100_000):
    """Taylor degree and feature rank for a max-norm target.

    ``g`` is the smallest integer with ``e^B B^(g+1) / (g+1)! <= eps/4`` where
    ``B = d * gamma_bound^2`` bounds ``|q . k|``; ``k1 = C(d+g, g)``.

    Returns
    -------
    g : int
    k1 : int
        Exact (possibly very large) integer.
    """
    if not eps_target > 0:
        raise DomainError("eps_target must be positive")
    if gamma_bound < 0:
        raise DomainError("gamma_bound must be non-negative")
    bbar = d * float(gamma_bound) ** 2
    if bbar == 0.0:
        g = 0
    else:
        target = math.log(eps_target / 4.0)
        g = 0
        while _log_tail(bbar, g) > target:
            g += 1
            if g > max_degree:
                raise DomainError(f"no degree up to {max_degree} meets eps={eps_target} at B={bbar:.4g}")
    k1 = math.comb(d + g, g)
    if L is not None and k1 > L * L:
        warnings.warn(
            f"rank k1={k1} exceeds L^2={L * L}: the low-rank path is not profitable",
            InfeasibilityWarning,
            stacklevel=2,
        )
    return g, k1


def taylor_tail_bound(bbar, g):
    """``e^B B^(g+1) / (g+1)!``: uniform error of the degree-g Taylor polynomial of exp on ``[-B, B]``."""
    if bbar == 0.0:
        return 0.0
    return math.exp(_log_tail(bbar, g))


class MonomialFeatureMap:
    """Weighted monomials ``x^a / sqrt(a!)`` of total degree at most ``degree``.

    The inner product of two feature vectors is the degree-``g`` Taylor
    polynomial of ``exp(x . y)``. Columns are generated dimension by
    dimension; :meth:`iter_chunks` streams them in bounded blocks and the
    column order is a deterministic function of ``(n_vars, degree)``, so
    chunks of two inputs line up.
    """

    def __init__(self, n_vars, degree):
        self.n_vars = int(n_vars)
        self.degree = int(degree)
        self.n_features = math.comb(self.n_vars + self.degree, self.degree)
        r = self.n_vars
        while r > 1 and math.comb(r + self.degree, r) > _TAIL_CAP:
            r -= 1
        self.n_tail = r

    def _power_table(self, x):
        n, d = x.shape
        g = self.degree
        P = np.empty((d, n, g + 1))
        P[:, :, 0] = 1.0
        xt = x.T
        for a in range(1, g + 1):
            P[:, :, a] = P[:, :, a - 1] * xt / math.sqrt(a)
        return P

    def _expand(self, F, sums, Pi, counter):
        counts = self.degree - sums + 1
        idx = np.repeat(np.arange(sums.size), counts)
        starts = np.cumsum(counts) - counts
        a = np.arange(idx.size) - starts[idx]
        out = F[:, idx] * Pi[:, a]
        if counter is not None:
            counter.elementwise(out.size)
        return out, sums[idx] + a

    def iter_chunks(self, x, max_cols=None, counter=None):
        """Yield consecutive column blocks of the feature matrix of ``x`` (n x n_vars)."""
        x = np.asarray(x, dtype=np.float64)
        n, d = x.shape
        if d != self.n_vars:
            raise DimensionError(f"expected {self.n_vars} columns, got {d}")
        if max_cols is None:
            max_cols = max(_TAIL_CAP, _CHUNK_FLOATS // max(n, 1))
        if d == 0 or self.degree == 0:
            yield np.ones((n, 1))
            return
        P = self._power_table(x)
        F = np.ones((n, 1))
        s = np.zeros(1, dtype=np.int64)
        n_pre = d - self.n_tail
        for i in range(n_pre):
            F, s = self._expand(F, s, P[i], counter)
        r = self.n_tail
        comp_table = np.array([math.comb(r + m, r) for m in range(self.degree + 1)], dtype=np.int64)
        comp = comp_table[self.degree - s]
        ends = np.cumsum(comp)
        start = 0
        done = 0
        while start < s.size:
            end = int(np.searchsorted(ends, done + max_cols, side="right"))
            end = max(end, start + 1)
            Fc, sc = F[:, start:end], s[start:end]
            for i in range(n_pre, d):
                Fc, sc = self._expand(Fc, sc, P[i], counter)
            if counter is not None:
                counter.chunk(Fc.size)
            yield Fc
            done = int(ends[end - 1])
            start = end

    def transform(self, x):
        """Full feature matrix (n x n_features)."""
        return np.hstack(list(self.iter_chunks(x, max_cols=self.n_features)))


def _bound_inputs(qt, kt, gamma_bound):
    actual = max(float(np.max(np.abs(qt), initial=0.0)), float(np.max(np.abs(kt), initial=0.0)))
    if gamma_bound is None:
        return actual
    if actual > gamma_bound * (1 + 1e-12):
        raise DomainError(f"input max-norm {actual:.6g} exceeds gamma_bound {gamma_bound:.6g}")
    return float(gamma_bound)


def _certified_f_bound(bbar, g, L, alpha_min):
    return taylor_tail_bound(bbar, g) * (1 + L) / alpha_min


def exp_lowrank(qt, kt, eps_target, gamma_bound=None, max_extra_degree=8):
    """Materialised low-rank factors ``(U1, V1)`` of the softmax matrix ``f``.

    ``f ~ U1 V1^T`` with ``U1 = D~^{-1} Phi(Qt)``, ``V1 = Phi(Kt)`` and
    ``D~ = diag(Phi(Qt) Phi(Kt)^T 1)``.

    Parameters
    ----------
    qt, kt : ndarray (L, k)
        Row inputs with ``f = rowsoftmax(qt @ kt.T)``.
    eps_target : float
    gamma_bound : float, optional
        Bound on ``max(|qt|, |kt|)``; defaults to the measured value.

    Returns
    -------
    LowRankFactors
        ``err_bound`` is ``tail * (1 + L) / min_j D~_jj``, a certified bound
        on ``max |U1 V1^T - f|``.

    Raises
    ------
    DegeneracyError
        If some approximate row sum stays non-positive after raising the
        degree ``max_extra_degree`` times.
    """
    qt = as_matrix(qt, "qt")
    kt = as_matrix(kt, "kt")
    if qt.shape != kt.shape:
        raise DimensionError("qt and kt must have the same shape")
    L, k = qt.shape
    gamma = _bound_inputs(qt, kt, gamma_bound)
    g0, _ = rank_for_accuracy(gamma, k, eps_target, L=L)
    bbar = k * gamma**2
    for g in range(g0, g0 + max_extra_degree + 1):
        fmap = MonomialFeatureMap(k, g)
        V1 = fmap.transform(kt)
        Phq = fmap.transform(qt)
        dt = Phq @ V1.sum(axis=0)
        if np.all(dt > 0):
            U1 = Phq / dt[:, None]
            bound = _certified_f_bound(bbar, g, L, float(dt.min()))
            return LowRankFactors(U1, V1, fmap.n_features, bound)
    raise DegeneracyError(f"non-positive approximate row sum up to degree {g0 + max_extra_degree}")


def _stream_pass1(fmap, qt, kt, H, counter):
    """``Phi(Qt) (Phi(Kt)^T H)`` accumulated chunk by chunk (L x H.cols)."""
    L = qt.shape[0]
    acc = np.zeros((L, H.shape[1]))
    stacked = np.vstack([qt, kt])
    for F in fmap.iter_chunks(stacked, counter=counter):
        fq, fk = F[:L], F[L:]
        m = F.shape[1]
        t = fk.T @ H
        acc += fq @ t
        if counter is not None:
            counter.matmul(m, L, H.shape[1])
            counter.matmul(L, m, H.shape[1])
    return acc


def _degree_loop(inst, eps_target, gamma_bound, max_extra_degree, counter, body):
    qt, kt = inst.feature_inputs()
    L, k = qt.shape
    gamma = _bound_inputs(qt, kt, gamma_bound)
    g0, _ = rank_for_accuracy(gamma, k, eps_target, L=L)
    for g in range(g0, g0 + max_extra_degree + 1):
        fmap = MonomialFeatureMap(k, g)
        res = body(fmap, qt, kt)
        if res is not None:
            return res
    raise DegeneracyError(f"non-positive approximate row sum up to degree {g0 + max_extra_degree}")


def inference_fast(inst, eps_target, gamma_bound=None, counter=None, max_extra_degree=8):
    """Low-rank attention output, evaluated right to left.

    Computes ``(D~^{-1} Phi(Qt) (Phi(Kt)^T h))^T`` with streamed feature
    chunks; memory is ``O(L (chunk + d))`` and work ``O(L k1 d)``.
    """
    h = inst.h()
    L, dv = h.shape
    H = np.hstack([h, np.ones((L, 1))])

    def body(fmap, qt, kt):
        acc = _stream_pass1(fmap, qt, kt, H, counter)
        dt = acc[:, dv]
        if not np.all(dt > 0):
            return None
        return (acc[:, :dv] / dt[:, None]).T

    return _degree_loop(inst, eps_target, gamma_bound, max_extra_degree, counter, body)


def grad_fast(inst, eps_target, gamma_bound=None, counter=None, factorization="compact", max_extra_degree=8):
    """Low-rank approximation of :func:`grad_exact`.

    Parameters
    ----------
    inst : AttentionInstance
    eps_target : float
    gamma_bound : float, optional
    counter : OpCounter, optional
    factorization : {"compact", "expanded"}
        ``"compact"`` (default) writes ``q~ = c~ h^T`` with
        ``c~ = U1 (V1^T h) - Y^T`` and streams features in two passes; its
        cost is ``O(L k1 d^2)`` and it never forms a factor wider than a
        chunk. ``"expanded"`` builds the wide factors
        ``U2 = [U1 | Y^T]``, ``V2 = [h (V1^T h)^T | -h]``,
        ``U3 = row_kron(U1, U2)``, ``V3 = row_kron(V1, V2)`` and
        ``U4 = diag(r~) U1``; it is quadratic in ``k1`` and only meant for
        small cross-checks.

    Returns
    -------
    ndarray (d, d)
    """
    if factorization == "expanded":
        return _grad_fast_expanded(inst, eps_target, gamma_bound)
    if factorization != "compact":
        raise DomainError(f"unknown factorization {factorization!r}")
    a1, a2 = inst.a1, inst.a2
    d = a1.shape[0]
    h = inst.h()
    L, dv = h.shape
    H = np.hstack([h, np.ones((L, 1))])

    def body(fmap, qt, kt):
        acc = _stream_pass1(fmap, qt, kt, H, counter)
        dt = acc[:, dv]
        if not np.all(dt > 0):
            return None
        fh = acc[:, :dv] / dt[:, None]
        c = fh - inst.y.T  # (L, dv)
        r = np.sum(c * fh, axis=1)
        # left rows: A1 diag(c_i / D~) for each output coordinate i, then A1 diag(r / D~)
        left = np.concatenate([a1[None] * (c.T / dt)[:, None, :], (a1 * (r / dt))[None]], axis=0)
        right = np.concatenate([a2[None] * h.T[:, None, :], a2[None]], axis=0)
        left = left.reshape((dv + 1) * d, L)
        right = right.reshape((dv + 1) * d, L)
        G = np.zeros((d, d))
        stacked = np.vstack([qt, kt])
        for F in fmap.iter_chunks(stacked, counter=counter):
            fq, fk = F[:L], F[L:]
            m = F.shape[1]
            lp = (left @ fq).reshape(dv + 1, d, m)
            rp = (right @ fk).reshape(dv + 1, d, m)
            G += np.einsum("iam,ibm->ab", lp[:dv], rp[:dv]) - lp[dv] @ rp[dv].T
            if counter is not None:
                counter.matmul((dv + 1) * d, L, m)
                counter.matmul((dv + 1) * d, L, m)
                counter.matmul(d, (dv + 1) * m, d)
        return G

    return _degree_loop(inst, eps_target, gamma_bound, max_extra_degree, counter, body)


def _grad_fast_expanded(inst, eps_target, gamma_bound):
    qt, kt = inst.feature_inputs()
    fac = exp_lowrank(qt, kt, eps_target, gamma_bound)
    U1, V1 = fac.u, fac.v
    h = inst.h()
    U2 = np.hstack([U1, inst.y.T])
    V2 = np.hstack([h @ (V1.T @ h).T, -h])
    U3 = row_kron(U1, U2)
    V3 = row_kron(V1, V2)
    r = np.einsum("jk,kl,jl->j", U1, V1.T @ V2, U2)
    U4 = r[:, None] * U1
    V4 = V1
    a1, a2 = inst.a1, inst.a2
    return (a1 @ U3) @ (V3.T @ a2.T) - (a1 @ U4) @ (V4.T @ a2.T)


def random_instance(L, d, gamma, seed=0, mode="cross", target_scale=None):
    """Random instance with ``max(|W_K A1|, |W_Q A2|, |W_OV A3|) = gamma``.

    The score weight is stored both as ``w = W_K^T W_Q`` and as its factors.
    Targets are Gaussian with standard deviation ``target_scale`` (defaults
    to ``gamma``).
    """
    rng = make_rng(seed, 11)
    a1 = rng.standard_normal((d, L))
    a2 = a1.copy() if mode == "self" else rng.standard_normal((d, L))
    a3 = rng.standard_normal((d, L))

    def scaled(a):
        w = rng.standard_normal((d, d))
        m = np.max(np.abs(w @ a))
        return w * (gamma / m) if m > 0 else w

    w_k, w_q, w_ov = scaled(a1), scaled(a2), scaled(a3)
    ts = gamma if target_scale is None else target_scale
    y = ts * rng.standard_normal((d, L))
    return AttentionInstance(a1, a2, a3, w_ov=w_ov, y=y, mode=mode, w_k=w_k, w_q=w_q)


def flatten_grad(g):
    """Row-major vector of a gradient matrix, matching ``vectorize``."""
    return vectorize(g)
