"""Latent DiT score network: patch reshape, softmax transformer blocks, encoder.

The score is ``s(x, t) = W_B f(W_B^T x, t) / sigma(t) - x / sigma(t)`` with
``f = unreshape o f_T o (reshape + E)``. Each block applies a time
modulation ``X -> (1 + s(t)) * X + b(t)`` (per token row, ``(s, b)`` linear
in the features ``(t, exp(-t))``), a multi-head attention layer with skip
connection and a ReLU feed-forward layer with skip connection.

Attention weights are normalised over keys: for query column ``j`` the
weights over key columns sum to one. In the single-layer notation of
:mod:`latent_dit.fast_attention` this is ``f = rowsoftmax(Xm^T W Xm)`` with
``W = W_Q^T W_K`` and output ``W_OV Xm f^T``.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ._validation import DimensionError, DomainError, NonFiniteError, make_rng
from .tensor_linalg import norm

__all__ = [
    "ReshapeSpec",
    "TransformerBlock",
    "ScoreNetwork",
    "NormBudget",
    "reshape",
    "unreshape",
    "time_features",
    "block_forward",
    "transformer_forward",
    "score_forward",
    "norm_budget",
]


@dataclass(frozen=True)
class ReshapeSpec:
    """Square-image patching: ``d = p^2`` features, ``L = (i/p)^2`` tokens."""

    image_side: int
    patch_side: int

    def __post_init__(self):
        i, p = self.image_side, self.patch_side
        if p < 2 or i < p or i % p:
            raise DomainError(f"need p >= 2 dividing i, got i={i}, p={p}")

    @property
    def d(self):
        return self.patch_side**2

    @property
    def L(self):
        return (self.image_side // self.patch_side) ** 2

    @property
    def d0(self):
        return self.image_side**2


def reshape(x, spec):
    """Vector (d0,) or batch (B, d0) to tokens (d, L) or (B, d, L).

    Column ``k`` holds patch ``(k // n, k % n)`` with ``n = i / p``, patches
    scanned row-major over the ``i x i`` row-major image and flattened
    row-major within the patch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    if xb.shape[-1] != spec.d0:
        raise DimensionError(f"expected length {spec.d0}, got {xb.shape[-1]}")
    n, p = spec.image_side // spec.patch_side, spec.patch_side
    t = xb.reshape(-1, n, p, n, p).transpose(0, 1, 3, 2, 4).reshape(-1, spec.L, spec.d)
    out = np.ascontiguousarray(t.transpose(0, 2, 1))
    return out[0] if single else out


def unreshape(X, spec):
    """Exact inverse of :func:`reshape`."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    Xb = X[None] if single else X
    if Xb.shape[-2:] != (spec.d, spec.L):
        raise DimensionError(f"expected shape ({spec.d}, {spec.L}), got {Xb.shape[-2:]}")
    n, p = spec.image_side // spec.patch_side, spec.patch_side
    t = Xb.transpose(0, 2, 1).reshape(-1, n, n, p, p).transpose(0, 1, 3, 2, 4).reshape(-1, spec.d0)
    return t[0] if single else t


@dataclass
class TransformerBlock:
    """Multi-head attention plus feed-forward block.

    Attributes
    ----------
    w_k, w_q, w_v : ndarray (r, m, d)
    w_o : ndarray (r, d, m)
    w1 : ndarray (l, d)
    w2 : ndarray (d, l)
    b1 : ndarray (l,)
    b2 : ndarray (d,)
    """

    w_k: np.ndarray
    w_q: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    PARAMS = ("w_k", "w_q", "w_v", "w_o", "w1", "w2", "b1", "b2")

    def __post_init__(self):
        for name in self.PARAMS:
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"block parameter {name} is not finite")
            setattr(self, name, a)
        r, m, d = self.w_k.shape
        l = self.w1.shape[0]
        shapes = {
            "w_q": (r, m, d), "w_v": (r, m, d), "w_o": (r, d, m),
            "w1": (l, d), "w2": (d, l), "b1": (l,), "b2": (d,),
        }
        for name, shp in shapes.items():
            if getattr(self, name).shape != shp:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shp}")

    @property
    def heads(self):
        return self.w_k.shape[0]

    @property
    def d(self):
        return self.w_k.shape[2]

    def w_ov(self, i):
        return self.w_o[i] @ self.w_v[i]

    def w_kq(self, i):
        """``W_K^T W_Q`` of head ``i``."""
        return self.w_k[i].T @ self.w_q[i]

    @classmethod
    def zeros(cls, d, heads=1, head_dim=None, hidden=None):
        m = d if head_dim is None else head_dim
        l = 4 * d if hidden is None else hidden
        z = np.zeros
        return cls(z((heads, m, d)), z((heads, m, d)), z((heads, m, d)), z((heads, d, m)),
                   z((l, d)), z((d, l)), z(l), z(d))

    @classmethod
    def random(cls, d, heads=1, head_dim=None, hidden=None, scale=0.5, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        m = d if head_dim is None else head_dim
        l = 4 * d if hidden is None else hidden

        def g(*shape, fan):
            return scale * rng.standard_normal(shape) / np.sqrt(fan)

        return cls(g(heads, m, d, fan=d), g(heads, m, d, fan=d), g(heads, m, d, fan=d), g(heads, d, m, fan=m),
                   g(l, d, fan=d), g(d, l, fan=l), np.zeros(l), np.zeros(d))

    def copy(self):
        return TransformerBlock(*(getattr(self, n).copy() for n in self.PARAMS))


def time_features(t):
    """``(t, exp(-t))`` for a scalar or a vector of times; shape (..., 2)."""
    t = np.asarray(t, dtype=np.float64)
    return np.stack([t, np.exp(-t)], axis=-1)


@dataclass
class ScoreNetwork:
    """Encoder, patch layout, positional encoding, blocks and time modulation.

    Attributes
    ----------
    w_b : ndarray (D, d0)
        Encoder with orthonormal columns.
    reshape_spec : ReshapeSpec
    pos_enc : ndarray (d, L)
    blocks : list of TransformerBlock
    time_scale, time_shift : ndarray (d, 2)
        ``s(t) = time_scale @ (t, e^-t)``, ``b(t) = time_shift @ (t, e^-t)``.
    """

    w_b: np.ndarray
    reshape_spec: ReshapeSpec
    pos_enc: np.ndarray
    blocks: list
    time_scale: np.ndarray = None
    time_shift: np.ndarray = None

    def __post_init__(self):
        self.w_b = np.asarray(self.w_b, dtype=np.float64)
        rs = self.reshape_spec
        if self.w_b.ndim != 2 or self.w_b.shape[1] != rs.d0:
            raise DimensionError(f"encoder must be D x {rs.d0}")
        if self.w_b.shape[0] < rs.d0:
            raise DimensionError("encoder needs D >= d0")
        self.check_encoder()
        self.pos_enc = np.asarray(self.pos_enc, dtype=np.float64)
        if self.pos_enc.shape != (rs.d, rs.L):
            raise DimensionError(f"pos_enc must be {rs.d} x {rs.L}")
        if self.time_scale is None:
            self.time_scale = np.zeros((rs.d, 2))
        if self.time_shift is None:
            self.time_shift = np.zeros((rs.d, 2))
        self.time_scale = np.asarray(self.time_scale, dtype=np.float64)
        self.time_shift = np.asarray(self.time_shift, dtype=np.float64)
        if self.time_scale.shape != (rs.d, 2) or self.time_shift.shape != (rs.d, 2):
            raise DimensionError("time modulation maps must be d x 2")
        for b in self.blocks:
            if b.d != rs.d:
                raise DimensionError("block token dim differs from reshape d")

    def check_encoder(self, tol=1e-8):
        g = self.w_b.T @ self.w_b
        if np.max(np.abs(g - np.eye(g.shape[0]))) > tol:
            raise DomainError("encoder columns are not orthonormal")

    @property
    def ambient_dim(self):
        return self.w_b.shape[0]

    @classmethod
    def init(cls, D, reshape_spec, n_blocks=1, heads=1, head_dim=None, hidden=None,
             weight_scale=0.5, pos_enc_scale=0.1, seed=0):
        """Seeded random network with zero time modulation."""
        rng = make_rng(seed, 21)
        d0 = reshape_spec.d0
        q, r = np.linalg.qr(rng.standard_normal((D, d0)))
        w_b = q * np.sign(np.diag(r))
        E = pos_enc_scale * np.tile(np.arange(reshape_spec.L, dtype=np.float64), (reshape_spec.d, 1))
        blocks = [TransformerBlock.random(reshape_spec.d, heads, head_dim, hidden, weight_scale, rng)
                  for _ in range(n_blocks)]
        return cls(w_b, reshape_spec, E, blocks)

    def copy(self):
        return ScoreNetwork(self.w_b.copy(), self.reshape_spec, self.pos_enc.copy(),
                            [b.copy() for b in self.blocks], self.time_scale.copy(), self.time_shift.copy())

    # parameters are addressed by flat names so optimisers stay generic
    def named_params(self):
        out = {"w_b": self.w_b, "time_scale": self.time_scale, "time_shift": self.time_shift}
        for k, b in enumerate(self.blocks):
            for n in TransformerBlock.PARAMS:
                out[f"blocks.{k}.{n}"] = getattr(b, n)
        return out

    def to_dict(self):
        rs = self.reshape_spec
        return {
            "format": "latent_dit.ScoreNetwork",
            "version": 1,
            "D": self.ambient_dim,
            "image_side": rs.image_side,
            "patch_side": rs.patch_side,
            "d": rs.d,
            "L": rs.L,
            "n_blocks": len(self.blocks),
            "heads": [b.heads for b in self.blocks],
            "pos_enc": self.pos_enc.ravel().tolist(),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.named_params().items()},
        }

    @classmethod
    def from_dict(cls, d):
        rs = ReshapeSpec(d["image_side"], d["patch_side"])
        P = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
        blocks = [TransformerBlock(*(P[f"blocks.{k}.{n}"] for n in TransformerBlock.PARAMS))
                  for k in range(d["n_blocks"])]
        E = np.asarray(d["pos_enc"], dtype=np.float64).reshape(rs.d, rs.L)
        net = cls(P["w_b"], rs, E, blocks, P["time_scale"], P["time_shift"])
        if net.ambient_dim != d["D"]:
            raise DimensionError("checkpoint D disagrees with encoder shape")
        return net

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _softmax_last(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _block_forward_batch(X0, blk, s, b):
    """Forward through one block for a batch ``X0`` (B, d, L). Returns output and cache."""
    Xm = (1.0 + s)[:, :, None] * X0 + b[:, :, None]
    Xa = Xm.copy()
    heads = []
    for i in range(blk.heads):
        wd = blk.w_q[i].T @ blk.w_k[i]  # scores[j, l] = Xm_j^T wd Xm_l
        S = np.einsum("bdj,de,bel->bjl", Xm, wd, Xm, optimize=True)
        f = _softmax_last(S)
        wov = blk.w_ov(i)
        hv = np.einsum("de,bel->bdl", wov, Xm)
        out = np.einsum("bdl,bjl->bdj", hv, f)
        Xa = Xa + out
        heads.append((wd, f, wov, hv, out))
    Z = np.einsum("kd,bdl->bkl", blk.w1, Xa) + blk.b1[None, :, None]
    R = np.maximum(Z, 0.0)
    Xf = Xa + np.einsum("dk,bkl->bdl", blk.w2, R) + blk.b2[None, :, None]
    return Xf, (X0, Xm, Xa, Z, R, heads, s)


def block_forward(X, block, time_features=None):
    """One block on a single token matrix ``X`` (d x L).

    Parameters
    ----------
    X : ndarray (d, L)
    block : TransformerBlock
    time_features : (s, b) pair of ndarray (d,), optional
        Scale and shift of the time modulation; zeros if omitted.
    """
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[0]
    s, b = (np.zeros(d), np.zeros(d)) if time_features is None else time_features
    out, _ = _block_forward_batch(X[None], block, np.asarray(s)[None], np.asarray(b)[None])
    return out[0]


def _modulation(net, t):
    phi = time_features(t)  # (B, 2)
    return phi @ net.time_scale.T, phi @ net.time_shift.T, phi


def transformer_forward(net, X, t):
    """``f_T`` on token batch (B, d, L) at times ``t`` (B,). Returns output and caches."""
    s, b, _ = _modulation(net, t)
    caches = []
    for blk in net.blocks:
        X, cache = _block_forward_batch(X, blk, s, b)
        caches.append(cache)
    return X, caches


def _as_times(t, n):
    t = np.asarray(t, dtype=np.float64)
    return np.full(n, float(t)) if t.ndim == 0 else t


def score_forward(net, x_bar, t, schedule, f_override=None, return_cache=False):
    """Network score ``W_B f(W_B^T x, t) / sigma(t) - x / sigma(t)``.

    Parameters
    ----------
    net : ScoreNetwork
    x_bar : ndarray (D,) or (B, D)
    t : float or ndarray (B,)
        Must lie in ``(0, T]``.
    schedule : DiffusionSchedule
    f_override : callable, optional
        ``f_override(h, t) -> (B, d0)`` replacing ``unreshape o f_T o (reshape + E)``;
        used to inject an oracle.
    """
    x = np.asarray(x_bar, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    n = xb.shape[0]
    ts = _as_times(t, n)
    if np.any(ts <= 0) or np.any(ts > schedule.horizon):
        raise DomainError("t must lie in (0, T]")
    sig = schedule.sigma(ts)[:, None]
    h = xb @ net.w_b
    cache = None
    if f_override is not None:
        u = np.asarray(f_override(h, ts), dtype=np.float64)
    else:
        X0 = reshape(h, net.reshape_spec) + net.pos_enc[None]
        Xf, caches = transformer_forward(net, X0, ts)
        u = unreshape(Xf, net.reshape_spec)
        cache = (xb, h, ts, sig, u, caches)
    out = (u @ net.w_b.T - xb) / sig
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("score network produced non-finite output")
    out = out[0] if single else out
    return (out, cache) if return_cache else out


def _block_backward(blk, cache, dXf, attn_grad=None):
    X0, Xm, Xa, Z, R, heads, s = cache
    g = {}
    g["w2"] = np.einsum("bdl,bkl->dk", dXf, R)
    g["b2"] = dXf.sum(axis=(0, 2))
    dZ = np.einsum("dk,bdl->bkl", blk.w2, dXf) * (Z > 0)
    g["w1"] = np.einsum("bkl,bdl->kd", dZ, Xa)
    g["b1"] = dZ.sum(axis=(0, 2))
    dXa = dXf + np.einsum("kd,bkl->bdl", blk.w1, dZ)
    dXm = dXa.copy()
    r, m, d = blk.w_k.shape
    gk, gq, gv, go = np.zeros((r, m, d)), np.zeros((r, m, d)), np.zeros((r, m, d)), np.zeros((r, d, m))
    for i, (wd, f, wov, hv, out) in enumerate(heads):
        dhv = np.einsum("bdj,bjl->bdl", dXa, f)
        dwov = np.einsum("bdl,bel->de", dhv, Xm)
        dXm += np.einsum("de,bdl->bel", wov, dhv)
        dF = np.einsum("bdj,bdl->bjl", dXa, hv)
        p = f * (dF - np.sum(f * dF, axis=2, keepdims=True))
        if attn_grad is None:
            dwd = np.einsum("bdj,bjl,bel->de", Xm, p, Xm, optimize=True)
        else:
            dwd = sum(attn_grad(Xm[k], blk, i, out[k] - dXa[k]) for k in range(Xm.shape[0]))
        dXm += np.einsum("de,bel,bjl->bdj", wd, Xm, p, optimize=True)
        dXm += np.einsum("ed,bej,bjl->bdl", wd, Xm, p, optimize=True)
        # wd = w_q^T w_k
        gq[i] = blk.w_k[i] @ dwd.T
        gk[i] = blk.w_q[i] @ dwd
        go[i] = dwov @ blk.w_v[i].T
        gv[i] = blk.w_o[i].T @ dwov
    g["w_k"], g["w_q"], g["w_v"], g["w_o"] = gk, gq, gv, go
    dX0 = (1.0 + s)[:, :, None] * dXm
    ds = np.sum(dXm * X0, axis=2)
    db = np.sum(dXm, axis=2)
    return dX0, ds, db, g


def score_backward(net, cache, d_out, attn_grad=None):
    """Parameter gradients of ``sum(d_out * score)`` given a forward cache.

    Parameters
    ----------
    attn_grad : callable, optional
        ``attn_grad(Xm, block, head, Y) -> (d, d)`` returning the gradient of
        the single-layer loss with respect to ``W = W_Q^T W_K`` for one
        sample, where ``Y`` is chosen so that the loss residual equals the
        upstream gradient. Defaults to the exact batched formula.

    Returns
    -------
    dict name -> ndarray, keyed like :meth:`ScoreNetwork.named_params`.
    """
    xb, h, ts, sig, u, caches = cache
    spec = net.reshape_spec
    ds_ = d_out / sig
    grads = {"w_b": ds_.T @ u}
    du = ds_ @ net.w_b
    dX = reshape(du, spec)
    s_tot = np.zeros((xb.shape[0], spec.d))
    b_tot = np.zeros_like(s_tot)
    for k in reversed(range(len(net.blocks))):
        dX, ds, db, g = _block_backward(net.blocks[k], caches[k], dX, attn_grad)
        s_tot += ds
        b_tot += db
        for n, v in g.items():
            grads[f"blocks.{k}.{n}"] = v
    phi = time_features(ts)
    grads["time_scale"] = s_tot.T @ phi
    grads["time_shift"] = b_tot.T @ phi
    dh = unreshape(dX, spec)
    grads["w_b"] = grads["w_b"] + xb.T @ dh
    return grads


@dataclass
class NormBudget:
    """Per-block parameter norms (max over heads) and sampled output/Lipschitz estimates."""

    c_ov_2inf: list
    c_ov: list
    c_kq_2inf: list
    c_kq: list
    c_f_2inf: list
    c_f: list
    c_e: float
    c_t_est: float
    l_t_est: float
    n_samples: int
    estimates_are_sampled: bool = True

    def to_dict(self):
        return dict(self.__dict__)


def norm_budget(net, n_samples=1024, radius=10.0, t=1.0, seed=0):
    """Exact weight norms plus sampled bounds on ``|f_T(X)|`` and its Lipschitz constant.

    Exact entries use :func:`latent_dit.tensor_linalg.norm`: ``two_inf`` of
    ``W_OV^T``, ``op2`` of ``W_OV^T``, ``two_inf`` and ``op2`` of ``W_KQ``, of
    ``W_1`` and ``W_2`` (max of the two), and ``two_inf`` of ``E^T``.
    ``C_T`` and ``L_T`` are maxima over ``n_samples`` seeded inputs in the
    Frobenius ball of ``radius``, at time ``t``.
    """
    cov2, cov, ckq2, ckq, cf2, cf = [], [], [], [], [], []
    for b in net.blocks:
        ovs = [b.w_ov(i).T for i in range(b.heads)]
        kqs = [b.w_kq(i) for i in range(b.heads)]
        cov2.append(max(norm(a, "two_inf") for a in ovs))
        cov.append(max(norm(a, "op2") for a in ovs))
        ckq2.append(max(norm(a, "two_inf") for a in kqs))
        ckq.append(max(norm(a, "op2") for a in kqs))
        cf2.append(max(norm(b.w1, "two_inf"), norm(b.w2, "two_inf")))
        cf.append(max(norm(b.w1, "op2"), norm(b.w2, "op2")))
    ce = norm(net.pos_enc.T, "two_inf")
    rs = net.reshape_spec
    rng = make_rng(seed, 22)
    X = rng.standard_normal((n_samples, rs.d, rs.L))
    nrm = np.sqrt(np.sum(X**2, axis=(1, 2)))
    X *= (radius * rng.random(n_samples) ** (1.0 / (rs.d * rs.L)) / nrm)[:, None, None]
    ts = np.full(n_samples, t)
    Y, _ = transformer_forward(net, X, ts)
    c_t = float(max(np.linalg.norm(y, 2) for y in Y))
    # Lipschitz ratio on nearby pairs
    Xp = X + 1e-3 * rng.standard_normal(X.shape)
    Yp, _ = transformer_forward(net, Xp, ts)
    num = np.sqrt(np.sum((Y - Yp) ** 2, axis=(1, 2)))
    den = np.sqrt(np.sum((X - Xp) ** 2, axis=(1, 2)))
    l_t = float(np.max(num / den))
    return NormBudget(cov2, cov, ckq2, ckq, cf2, cf, ce, c_t, l_t, n_samples)
