"""Dense matrix primitives: vectorisation, Kronecker products and norms.

Matrices are plain C-ordered ``numpy.ndarray`` objects of dtype float64.
Vectorisation is row-major, so entry ``(i, j)`` of an ``L x d`` matrix sits
at flat position ``i * d + j``.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import DimensionError, DomainError, as_matrix

__all__ = [
    "LowRankFactors",
    "vectorize",
    "matrixize",
    "kron",
    "row_kron",
    "norm",
]


@dataclass(frozen=True)
class LowRankFactors:
    """Factor pair ``(u, v)`` whose product ``u @ v.T`` approximates a target.

    Attributes
    ----------
    u, v : ndarray of shape (L, k)
    rank : int
    err_bound : float
        Certified bound on ``max |u v^T - target|``.
    """

    u: np.ndarray
    v: np.ndarray
    rank: int
    err_bound: float

    def __post_init__(self):
        if self.u.ndim != 2 or self.v.ndim != 2:
            raise DimensionError("factors must be 2-D")
        if not (self.u.shape[1] == self.v.shape[1] == self.rank):
            raise DimensionError(
                f"factor widths {self.u.shape[1]}, {self.v.shape[1]} disagree with rank {self.rank}"
            )
        if not self.err_bound >= 0:
            raise DomainError("err_bound must be non-negative")

    def dense(self):
        """Materialise ``u @ v.T``. Only meant for tests on small sizes."""
        return self.u @ self.v.T


def vectorize(x):
    """Flatten a matrix row by row.

    Examples
    --------
    >>> vectorize([[1, 2], [3, 4]])
    array([1., 2., 3., 4.])
    """
    return as_matrix(x).reshape(-1).copy()


def matrixize(v, rows, cols):
    """Inverse of :func:`vectorize`."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != rows * cols:
        raise DimensionError(f"cannot matrixize length {v.size} into {rows}x{cols}")
    return v.reshape(rows, cols).copy()


def kron(a, b):
    """Kronecker product with the standard block layout."""
    return np.kron(as_matrix(a, "a"), as_matrix(b, "b"))


def row_kron(a, b):
    """Row-wise Kronecker (face-splitting) product.

    Row ``l`` of the result is ``kron(a[l], b[l])``, so that
    ``row_kron(U1, U2) @ row_kron(V1, V2).T == (U1 @ V1.T) * (U2 @ V2.T)``.

    Parameters
    ----------
    a : ndarray of shape (L, k1)
    b : ndarray of shape (L, k2)

    Returns
    -------
    ndarray of shape (L, k1 * k2)
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)


def _op2(x, tol=1e-10, max_iter=10_000):
    # power iteration on the smaller Gram matrix
    g = x.T @ x if x.shape[1] <= x.shape[0] else x @ x.T
    n = g.shape[0]
    if n == 0 or not np.any(g):
        return 0.0
    v = np.ones(n) / np.sqrt(n) + 1e-3 * np.arange(n) / max(n, 1)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = g @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector orthogonal to the range; restart on a basis vector
            v = np.zeros(n)
            v[int(np.argmax(np.diag(g)))] = 1.0
            continue
        new = float(v @ w)
        v = w / nw
        if abs(new - lam) <= tol * max(abs(new), 1.0):
            lam = new
            break
        lam = new
    return float(np.sqrt(max(lam, 0.0)))


def norm(x, kind="max"):
    """Matrix norms used throughout.

    Parameters
    ----------
    x : array_like, 2-D
    kind : {"max", "frobenius", "two_inf", "op2"}
        ``two_inf`` is the largest column 2-norm; ``op2`` the largest
        singular value found by power iteration.
    """
    x = as_matrix(x)
    if x.size == 0:
        return 0.0
    if kind == "max":
        return float(np.max(np.abs(x)))
    if kind == "frobenius":
        return float(np.sqrt(np.sum(x * x)))
    if kind == "two_inf":
        return float(np.max(np.sqrt(np.sum(x * x, axis=0))))
    if kind == "op2":
        return _op2(x)
    raise DomainError(f"unknown norm kind {kind!r}")
