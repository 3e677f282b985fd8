"""Constructive universal approximation on a token grid.

A pipeline of *modified* transformer layers (piecewise-linear activations,
hardmax attention) that

1. quantizes every entry of a ``d x L`` input to the grid ``{0, delta, ..., 1 - delta}``
   (entries outside ``[0, 1)`` become ``-J``);
2. maps each quantized grid ``G`` to ``L`` scalar contextual IDs
   ``u^T f(G)`` that are distinct within and across grids, via selective
   shift attention;
3. memorizes an arbitrary target ``A_G`` per grid point by feed-forward
   layers keyed on those IDs.

:func:`soften` swaps every activation for a 4-ReLU ramp version and every
hardmax for a temperature-``lambda`` softmax, and reports the deviation.

Exact binary arithmetic is relied upon throughout, so ``delta`` must be a
negative power of two.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import ConstructionError, DomainError, make_rng

__all__ = [
    "GridSpec",
    "PiecewiseLinear",
    "FFLayer",
    "ShiftAttnLayer",
    "PosEncLayer",
    "Stack",
    "build_quantizer",
    "build_context_mapper",
    "build_memorizer",
    "build_pipeline",
    "enumerate_grid",
    "verify_context_mapping",
    "soften",
    "piecewise_l2_error",
    "verification_report",
]

_EXHAUSTIVE_CAP = 4096


@dataclass
class GridSpec:
    """Grid of token matrices with entries in ``{0, delta, ..., 1 - delta}``.

    Attributes
    ----------
    d, L : int
    delta : float
        ``2^-k`` with ``k >= 1``.
    J : float
        Off-grid marker magnitude, ``L + 3 L delta^(-d L)``.
    u : ndarray (d,)
        ``(1, 1/delta, ..., delta^(-d+1))``.
    M : float or None
        Largest entry of the mapper output over the extended grid; filled in
        by :func:`build_memorizer`.
    """

    d: int
    L: int
    delta: float
    M: float = None
    J: float = field(init=False)
    u: np.ndarray = field(init=False)

    def __post_init__(self):
        k = -math.log2(self.delta) if self.delta > 0 else float("nan")
        if not (k >= 1 and float(k).is_integer()):
            raise DomainError(f"delta must be 2^-k with integer k >= 1, got {self.delta}")
        if self.d < 1 or self.L < 1:
            raise DomainError("d and L must be positive")
        self.J = self.L + 3 * self.L * self.delta ** (-self.d * self.L)
        self.u = self.delta ** (-np.arange(self.d, dtype=np.float64))

    @property
    def levels(self):
        """Number of grid values per entry, ``1/delta``."""
        return int(round(1 / self.delta))

    @property
    def n_on_grid(self):
        return self.levels ** (self.d * self.L)

    @property
    def t_l(self):
        """Lower ID bound from the cited closed form ``L delta^(-2(L+1)d) (delta^(-d) - 1)``."""
        d, L, dl = self.d, self.L, self.delta
        return L * dl ** (-2 * (L + 1) * d) * (dl ** (-d) - 1)

    @property
    def t_r(self):
        """Upper ID bound ``L^2 delta^(-2(L+1)d-1) + L delta^(-(L+1)d)``."""
        d, L, dl = self.d, self.L, self.delta
        return L**2 * dl ** (-2 * (L + 1) * d - 1) + L * dl ** (-(L + 1) * d)

    @property
    def t_l_derived(self):
        """Lower ID bound ``L delta^(-2Ld) (delta^(-d) - 1)``.

        Product of the global shift factor ``L delta^(-(L+1)d-1)`` and the
        smallest possible largest-column ID ``delta^(-(L-1)d+1) (delta^(-d) - 1)``
        after the sweep layers. It is a factor ``delta^(2d)`` below :attr:`t_l`.
        """
        d, L, dl = self.d, self.L, self.delta
        return L * dl ** (-2 * L * d) * (dl ** (-d) - 1)

    def to_dict(self):
        return {
            "d": self.d,
            "L": self.L,
            "delta": self.delta,
            "J": self.J,
            "u": self.u.tolist(),
            "M": self.M,
            "t_l": self.t_l,
            "t_r": self.t_r,
            "t_l_derived": self.t_l_derived,
        }


class PiecewiseLinear:
    """Scalar piecewise-linear function with left-closed pieces.

    Parameters
    ----------
    breakpoints : sequence of float, increasing
    pieces : sequence of (slope, intercept)
        ``len(breakpoints) + 1`` affine pieces; piece ``k`` holds on
        ``[c_{k-1}, c_k)``.
    """

    def __init__(self, breakpoints, pieces, name=""):
        self.breakpoints = np.asarray(breakpoints, dtype=np.float64)
        self.pieces = np.asarray(pieces, dtype=np.float64).reshape(-1, 2)
        if len(self.pieces) != len(self.breakpoints) + 1:
            raise DomainError("need one more piece than breakpoints")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise DomainError("breakpoints must increase")
        self.name = name

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        k = np.searchsorted(self.breakpoints, t, side="right")
        a, b = self.pieces[k, 0], self.pieces[k, 1]
        return a * t + b

    def jumps(self):
        """Breakpoints where the function is discontinuous."""
        out = []
        for k, c in enumerate(self.breakpoints):
            (al, bl), (ar, br) = self.pieces[k], self.pieces[k + 1]
            if al * c + bl != ar * c + br:
                out.append(c)
        return np.asarray(out)

    def max_slope(self):
        return float(np.max(np.abs(self.pieces[:, 0])))

    def relu_form(self, eps):
        """ReLU expansion of the ramped approximation.

        Each breakpoint ``c`` is replaced by a straight ramp on ``[c - eps, c]``
        from the left piece to the right piece; the result is
        ``a0 t + b0 + sum_k w_k relu(t - s_k)`` with two knots per breakpoint.

        Returns
        -------
        (a0, b0, knots, weights)
        """
        if len(self.breakpoints) > 1 and eps >= np.min(np.diff(self.breakpoints)):
            raise DomainError("eps must be smaller than the gap between breakpoints")
        a0, b0 = self.pieces[0]
        knots, weights = [], []
        for k, c in enumerate(self.breakpoints):
            (al, bl), (ar, br) = self.pieces[k], self.pieces[k + 1]
            left = al * (c - eps) + bl
            right = ar * c + br
            ramp = (right - left) / eps
            knots += [c - eps, c]
            weights += [ramp - al, ar - ramp]
        return a0, b0, np.asarray(knots), np.asarray(weights)

    def softened(self, eps):
        """Callable evaluating :meth:`relu_form` through ReLUs only."""
        a0, b0, knots, weights = self.relu_form(eps)

        def f(t):
            t = np.asarray(t, dtype=np.float64)
            out = a0 * t + b0
            for s, w in zip(knots, weights):
                out = out + w * np.maximum(t - s, 0.0)
            return out

        return f


def zeta1(J):
    return PiecewiseLinear([0.0, 1.0], [(-1.0, -J), (0.0, 0.0), (-1.0, -J)], "zeta1")


def zeta2(delta):
    return PiecewiseLinear([0.0, delta], [(0.0, 0.0), (-1.0, 0.0), (0.0, 0.0)], "zeta2")


def zeta3(lo, hi):
    # zero on the closed window [lo, hi]
    return PiecewiseLinear([lo, np.nextafter(hi, np.inf)], [(0.0, 1.0), (0.0, 0.0), (0.0, 1.0)], "zeta3")


def zeta4():
    return PiecewiseLinear([0.0], [(-1.0, 0.0), (0.0, 0.0)], "zeta4")


def zeta5(half_width):
    return PiecewiseLinear([-half_width, half_width], [(0.0, 0.0), (0.0, 1.0), (0.0, 0.0)], "zeta5")


@dataclass
class FFLayer:
    """``X -> X + scale * out zeta(w^T X - offset)`` with ``zeta`` piecewise linear."""

    kind: str
    act: PiecewiseLinear
    w: np.ndarray
    out: np.ndarray
    offset: float = 0.0
    scale: float = 1.0

    def pre(self, X):
        return self.w @ X - self.offset

    def apply(self, X, soft=None):
        z = self.pre(X)
        a = self.act(z) if soft is None else self.act.softened(soft[1])(z)
        return X + self.scale * np.outer(self.out, a)

    def lipschitz(self):
        return 1.0 + abs(self.scale) * float(np.max(np.abs(self.out))) * self.act.max_slope() * float(np.sum(np.abs(self.w)))


def selective_shift(X, u, b, lam=None):
    """``e_1 u^T X hardmax((u^T X)^T (u^T X - b 1^T))`` per column.

    With ``lam`` the hardmax becomes ``softmax(lam * .)``. Ties in the
    hardmax go to the lowest index.
    """
    v = u @ X
    scores = np.outer(v, v - b)  # scores[k, j]: key k for query column j
    if lam is None:
        sel = v[np.argmax(scores, axis=0)]
    else:
        z = lam * (scores - scores.max(axis=0, keepdims=True))
        w = np.exp(z)
        w /= w.sum(axis=0, keepdims=True)
        sel = v @ w
    out = np.zeros_like(X)
    out[0] = sel
    return out


@dataclass
class ShiftAttnLayer:
    """``X -> X + scale (xi(X; b) - xi(X; b'))``, or ``X + scale xi(X; b)`` when ``b_prime`` is None."""

    kind: str
    u: np.ndarray
    b: float
    b_prime: float = None
    scale: float = 1.0

    def apply(self, X, soft=None):
        lam = None if soft is None else soft[0]
        s = selective_shift(X, self.u, self.b, lam)
        if self.b_prime is not None:
            s = s - selective_shift(X, self.u, self.b_prime, lam)
        return X + self.scale * s


@dataclass
class PosEncLayer:
    kind: str
    E: np.ndarray

    def apply(self, X, soft=None):
        return X + self.E


@dataclass
class Stack:
    layers: list

    def __len__(self):
        return len(self.layers)

    def __add__(self, other):
        return Stack(self.layers + other.layers)

    def __call__(self, X, soft=None):
        X = np.array(X, dtype=np.float64)
        for layer in self.layers:
            X = layer.apply(X, soft)
        return X

    def count(self, kind):
        return sum(1 for layer in self.layers if layer.kind == kind)


def build_quantizer(grid):
    """``d`` clipping layers then ``d / delta`` flooring layers."""
    d, dl = grid.d, grid.delta
    eye = np.eye(d)
    layers = [FFLayer("ff_zeta1", zeta1(grid.J), eye[i], eye[i]) for i in range(d)]
    z2 = zeta2(dl)
    for i in range(d):
        for k in range(grid.levels):
            layers.append(FFLayer("ff_zeta2", z2, eye[i], eye[i], offset=k * dl))
    return Stack(layers)


def positional_encoding(grid):
    """Every row is ``(0, 1, ..., L-1)``."""
    return np.tile(np.arange(grid.L, dtype=np.float64), (grid.d, 1))


def build_context_mapper(grid):
    """Positional encoding, ``L delta^(-d)`` sweep layers and one global shift.

    Returns
    -------
    stack : Stack
    t_l, t_r : float
        The cited closed-form bounds.
    """
    d, L, dl = grid.d, grid.L, grid.delta
    if L < 2 or grid.levels < 2:
        raise DomainError("context mapping needs L >= 2 and 1/delta >= 2")
    u = grid.u
    layers = [PosEncLayer("pos_enc", positional_encoding(grid))]
    span = float(u.sum())
    n_sweep = int(round(dl ** (-d)))
    for j in range(L):
        base = j * span
        for m in range(n_sweep):
            g = base + m * dl
            layers.append(ShiftAttnLayer("shift_attn", u, g - dl / 2, g + dl / 2, dl ** (-d)))
    layers.append(ShiftAttnLayer("global_shift_attn", u, 0.0, None, L * dl ** (-(L + 1) * d - 1)))
    return Stack(layers), grid.t_l, grid.t_r


def enumerate_grid(grid, off_grid=True):
    """All on-grid matrices, optionally followed by the ``-J`` extensions.

    Yields
    ------
    (G, on_grid) with ``G`` of shape (d, L). Off-grid entries are ``-J``,
    the value the quantizer assigns to inputs outside ``[0, 1)``.
    """
    d, L = grid.d, grid.L
    vals = [k * grid.delta for k in range(grid.levels)]
    choices = vals + ([None] if off_grid else [])
    for entries in itertools.product(choices, repeat=d * L):
        G = np.empty((d, L))
        on = True
        for idx, e in enumerate(entries):
            i, j = divmod(idx, L)
            if e is None:
                G[i, j] = -grid.J
                on = False
            else:
                G[i, j] = e
        yield G, on


def _exhaustive_ok(grid):
    return grid.levels ** (grid.d * grid.L) <= _EXHAUSTIVE_CAP


def verify_context_mapping(grid, mapper=None, t_l=None, t_r=None, sample=None, seed=0):
    """Check the four contextual-mapping properties.

    1. IDs within one on-grid ``G`` are distinct.
    2. IDs of different on-grid ``G`` are distinct.
    3. On-grid IDs lie in ``[t_l, t_r]``.
    4. Every ID of an off-grid ``G`` lies outside ``[t_l, t_r]``.

    Exhaustive when ``(1/delta)^(dL) <= 4096``; otherwise a seeded sample of
    ``sample`` grid points (default 512) is checked and ``exhaustive`` is False.

    Returns
    -------
    dict
    """
    if mapper is None:
        mapper, _, _ = build_context_mapper(grid)
    t_l = grid.t_l if t_l is None else t_l
    t_r = grid.t_r if t_r is None else t_r
    exhaustive = _exhaustive_ok(grid)
    if exhaustive:
        points = list(enumerate_grid(grid))
    else:
        rng = make_rng(seed, 41)
        n = sample or 512
        points = []
        for _ in range(n):
            G = rng.integers(0, grid.levels, size=(grid.d, grid.L)) * grid.delta
            on = True
            if rng.random() < 0.5:
                G[rng.integers(grid.d), rng.integers(grid.L)] = -grid.J
                on = False
            points.append((G, on))
    on_ids, off_ids = [], []
    within = True
    for G, on in points:
        q = grid.u @ mapper(G)
        if on:
            within &= len(set(q.tolist())) == q.size
            on_ids.append(q)
        else:
            off_ids.append(q)
    on_all = np.concatenate(on_ids) if on_ids else np.empty(0)
    off_all = np.concatenate(off_ids) if off_ids else np.empty(0)
    across = len(set(on_all.tolist())) == on_all.size
    inside = bool(np.all((on_all >= t_l) & (on_all <= t_r)))
    outside = bool(np.all((off_all < t_l) | (off_all > t_r)))
    gaps = np.diff(np.sort(on_all))
    return {
        "exhaustive": exhaustive,
        "n_on_grid": len(on_ids),
        "n_off_grid": len(off_ids),
        "t_l": t_l,
        "t_r": t_r,
        "property_1_distinct_within": bool(within),
        "property_2_distinct_across": bool(across),
        "property_3_on_grid_inside": inside,
        "property_4_off_grid_outside": outside,
        "on_grid_min": float(on_all.min()) if on_all.size else None,
        "on_grid_max": float(on_all.max()) if on_all.size else None,
        "off_grid_in_on_range": int(np.sum((off_all >= on_all.min()) & (off_all <= on_all.max()))) if on_all.size else 0,
        "min_gap": float(gaps.min()) if gaps.size else None,
    }


def _choose_window(grid, mapper, on_ids, off_ids):
    # try the cited window, then the derived lower bound, then the enumerated hull
    candidates = [
        ("cited", grid.t_l, grid.t_r),
        ("derived", grid.t_l_derived, grid.t_r),
        ("enumerated", float(on_ids.min()), float(on_ids.max())),
    ]
    for name, lo, hi in candidates:
        ok_on = np.all((on_ids >= lo) & (on_ids <= hi))
        ok_off = np.all((off_ids < lo) | (off_ids > hi))
        if ok_on and ok_off and lo > grid.delta / 2:
            return name, lo, hi
    raise ConstructionError("no window separates on-grid from off-grid contextual IDs")


def build_memorizer(grid, mapper, targets, window=None):
    """Feed-forward layers mapping each on-grid mapper output to its target.

    Parameters
    ----------
    grid : GridSpec
        ``grid.M`` is set from the enumeration.
    mapper : Stack
        Output of :func:`build_context_mapper`.
    targets : dict or callable
        Maps the on-grid matrix ``G`` (as ``G.tobytes()`` key of the
        quantized input, or via a callable ``targets(G)``) to ``A_G`` (d x L).
    window : (lo, hi), optional
        ID window kept by the clipping layer; chosen automatically otherwise.

    Returns
    -------
    stack : Stack
    info : dict
        Window used and its provenance.

    Raises
    ------
    ConstructionError
        On duplicate contextual IDs or when a target's ID collides with a
        later window.
    """
    if not _exhaustive_ok(grid):
        raise ConstructionError("memorizer construction requires an exhaustively enumerable grid")
    lookup = targets if callable(targets) else (lambda G: targets[G.tobytes()])
    on_out, off_out, on_grids = [], [], []
    M = 0.0
    for G, on in enumerate_grid(grid):
        X = mapper(G)
        M = max(M, float(X.max()))
        (on_out if on else off_out).append(X)
        if on:
            on_grids.append(G)
    grid.M = M
    u = grid.u
    on_ids = np.concatenate([u @ X for X in on_out])
    off_ids = np.concatenate([u @ X for X in off_out]) if off_out else np.empty(0)
    if len(set(on_ids.tolist())) != on_ids.size:
        raise ConstructionError("duplicate contextual IDs")
    if window is None:
        source, lo, hi = _choose_window(grid, mapper, on_ids, off_ids)
    else:
        source, (lo, hi) = "given", window
    gaps = np.diff(np.sort(on_ids))
    half = min(grid.delta, float(gaps.min()) if gaps.size else grid.delta) / 2
    d = grid.d
    eye = np.eye(d)
    layers = [FFLayer("ff_zeta3", zeta3(lo, hi), u, np.ones(d), scale=-(M + 1))]
    layers += [FFLayer("ff_zeta4", zeta4(), eye[i], eye[i]) for i in range(d)]
    z5 = zeta5(half)
    ids_sorted = np.sort(on_ids)
    for G, X in zip(on_grids, on_out):
        A = np.asarray(lookup(G), dtype=np.float64)
        if A.shape != X.shape:
            raise ConstructionError(f"target shape {A.shape} != {X.shape}")
        for j in range(grid.L):
            c = float(u @ X[:, j])
            v = float(u @ A[:, j])
            # a rewritten column must not fall into any ID window
            k = np.searchsorted(ids_sorted, v)
            near = ids_sorted[max(k - 1, 0):k + 1]
            if np.any(np.abs(near - v) <= half):
                raise ConstructionError(f"target column ID {v} collides with a contextual ID window")
            layers.append(FFLayer("ff_zeta5", z5, u, A[:, j] - X[:, j], offset=c))
    info = {"window_source": source, "window": [lo, hi], "half_width": half, "M": M}
    return Stack(layers), info


@dataclass
class Pipeline:
    grid: GridSpec
    quantizer: Stack
    mapper: Stack
    memorizer: Stack
    info: dict

    @property
    def stack(self):
        return self.quantizer + self.mapper + self.memorizer

    def __call__(self, X, soft=None):
        return self.stack(X, soft)


def build_pipeline(grid, targets):
    q = build_quantizer(grid)
    m, _, _ = build_context_mapper(grid)
    mem, info = build_memorizer(grid, m, targets)
    return Pipeline(grid, q, m, mem, info)


def _layer_bound(layer, X, e, soft):
    """Propagate a max-norm deviation bound ``e`` through one layer.

    ``X`` is the exact (modified) input. Returns the new bound, ``inf`` when a
    margin condition fails so that no finite bound is certified.
    """
    lam, eps = soft
    if isinstance(layer, PosEncLayer):
        return e
    if isinstance(layer, FFLayer):
        z = layer.pre(X)
        eta = float(np.sum(np.abs(layer.w))) * e
        for c in layer.act.jumps():
            lo, hi = c - eps, c
            if e == 0:
                hit = np.any((z >= lo) & (z < hi))
            else:
                hit = np.any((z + eta >= lo) & (z - eta <= hi))
            if hit:
                return math.inf
        return layer.lipschitz() * e
    # selective shift
    u = layer.u
    v = u @ X
    eta = float(np.sum(np.abs(u))) * e
    terms = [layer.b] + ([layer.b_prime] if layer.b_prime is not None else [])
    total = 0.0
    order = np.sort(v)
    gap_v = float(order[-1] - order[-2]) if v.size > 1 else math.inf
    gap_lo = float(order[1] - order[0]) if v.size > 1 else math.inf
    rng_v = float(order[-1] - order[0]) + 2 * eta
    for b in terms:
        worst = 0.0
        for j in range(v.size):
            q = abs(v[j] - b)
            gap = gap_v if v[j] > b else gap_lo
            if q <= eta or gap <= 2 * eta or v[j] == b:
                return math.inf
            delta_score = (q - eta) * (gap - 2 * eta)
            soft_dev = (v.size - 1) * math.exp(-lam * delta_score) * rng_v
            worst = max(worst, eta + soft_dev)
        total += worst
    return e + abs(layer.scale) * total


def deviation_bound(stack, X, soft):
    """Certified max-norm bound on ``|soft_stack(X) - stack(X)|`` at input ``X``.

    Softened activations agree with the modified ones outside ramp zones;
    softmax deviates from hardmax by at most ``(L-1) exp(-lam * gap) * range``.
    Bounds are composed with per-layer Lipschitz constants valid while every
    selection and activation piece stays fixed; if a margin is too small the
    result is ``inf``.
    """
    X = np.array(X, dtype=np.float64)
    e = 0.0
    for layer in stack.layers:
        e = _layer_bound(layer, X, e, soft)
        if not math.isfinite(e):
            return math.inf
        X = layer.apply(X)
    return e


def soften(stack, lam, eps, inputs):
    """Softened copy of ``stack`` and its deviation report over ``inputs``.

    Parameters
    ----------
    stack : Stack or Pipeline
    lam : float
        Softmax temperature replacing hardmax.
    eps : float
        Ramp width of the 4-ReLU activation approximations.
    inputs : iterable of ndarray (d, L)

    Returns
    -------
    soft_fn : callable
    report : dict
        ``max_deviation`` measured, ``bound`` the largest certified bound
        (``inf`` if any input is not certified).
    """
    if lam <= 0 or eps <= 0:
        raise DomainError("lambda and eps must be positive")
    st = stack.stack if isinstance(stack, Pipeline) else stack
    soft = (float(lam), float(eps))
    dev, bound = 0.0, 0.0
    n = 0
    for X in inputs:
        ref = st(X)
        got = st(X, soft)
        dev = max(dev, float(np.max(np.abs(got - ref))))
        bound = max(bound, deviation_bound(st, X, soft))
        n += 1
    return (lambda X: st(X, soft)), {"lambda": lam, "eps": eps, "n_inputs": n, "max_deviation": dev, "bound": bound}


def piecewise_l2_error(fn, grid, targets, points_per_axis=1):
    """L2 error over ``[0,1)^(d x L)`` of ``fn`` against a piecewise-constant target.

    The target equals ``targets(G)`` on the cube with lower corner ``G``.
    The integral is a Riemann sum with ``points_per_axis`` interior points
    per axis on every cube, each weighted by its share of the cube volume.
    """
    lookup = targets if callable(targets) else (lambda G: targets[G.tobytes()])
    dl = grid.delta
    offs = (np.arange(points_per_axis) + 0.5) / points_per_axis * dl
    vol = dl ** (grid.d * grid.L)
    total = 0.0
    n_sub = points_per_axis ** (grid.d * grid.L)
    for G, _ in enumerate_grid(grid, off_grid=False):
        A = lookup(G)
        for shift in itertools.product(offs, repeat=grid.d * grid.L):
            X = G + np.asarray(shift).reshape(grid.d, grid.L)
            r = fn(X) - A
            total += float(np.sum(r * r)) * vol / n_sub
    return math.sqrt(total)


def random_targets(grid, seed=0):
    """Seeded on-grid targets keyed by ``G.tobytes()``."""
    rng = make_rng(seed, 43)
    out = {}
    for G, _ in enumerate_grid(grid, off_grid=False):
        out[G.tobytes()] = rng.integers(0, grid.levels, size=(grid.d, grid.L)) * grid.delta
    return out


def verification_report(grid, lambdas=(10.0, 100.0, 1000.0), eps=None, n_random=1000, seed=0):
    """Full check of the pipeline on one grid; JSON-serialisable."""
    eps = grid.delta / 4 if eps is None else eps
    rng = make_rng(seed, 42)
    q = build_quantizer(grid)
    X = rng.random((n_random, grid.d, grid.L)) * 1.5 - 0.25
    expect = np.where((X >= 0) & (X < 1), np.floor(X / grid.delta) * grid.delta, -grid.J)
    got = np.stack([q(x) for x in X])
    quant_ok = bool(np.array_equal(got, expect))
    mapper, t_l, t_r = build_context_mapper(grid)
    cited = verify_context_mapping(grid, mapper)
    derived = verify_context_mapping(grid, mapper, t_l=grid.t_l_derived)
    report = {
        "grid": grid.to_dict(),
        "quantizer": {"layers": len(q), "expected_layers": grid.d * grid.levels + grid.d, "exact": quant_ok},
        "context_mapping_cited_bounds": cited,
        "context_mapping_derived_bounds": derived,
    }
    if _exhaustive_ok(grid):
        targets = random_targets(grid, seed)
        pipe = build_pipeline(grid, targets)
        grid.M = pipe.info["M"]
        report["grid"] = grid.to_dict()
        mem_ok = True
        for G, on in enumerate_grid(grid):
            out = pipe.mapper(G)
            out = pipe.memorizer(out)
            want = targets[G.tobytes()] if on else np.zeros_like(G)
            mem_ok &= bool(np.array_equal(out, want))
        report["memorizer"] = dict(pipe.info, exact=mem_ok, layers=len(pipe.memorizer))
        inputs = [G for G, _ in enumerate_grid(grid, off_grid=False)]
        inputs += [np.where(G < 0, 1.5, G) for G, on in enumerate_grid(grid) if not on]
        soft = []
        for lam in lambdas:
            _, rep = soften(pipe, lam, eps, inputs)
            soft.append(rep)
        report["soften"] = soft
    return report
