"""Error types and small validation helpers shared across modules."""

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not conform."""


class DomainError(ValueError):
    """Raised when a scalar argument is outside its admissible range."""


class OverflowGuardError(FloatingPointError):
    """Raised when an exponent would overflow double precision."""


class DegeneracyError(ArithmeticError):
    """Raised when an approximate normaliser is not strictly positive."""


class ConstructionError(RuntimeError):
    """Raised when a layer construction cannot satisfy its hypotheses."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produced NaN or Inf."""


def as_matrix(x, name="x"):
    """Return ``x`` as a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return a


def as_vector(x, name="x", length=None):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {a.shape}")
    if length is not None and a.shape[0] != length:
        raise DimensionError(f"{name} must have length {length}, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return a


def check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {what}")
    return a


def make_rng(seed, *stream):
    """Counter-based generator keyed by ``seed`` and an optional stream path.

    Every stochastic operation builds its own generator so results depend only
    on the explicit seed and never on call order.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))
