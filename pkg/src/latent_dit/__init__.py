"""Latent diffusion transformer toolkit: score networks on low-dimensional
subspaces, fast low-rank attention and an explicit universal-approximation
construction."""

__version__ = "0.1.0"

from . import (  # noqa: F401
    analytic_score,
    diffusion_engine,
    dit_score_net,
    fast_attention,
    subspace_data,
    tensor_linalg,
    ua_constructor,
)
