"""Shared builders for small random models and datasets."""

import numpy as np
import pytest

from coarse2fine.model import ModelParams


def make_params(rng, input_dim=4, hidden=(3,), d=3, C=2, n=6,
                cosine=False, mlp_head=False, with_proxy=0,
                temperature=0.05, scale=0.5):
    """Random small ModelParams; `with_proxy` > 0 adds a d x P proxy head."""
    sizes = [input_dim] + list(hidden) + [d]
    encoder = [(scale * rng.standard_normal((a, b)),
                scale * rng.standard_normal(b))
               for a, b in zip(sizes[:-1], sizes[1:])]
    W_C = scale * rng.standard_normal((d, C))
    W_I = scale * rng.standard_normal((d, n))
    W_P = scale * rng.standard_normal((d, with_proxy)) if with_proxy else None
    mlp = None
    if mlp_head:
        mlp = (scale * rng.standard_normal((d, d)),
               scale * rng.standard_normal((d, d)))
    params = ModelParams(encoder=encoder, W_C=W_C, W_I=W_I, W_P=W_P,
                         mlp_head=mlp, cosine=cosine, temperature=temperature)
    if cosine:
        from coarse2fine.model import renormalize_heads
        renormalize_heads(params)
    return params


def identity_params(dim, C=2, n=4, **kw):
    """Single identity encoder layer: f(x) = x."""
    rng = np.random.default_rng(0)
    params = make_params(rng, input_dim=dim, hidden=(), d=dim, C=C, n=n, **kw)
    params.encoder = [(np.eye(dim), np.zeros(dim))]
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
