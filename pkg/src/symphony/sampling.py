"""Seedable random streams and the samplers used by the generative model."""
from __future__ import annotations

import numpy as np
from scipy import special

from .errors import DofTooSmall
from .numeric import SpdMatrix, as_array, jitter_to_psd, symmetrize

# Below this acceptance probability the rejection loop is skipped entirely.
MIN_ACCEPTANCE = 0.01
MAX_REJECTION_ROUNDS = 64


class RngStream:
    """Independent random stream identified by ``(master_seed, stream_id)``.

    Streams with the same pair replay the same draws; different ``stream_id``
    values are spawned from one ``SeedSequence`` and are independent.
    """

    def __init__(self, master_seed: int, stream_id: int = 0):
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_id,))
        self.gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.master_seed, stream_id)

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_id={self.stream_id})"


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.gen
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def bartlett_factor(dim: int, dof: float, gen: np.random.Generator, size=None) -> np.ndarray:
    """Lower-triangular Bartlett factor A with W = L A A^T L^T ~ Wishart."""
    shape = (dim, dim) if size is None else (size, dim, dim)
    a = np.zeros(shape)
    df = dof - np.arange(dim)
    diag_shape = (dim,) if size is None else (size, dim)
    idx = np.arange(dim)
    a[..., idx, idx] = np.sqrt(gen.chisquare(df, size=diag_shape))
    rows, cols = np.tril_indices(dim, k=-1)
    off_shape = (rows.size,) if size is None else (size, rows.size)
    a[..., rows, cols] = gen.standard_normal(off_shape)
    return a


def sample_wishart_bartlett(scale, dof: float, rng, size: int | None = None):
    """Draw from Wishart(scale, dof) using the Bartlett decomposition.

    Only chi-square diagonals and standard normal off-diagonals are drawn; the
    result is the Gram matrix ``(L A)(L A)^T``. With ``size`` a stacked array of
    draws is returned instead of a single :class:`SpdMatrix`.
    """
    s = as_array(scale)
    dim = s.shape[0]
    if dof < dim:
        raise DofTooSmall(f"dof={dof} is smaller than the dimension {dim}")
    chol = scale.factor() if isinstance(scale, SpdMatrix) else jitter_to_psd(s).factor()
    gen = as_generator(rng)
    a = bartlett_factor(dim, dof, gen, size)
    la = chol @ a
    w = symmetrize(la @ np.swapaxes(la, -1, -2))
    if size is not None:
        return w
    return SpdMatrix(w)


def _upper_tail_inverse_cdf(mean, sd, a, u):
    # x = mean + sd * Phi^{-1}(Phi(a) + u * (1 - Phi(a))), evaluated through the
    # survival function so that deep tails stay accurate.
    tail = special.ndtr(-a)
    return mean - sd * special.ndtri((1.0 - u) * tail)


def sample_trunc_normal(mean, cov, lo: float, rng) -> np.ndarray:
    """Coordinatewise draw from N(mean, diag(cov)) truncated to ``[lo, inf)``.

    A full covariance is reduced to its diagonal. Coordinates whose acceptance
    probability is below 1% go straight to inverse-CDF sampling; the rest use
    rejection with a capped number of rounds and an inverse-CDF fallback.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    c = as_array(cov) if isinstance(cov, SpdMatrix) else np.asarray(cov, dtype=float)
    var = np.diag(c) if c.ndim == 2 else np.broadcast_to(c, mean.shape)
    sd = np.sqrt(var)
    gen = as_generator(rng)
    a = (lo - mean) / sd
    accept = special.ndtr(-a)

    out = np.empty_like(mean)
    todo = accept >= MIN_ACCEPTANCE
    direct = ~todo
    if direct.any():
        out[direct] = _upper_tail_inverse_cdf(mean[direct], sd[direct], a[direct],
                                              gen.uniform(size=int(direct.sum())))
    idx = np.flatnonzero(todo)
    for _ in range(MAX_REJECTION_ROUNDS):
        if idx.size == 0:
            break
        draw = mean[idx] + sd[idx] * gen.standard_normal(idx.size)
        ok = draw >= lo
        out[idx[ok]] = draw[ok]
        idx = idx[~ok]
    if idx.size:
        out[idx] = _upper_tail_inverse_cdf(mean[idx], sd[idx], a[idx], gen.uniform(size=idx.size))
    return np.maximum(out, lo)
