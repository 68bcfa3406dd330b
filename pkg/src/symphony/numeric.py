"""Dense linear algebra and special-function helpers.

Everything here is deterministic. Random draws live in :mod:`symphony.sampling`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy import special

from .errors import DomainError, JitterBudgetExceeded, NotPositiveDefinite

LOG_2PI = float(np.log(2.0 * np.pi))

SYM_RTOL = 1e-10
EIG_RTOL = 1e-8
RECON_RTOL = 1e-8
MAX_ESCALATIONS = 8


@dataclass
class SpdMatrix:
    """Symmetric positive (semi-)definite matrix with a lazily cached factor.

    ``jitter`` records the ridge that was added to ``values`` (already included
    in ``values``) to make the Cholesky factorisation succeed.
    """

    values: np.ndarray
    chol: np.ndarray | None = field(default=None, repr=False)
    jitter: float = 0.0

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"square matrix expected, got {self.values.shape}")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def factor(self) -> np.ndarray:
        if self.chol is None:
            self.chol = cholesky(self.values)
        return self.chol

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.factor()))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        return sla.cho_solve((self.factor(), True), b)

    def inverse(self) -> np.ndarray:
        inv = self.solve(np.eye(self.dim))
        return 0.5 * (inv + inv.T)

    def check(self) -> None:
        """Raise if the stored matrix violates the SPD invariants."""
        check_spd(self.values)
        if self.chol is not None:
            rec = self.chol @ self.chol.T
            scale = max(np.abs(self.values).max(), 1e-300)
            if np.abs(rec - self.values).max() > RECON_RTOL * scale:
                raise NotPositiveDefinite("cached factor does not reproduce the matrix")


def as_array(m) -> np.ndarray:
    return m.values if isinstance(m, SpdMatrix) else np.asarray(m, dtype=float)


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def check_spd(m: np.ndarray) -> None:
    m = as_array(m)
    scale = max(np.abs(m).max(), 1e-300)
    if np.abs(m - m.T).max() > SYM_RTOL * scale:
        raise NotPositiveDefinite("matrix is not symmetric")
    w = np.linalg.eigvalsh(m)
    if w.min() < -EIG_RTOL * max(np.abs(w).max(), 1e-300):
        raise NotPositiveDefinite(f"minimum eigenvalue {w.min():.3e} is negative")


def cholesky(m) -> np.ndarray:
    """Lower Cholesky factor ``L`` with ``L @ L.T == m``.

    No jitter is applied here; use :func:`jitter_to_psd` for matrices that may
    be singular or slightly indefinite.
    """
    if isinstance(m, SpdMatrix) and m.chol is not None:
        return m.chol
    a = as_array(m)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def default_eps0(m: np.ndarray) -> float:
    d = m.shape[0]
    eps = 1e-8 * abs(np.trace(m)) / d
    if not eps > 0:
        eps = 1e-8 * max(np.abs(m).max(), 1e-2)
    return eps


def jitter_to_psd(m, eps0: float | None = None) -> SpdMatrix:
    """Return ``m + eps * I`` for the smallest ``eps`` in ``{0, eps0, 10 eps0, ...}``
    whose Cholesky factorisation succeeds.

    At most :data:`MAX_ESCALATIONS` non-zero ridges are tried.
    """
    a = symmetrize(as_array(m))
    if eps0 is None:
        eps0 = default_eps0(a)
    eye = np.eye(a.shape[0])
    eps = 0.0
    for attempt in range(MAX_ESCALATIONS + 1):
        cand = a + eps * eye if eps else a
        try:
            chol = np.linalg.cholesky(cand)
        except np.linalg.LinAlgError:
            pass
        else:
            if np.all(np.isfinite(chol)) and np.all(np.diag(chol) > 0):
                return SpdMatrix(cand, chol=chol, jitter=eps)
        eps = eps0 * 10.0**attempt
    raise JitterBudgetExceeded(
        f"Cholesky failed after {MAX_ESCALATIONS} escalations (last eps={eps0 * 10.0 ** (MAX_ESCALATIONS - 1):.3e})"
    )


def logdet_chol(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def mvn_logpdf_chol(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Gaussian log-density with covariance ``chol @ chol.T``.

    ``x`` may be a single vector of shape (d,) or a batch of shape (m, d).
    """
    diff = np.atleast_2d(x - mean)
    sol = sla.solve_triangular(chol, diff.T, lower=True)
    d = chol.shape[0]
    out = -0.5 * (d * LOG_2PI + logdet_chol(chol) + np.sum(sol * sol, axis=0))
    return out if np.ndim(x) > 1 else float(out[0])


def digamma(x):
    """Digamma function; rejects non-positive arguments."""
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError("digamma is only defined here for x > 0")
    out = special.psi(arr)
    return float(out) if np.ndim(out) == 0 else out


def stick_break(v) -> np.ndarray:
    """Map K-1 stick fractions in (0, 1) to a point on the K-simplex.

    The last weight is one minus the others, so the result sums to one.
    """
    v = np.asarray(v, dtype=float).ravel()
    if np.any(~((v > 0) & (v < 1))):
        raise DomainError("stick fractions must lie strictly inside (0, 1)")
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - v)])
    pi = np.empty(v.size + 1)
    pi[:-1] = v * remaining[:-1]
    pi[-1] = max(1.0 - pi[:-1].sum(), 0.0)
    return pi


def stick_fractions(pi) -> np.ndarray:
    """Inverse of :func:`stick_break`: the K-1 fractions that produce ``pi``."""
    pi = np.asarray(pi, dtype=float)
    left = 1.0 - np.concatenate([[0.0], np.cumsum(pi[:-1])])
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(left[:-1] > 0, pi[:-1] / left[:-1], 0.0)
    return v


def log_mvgamma(a: float, d: int) -> float:
    return float(special.multigammaln(a, d))


def wishart_logpdf(prec: np.ndarray, scale_inv: np.ndarray, dof: float) -> float:
    """log W(prec | scale, dof) parameterised by the *inverse* scale matrix.

    Using the inverse scale avoids forming ``scale`` when it is the inverse of
    a squared network matrix.
    """
    d = prec.shape[0]
    l_prec = cholesky(prec)
    l_sinv = cholesky(scale_inv)
    return float(
        0.5 * (dof - d - 1) * logdet_chol(l_prec)
        - 0.5 * np.sum(scale_inv * prec)
        - 0.5 * dof * d * np.log(2.0)
        + 0.5 * dof * logdet_chol(l_sinv)
        - log_mvgamma(0.5 * dof, d)
    )
