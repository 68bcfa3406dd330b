"""Model types and log-densities of every factor in the joint distribution.

Conventions used throughout the package:

* ``X`` is genes x cells (d x n) and ``C`` is regions x replicates (l x r).
* Cluster labels ``z`` are 0-based integers.
* Precision-type quantities (cluster precisions, the mean-spread precision)
  are scored by their Wishart density in precision coordinates.
* Cell scalings are scored as Normal densities of ``log alpha`` / ``log beta``
  and stick fractions as Beta densities in logit coordinates, i.e. each
  constrained scalar is handled in its unconstrained parameterisation. Point
  estimates produced by the inference engine are maximisers of exactly these
  densities.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, MappingMissing
from .numeric import (
    LOG_2PI,
    SpdMatrix,
    as_array,
    cholesky,
    jitter_to_psd,
    logdet_chol,
    mvn_logpdf_chol,
    stick_fractions,
    symmetrize,
    wishart_logpdf,
)

SIGN_TOL = 1e-12
ZERO_RSTAR_EPS = 1e-10


@dataclass(frozen=True)
class Dims:
    n: int
    d: int
    l: int
    r: int
    K: int

    def __post_init__(self):
        for name in ("n", "d", "l", "r", "K"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class Dataset:
    X: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.C = np.asarray(self.C, dtype=float)
        if self.C.ndim == 1:
            self.C = self.C[:, None]
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.C))):
            raise ValueError("dataset contains NaN or Inf")
        if np.any(self.C < 0):
            raise ValueError("bulk matrix must be nonnegative")

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def l(self) -> int:
        return self.C.shape[0]

    @property
    def r(self) -> int:
        return self.C.shape[1]

    def dims(self, K: int) -> Dims:
        return Dims(self.n, self.d, self.l, self.r, K)


@dataclass
class HyperParams:
    nu: float
    delta: float
    omega: float
    theta: float
    gamma: float
    lam: float
    zeta: float
    eta: np.ndarray
    Lambda_diag: np.ndarray
    mu2: np.ndarray
    Sigma2: np.ndarray
    phi: float = 1.0

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float).ravel()
        self.Lambda_diag = np.asarray(self.Lambda_diag, dtype=float).ravel()
        self.mu2 = np.asarray(self.mu2, dtype=float).ravel()
        self.Sigma2 = np.atleast_2d(np.asarray(self.Sigma2, dtype=float))
        for name in ("delta", "theta", "lam", "zeta", "phi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"hyperparameter {name} must be positive")
        if self.gamma < self.mu2.size:
            raise ValueError("gamma must be at least the number of genes")
        if np.any(self.Lambda_diag <= 0):
            raise ValueError("Lambda_diag must be positive")
        if self.eta.shape != self.Lambda_diag.shape:
            raise DimensionMismatch("eta and Lambda_diag lengths differ")
        if self.Sigma2.shape != (self.mu2.size, self.mu2.size):
            raise DimensionMismatch("Sigma2 must be d x d")

    @property
    def d(self) -> int:
        return self.mu2.size

    @property
    def l(self) -> int:
        return self.eta.size

    @classmethod
    def simulation_default(cls, d: int, l: int, **overrides) -> "HyperParams":
        hp = dict(
            nu=0.0, delta=0.25, omega=0.0, theta=0.25, gamma=d + 2.0, lam=0.1,
            zeta=0.05, eta=2.0 * np.ones(l), Lambda_diag=np.ones(l),
            mu2=np.zeros(d), Sigma2=25.0 * np.eye(d), phi=1.0,
        )
        hp.update(overrides)
        return cls(**hp)

    @classmethod
    def empirical(cls, data: Dataset, **overrides) -> "HyperParams":
        """Defaults estimated from the observed views.

        Peak prior: mean = row means of C, variance = spread of C across
        regions. Gene-level prior: mean and diagonal covariance of the cells.
        """
        d, l = data.d, data.l
        var_c = float(np.var(data.C)) if data.C.size > 1 else 1.0
        var_x = np.var(data.X, axis=1) if data.n > 1 else np.ones(d)
        hp = dict(
            nu=0.0, delta=0.25, omega=0.0, theta=0.25, gamma=d + 2.0, lam=0.1,
            zeta=0.05, eta=data.C.mean(axis=1),
            Lambda_diag=np.full(l, max(var_c, 1e-6)),
            mu2=data.X.mean(axis=1), Sigma2=np.diag(np.maximum(var_x, 1e-6)), phi=1.0,
        )
        hp.update(overrides)
        return cls(**hp)


@dataclass
class RegulatoryPrior:
    """Links gene pairs to regions.

    ``region[i, i2]`` is the 0-based region informing the edge regulator ``i2``
    -> target ``i`` (-1 when unmapped); ``M`` is the motif indicator and ``S``
    the activation/repression sign.
    """

    region: np.ndarray
    M: np.ndarray
    S: np.ndarray
    l: int

    def __post_init__(self):
        self.region = np.asarray(self.region, dtype=int)
        self.M = np.asarray(self.M, dtype=float)
        self.S = np.asarray(self.S, dtype=float)
        d = self.region.shape[0]
        for name in ("region", "M", "S"):
            if getattr(self, name).shape != (d, d):
                raise DimensionMismatch(f"{name} must be {d} x {d}")
        missing = (self.M != 0) & (self.region < 0)
        if missing.any():
            i, i2 = np.argwhere(missing)[0]
            raise MappingMissing(f"motif flag set for target {i}, regulator {i2} without a region")
        if np.any(self.region >= self.l):
            raise DimensionMismatch("region index out of range")

    @property
    def d(self) -> int:
        return self.region.shape[0]

    @property
    def mapping(self) -> dict:
        return {(int(i), int(i2)): int(self.region[i, i2]) for i, i2 in np.argwhere(self.region >= 0)}

    @classmethod
    def from_mapping(cls, mapping: dict, M, S, l: int) -> "RegulatoryPrior":
        M = np.asarray(M, dtype=float)
        region = -np.ones(M.shape, dtype=int)
        for (i, i2), m in mapping.items():
            region[i, i2] = m
        return cls(region, M, S, l)

    @property
    def coef(self) -> np.ndarray:
        """Per-edge coefficient ``S * M`` (zero where unmapped)."""
        return np.where(self.region >= 0, self.S * self.M, 0.0)

    def prior_mean(self, p: np.ndarray) -> np.ndarray:
        """Mean of R given peaks; ``p`` is (l,) or (K, l)."""
        p = np.asarray(p, dtype=float)
        idx = np.where(self.region >= 0, self.region, 0)
        return self.coef * p[..., idx]


@dataclass
class LatentState:
    pi: np.ndarray
    p: np.ndarray
    R: np.ndarray
    Sigma: np.ndarray
    mu: np.ndarray
    mu1: np.ndarray
    Sigma1: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    z: np.ndarray
    delta: np.ndarray | None = None

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))
        self.R = np.asarray(self.R, dtype=float)
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        self.mu1 = np.asarray(self.mu1, dtype=float)
        self.Sigma1 = np.atleast_2d(np.asarray(self.Sigma1, dtype=float))
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.z = np.asarray(self.z, dtype=int)
        if self.delta is not None:
            self.delta = np.asarray(self.delta, dtype=float)

    @property
    def K(self) -> int:
        return self.pi.size

    def copy(self) -> "LatentState":
        return replace(self, **{f: (None if v is None else np.array(v, copy=True))
                                for f, v in self.__dict__.items()})

    def validate(self) -> None:
        if abs(self.pi.sum() - 1.0) > 1e-10 or np.any(self.pi < 0):
            raise ValueError("pi is not on the simplex")
        if np.any(self.p < 0):
            raise ValueError("peak profiles must be nonnegative")
        if np.any(self.alpha <= 0) or np.any(self.beta <= 0):
            raise ValueError("cell scalings must be positive")
        for s in self.Sigma:
            SpdMatrix(s).check()


@dataclass
class Responsibilities:
    r: np.ndarray

    def __post_init__(self):
        r = np.atleast_2d(np.asarray(self.r, dtype=float))
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("responsibilities must be finite and nonnegative")
        s = r.sum(axis=1, keepdims=True)
        if np.any(s <= 0):
            raise ValueError("responsibility row with zero mass")
        self.r = r / s

    @classmethod
    def from_labels(cls, z, K: int) -> "Responsibilities":
        z = np.asarray(z, dtype=int)
        r = np.zeros((z.size, K))
        r[np.arange(z.size), z] = 1.0
        return cls(r)

    @property
    def counts(self) -> np.ndarray:
        return self.r.sum(axis=0)

    def labels(self) -> np.ndarray:
        return np.argmax(self.r, axis=1)

    def entropy(self) -> float:
        r = self.r
        with np.errstate(divide="ignore", invalid="ignore"):
            return float(-np.sum(np.where(r > 0, r * np.log(r), 0.0)))


# --------------------------------------------------------------------------
# individual factors


def grn_square(Rk: np.ndarray) -> SpdMatrix:
    """Squared symmetrised network ``(R + R^T)^2``, jittered only if singular."""
    h = Rk + Rk.T
    sq = symmetrize(h @ h)
    eps0 = None if np.trace(sq) > 0 else ZERO_RSTAR_EPS
    return jitter_to_psd(sq, eps0)


def cluster_factors(Sigma: np.ndarray) -> list[np.ndarray]:
    return [jitter_to_psd(s).factor() for s in Sigma]


def expression_loglik(X: np.ndarray, state: LatentState, chols=None) -> np.ndarray:
    """n x K matrix of log N(x_j | alpha_j mu_k, beta_j Sigma_k)."""
    d, n = X.shape
    chols = cluster_factors(state.Sigma) if chols is None else chols
    out = np.empty((n, state.K))
    log_beta = np.log(state.beta)
    for k, lk in enumerate(chols):
        diff = X - np.outer(state.mu[k], state.alpha)
        sol = solve_triangular(lk, diff, lower=True)
        q = np.sum(sol * sol, axis=0)
        out[:, k] = -0.5 * (d * LOG_2PI + d * log_beta + logdet_chol(lk) + q / state.beta)
    return out


def log_lik_expression(x: np.ndarray, k: int, state: LatentState, j: int) -> float:
    """log N(x | alpha_j mu_k, beta_j Sigma_k) for a single cell."""
    cov = state.beta[j] * state.Sigma[k]
    return mvn_logpdf_chol(np.asarray(x, dtype=float), state.alpha[j] * state.mu[k], cholesky(cov))


def bulk_mean(state: LatentState) -> np.ndarray:
    return state.pi @ state.p


def log_lik_bulk(c: np.ndarray, state: LatentState, hp: HyperParams) -> float:
    """log N(c | sum_k pi_k p_k, zeta I) for one replicate (or a stack as columns)."""
    c = np.asarray(c, dtype=float)
    resid = c - (bulk_mean(state) if c.ndim == 1 else bulk_mean(state)[:, None])
    l = c.shape[0]
    reps = 1 if c.ndim == 1 else c.shape[1]
    return float(-0.5 * reps * l * np.log(2 * np.pi * hp.zeta) - 0.5 * np.sum(resid**2) / hp.zeta)


def log_prior_R(Rk: np.ndarray, pk: np.ndarray, prior: RegulatoryPrior, hp: HyperParams) -> float:
    """Independent Normal prior on every edge, centred at S * M * p[g]."""
    resid = Rk - prior.prior_mean(pk)
    d2 = Rk.size
    return float(-0.5 * d2 * np.log(2 * np.pi * hp.lam) - 0.5 * np.sum(resid**2) / hp.lam)


def log_prior_Sigma(Sigma_k_inv, Rstar, gamma: float) -> float:
    """Wishart log-density of a cluster precision with scale ``Rstar^{-1}``.

    The prior mean of the precision is ``gamma * Rstar^{-1}``.
    """
    return wishart_logpdf(as_array(Sigma_k_inv), as_array(Rstar), gamma)


def log_prior_sticks(pi: np.ndarray, phi: float) -> float:
    """Stick-breaking Beta(1, phi) prior on the fractions, in logit coordinates."""
    if pi.size == 1:
        return 0.0
    v = stick_fractions(pi)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(phi) + np.log(v) + phi * np.log1p(-v)))


def log_prior_logscale(x: np.ndarray, loc: float, scale: float) -> float:
    """Sum of Normal(loc, scale^2) log-densities of ``log x``."""
    u = np.log(x)
    return float(np.sum(-0.5 * np.log(2 * np.pi * scale**2) - 0.5 * (u - loc) ** 2 / scale**2))


def log_prior_peaks(pk: np.ndarray, hp: HyperParams) -> float:
    """Truncated (at zero) Normal prior with diagonal covariance."""
    if np.any(pk < 0):
        return -np.inf
    var = hp.Lambda_diag
    log_norm = special.log_ndtr(hp.eta / np.sqrt(var))
    return float(np.sum(-0.5 * np.log(2 * np.pi * var) - 0.5 * (pk - hp.eta) ** 2 / var - log_norm))


def log_prior_mu1(mu1: np.ndarray, hp: HyperParams) -> float:
    return mvn_logpdf_chol(mu1, hp.mu2, jitter_to_psd(hp.Sigma2).factor())


def log_prior_Sigma1(Sigma1: np.ndarray, hp: HyperParams) -> float:
    """Wishart(scale=(d Sigma2)^{-1}, dof=d) density of the mean-spread precision."""
    d = hp.d
    return wishart_logpdf(precision(Sigma1), d * hp.Sigma2, float(d))


def log_prior_means(mu: np.ndarray, mu1: np.ndarray, Sigma1: np.ndarray) -> float:
    l1 = jitter_to_psd(Sigma1).factor()
    return float(np.sum(mvn_logpdf_chol(mu, mu1, l1)))


def precision(S: np.ndarray) -> np.ndarray:
    sp = jitter_to_psd(S)
    return sp.inverse()


def log_prior_cluster_precisions(state: LatentState, hp: HyperParams, rstars=None) -> float:
    """Sum over clusters of the Wishart prior on each precision.

    With the scaled variant (``state.delta`` set) the Wishart is placed on
    ``D Sigma_k^{-1} D`` and the change-of-variables term ``(d + 1) sum log|delta|``
    is included.
    """
    total = 0.0
    d = state.mu.shape[1]
    for k in range(state.K):
        rstar = grn_square(state.R[k]) if rstars is None else rstars[k]
        prec = precision(state.Sigma[k])
        if state.delta is not None:
            dk = state.delta[k]
            prec = symmetrize(prec * np.outer(dk, dk))
            total += (d + 1) * float(np.sum(np.log(np.abs(dk))))
        total += log_prior_Sigma(prec, rstar, hp.gamma)
    return total


def log_prior_delta(delta: np.ndarray | None, sd: float) -> float:
    if delta is None:
        return 0.0
    return float(np.sum(-0.5 * np.log(2 * np.pi * sd**2) - 0.5 * (delta - 1.0) ** 2 / sd**2))


# --------------------------------------------------------------------------
# joint density and the EM objective


def objective_terms(state: LatentState, data: Dataset, prior: RegulatoryPrior, hp: HyperParams,
                    resp: Responsibilities | None = None, use_expression: bool = True,
                    delta_sd: float = 0.5) -> dict:
    """Every factor of the joint, keyed by name.

    With ``resp`` the assignment-dependent factors are averaged under the soft
    assignments and the assignment entropy is added, giving the EM lower
    bound. Without it the hard labels ``state.z`` are used.
    """
    r = Responsibilities.from_labels(state.z, state.K).r if resp is None else resp.r
    terms = {}
    if use_expression:
        ll = expression_loglik(data.X, state)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_pi = np.log(state.pi)
        terms["expression"] = float(np.sum(np.where(r > 0, r * ll, 0.0)))
        terms["assignment"] = float(np.sum(np.where(r > 0, r * log_pi[None, :], 0.0)))
        if resp is not None:
            terms["entropy"] = resp.entropy()
    terms["bulk"] = log_lik_bulk(data.C, state, hp)
    terms["sticks"] = log_prior_sticks(state.pi, hp.phi)
    terms["mu1"] = log_prior_mu1(state.mu1, hp)
    terms["Sigma1"] = log_prior_Sigma1(state.Sigma1, hp)
    if use_expression:
        terms["alpha"] = log_prior_logscale(state.alpha, hp.nu, hp.delta)
        terms["beta"] = log_prior_logscale(state.beta, hp.omega, hp.theta)
    terms["mu"] = log_prior_means(state.mu, state.mu1, state.Sigma1)
    terms["Sigma"] = log_prior_cluster_precisions(state, hp)
    if state.delta is not None:
        terms["delta"] = log_prior_delta(state.delta, delta_sd)
    terms["R"] = float(sum(log_prior_R(state.R[k], state.p[k], prior, hp) for k in range(state.K)))
    terms["p"] = float(sum(log_prior_peaks(state.p[k], hp) for k in range(state.K)))
    return terms


def log_joint(state: LatentState, data: Dataset, prior: RegulatoryPrior, hp: HyperParams) -> float:
    """Log joint density at the hard assignment ``state.z``."""
    return float(sum(objective_terms(state, data, prior, hp).values()))


def elbo(state: LatentState, resp: Responsibilities, data: Dataset, prior: RegulatoryPrior,
         hp: HyperParams, **kw) -> float:
    """EM lower bound: expected log joint under ``resp`` plus its entropy.

    All non-assignment blocks are point masses whose entropy is taken as zero.
    """
    return float(sum(objective_terms(state, data, prior, hp, resp=resp, **kw).values()))


# --------------------------------------------------------------------------
# prior construction and diagnostics


def build_sign_matrix(X: np.ndarray) -> np.ndarray:
    """Sign of the empirical gene-gene covariance (0 when it is negligible)."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] < 2:
        raise ValueError("at least two cells are needed")
    cov = np.atleast_2d(np.cov(X))
    S = np.sign(cov)
    S[np.abs(cov) < SIGN_TOL] = 0.0
    return S


@dataclass
class IdentifiabilityReport:
    holds: np.ndarray  # (n, K) all-component check per cell and cluster
    componentwise: np.ndarray = field(repr=False)  # (n, K, d)

    @property
    def fraction(self) -> float:
        return float(self.holds.mean())

    def summary(self) -> dict:
        return {"fraction_holding": self.fraction,
                "cells_all_clusters": int(np.sum(self.holds.all(axis=1))),
                "n": int(self.holds.shape[0])}


def check_identifiability_condition(state: LatentState, hp: HyperParams) -> IdentifiabilityReport:
    """Check mu_k >= mu' + diag(Sigma') (alpha_j - nu) / delta componentwise.

    Diagnostic only; nothing is enforced.
    """
    shift = np.outer((state.alpha - hp.nu) / hp.delta, np.diag(state.Sigma1))  # (n, d)
    bound = state.mu1[None, :] + shift
    comp = state.mu[None, :, :] >= bound[:, None, :]
    return IdentifiabilityReport(comp.all(axis=2), comp)
