"""Assignment updates: soft responsibilities and per-cell MAP labels."""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from ..errors import DofTooSmall
from ..model import Dataset, HyperParams, LatentState, Responsibilities, expression_loglik
from ..numeric import LOG_2PI, digamma, jitter_to_psd, logdet_chol


def expected_log_sticks(counts: np.ndarray, phi: float) -> np.ndarray:
    """E[log pi_k] when stick k follows Beta(1 + N_k, phi + sum_{k' > k} N_k')."""
    K = counts.size
    if K == 1:
        return np.zeros(1)
    tail = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0.0]])
    a = 1.0 + counts[:-1]
    b = phi + tail[:-1]
    e_log_v = digamma(a) - digamma(a + b)
    e_log_1mv = digamma(b) - digamma(a + b)
    out = np.empty(K)
    out[:-1] = e_log_v + np.concatenate([[0.0], np.cumsum(e_log_1mv)[:-1]])
    out[-1] = np.sum(e_log_1mv)
    return out


def log_delta(data: Dataset, state: LatentState, hp: HyperParams, expectations: str = "point",
              counts: np.ndarray | None = None) -> np.ndarray:
    """Unnormalised log responsibilities, n x K.

    ``"point"`` plugs in the current point estimates, giving
    log pi_k + log N(x_j | alpha_j mu_k, beta_j Sigma_k). ``"variational"``
    treats each cluster precision as Wishart with dof gamma + N_k whose mode
    is the current estimate, and the weights as Beta sticks, so the
    log-determinant and log-weight terms become digamma expectations.
    """
    if expectations == "point":
        with np.errstate(divide="ignore"):
            return expression_loglik(data.X, state) + np.log(state.pi)[None, :]
    if expectations != "variational":
        raise ValueError(f"unknown expectations mode {expectations!r}")

    X = data.X
    d, n = X.shape
    K = state.K
    counts = state.pi * n if counts is None else np.asarray(counts, dtype=float)
    log_beta = np.log(state.beta)
    out = np.empty((n, K))
    e_log_pi = expected_log_sticks(counts, hp.phi)
    i = np.arange(1, d + 1)
    for k in range(K):
        dof = hp.gamma + counts[k]
        if dof - d - 1 <= 0:
            raise DofTooSmall(f"gamma + N_k = {dof} leaves no mode for cluster {k}")
        prec_mode = jitter_to_psd(np.linalg.inv(jitter_to_psd(state.Sigma[k]).values))
        # scale V with mode (dof - d - 1) V equal to the point estimate
        logdet_v = prec_mode.logdet() - d * np.log(dof - d - 1)
        e_logdet = np.sum(digamma((dof + 1 - i) / 2.0)) + d * np.log(2.0) + logdet_v
        e_prec = prec_mode.values * dof / (dof - d - 1)
        diff = X - np.outer(state.mu[k], state.alpha)
        quad = np.einsum("in,ij,jn->n", diff, e_prec, diff)
        s1 = 0.5 * (-d * log_beta + e_logdet)
        s2 = 0.5 * quad / state.beta
        out[:, k] = -0.5 * d * LOG_2PI + s1 - s2 + e_log_pi[k]
    return out


def e_step_soft(data: Dataset, state: LatentState, hp: HyperParams, expectations: str = "point",
                counts: np.ndarray | None = None) -> Responsibilities:
    """Soft assignments, row-normalised with log-sum-exp."""
    ld = log_delta(data, state, hp, expectations, counts)
    r = np.exp(ld - logsumexp(ld, axis=1, keepdims=True))
    return Responsibilities(r)


class PrecisionFactors:
    """Cholesky factors of every cluster precision, computed once per sweep.

    With ``Sigma_k^{-1} = U_k U_k^T`` a cell costs O(K d^2): one triangular
    product per cluster instead of a factorisation.
    """

    def __init__(self, state: LatentState):
        self.factors = []
        self.logdets = []
        for s in state.Sigma:
            prec = np.linalg.inv(jitter_to_psd(s).values)
            u = jitter_to_psd(0.5 * (prec + prec.T)).factor()
            self.factors.append(u)
            self.logdets.append(logdet_chol(u))
        self.mu = state.mu
        with np.errstate(divide="ignore"):
            self.log_pi = np.log(state.pi)

    def score(self, x: np.ndarray, alpha: float, beta: float) -> np.ndarray:
        d = x.size
        out = np.empty(len(self.factors))
        for k, u in enumerate(self.factors):
            v = u.T @ (x - alpha * self.mu[k])
            out[k] = 0.5 * (self.logdets[k] - d * np.log(beta) - v @ v / beta) + self.log_pi[k]
        return out


def e_step_map(data: Dataset, state: LatentState, hp: HyperParams | None = None,
               factors: PrecisionFactors | None = None) -> np.ndarray:
    """Per-cell argmax_k log p(x_j | z_j = k) + log pi_k; ties go to the lowest k."""
    factors = PrecisionFactors(state) if factors is None else factors
    X = data.X
    labels = np.empty(X.shape[1], dtype=int)
    for j in range(X.shape[1]):
        labels[j] = int(np.argmax(factors.score(X[:, j], state.alpha[j], state.beta[j])))
    return labels

