"""Block updates of the point-estimated latents.

Every update maximises the EM objective over its own block with everything
else held fixed, so a full sweep never lowers the objective. Closed forms are
used where the block's log-density is a recognisable family; the cell scalings
use safeguarded Newton, the networks projected gradient ascent and the peak
profiles an exact per-region bound-constrained quadratic solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import nnls

from ..errors import DofTooSmall, NotPositiveDefinite
from ..model import (
    Dataset,
    HyperParams,
    LatentState,
    RegulatoryPrior,
    cluster_factors,
    grn_square,
    log_lik_bulk,
    log_prior_peaks,
    log_prior_R,
    log_prior_Sigma,
    log_prior_sticks,
    precision,
)
from ..numeric import jitter_to_psd, stick_break, stick_fractions, symmetrize

EMPTY_CLUSTER = 1e-8
M_RELAX_VAR = 1e-4


@dataclass
class StepLog:
    """Bookkeeping shared by the updates of one sweep."""

    jitter_events: int = 0
    failed_line_searches: dict = field(default_factory=dict)

    def fail(self, block: str, count: int = 1):
        if count:
            self.failed_line_searches[block] = self.failed_line_searches.get(block, 0) + int(count)


def _precisions(Sigma: np.ndarray) -> np.ndarray:
    return np.stack([precision(s) for s in Sigma])


def _whitened(data: Dataset, state: LatentState, chols=None):
    """Cells and means whitened by each cluster's covariance factor.

    Returns ``(wmu, wx)`` with ``wmu[k] = L_k^{-1} mu_k`` and ``wx[k] = L_k^{-1} X``
    where ``Sigma_k = L_k L_k^T``; quadratic forms built from these match the
    ones in the expression likelihood.
    """
    chols = cluster_factors(state.Sigma) if chols is None else chols
    wmu = np.stack([solve_triangular(L, m, lower=True) for L, m in zip(chols, state.mu)])
    wx = np.stack([solve_triangular(L, data.X, lower=True) for L in chols])
    return wmu, wx


# --------------------------------------------------------------------------
# b: mixing weights


def stick_posterior_fractions(counts: np.ndarray, phi: float) -> np.ndarray:
    """v_k = (1 + N_k) / (1 + phi + N_k + sum_{k' > k} N_k')."""
    counts = np.asarray(counts, dtype=float)
    tail = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0.0]])
    return (1.0 + counts[:-1]) / (1.0 + phi + counts[:-1] + tail[:-1])


def m_step_pi(counts: np.ndarray, phi: float, fixed_pi: np.ndarray | None = None) -> np.ndarray:
    """Mixing weights from soft counts under Beta(1, phi) sticks."""
    if fixed_pi is not None:
        return np.asarray(fixed_pi, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if counts.size == 1:
        return np.array([1.0])
    return stick_break(stick_posterior_fractions(counts, phi))


def pi_objective(pi: np.ndarray, counts: np.ndarray, data: Dataset, state: LatentState,
                 hp: HyperParams, prior: RegulatoryPrior | None = None, p: np.ndarray | None = None) -> float:
    """Objective terms in the weights (and, with ``prior``, in the peak profiles ``p``)."""
    with np.errstate(divide="ignore"):
        val = float(np.sum(np.where(counts > 0, counts * np.log(pi), 0.0)))
    val += log_prior_sticks(pi, hp.phi)
    trial = state.copy()
    trial.pi = pi
    if p is not None:
        trial.p = p
    if prior is None:
        return val + log_lik_bulk(data.C, trial, hp)
    return val + p_objective(trial.p, data, trial, prior, hp)


def update_pi(counts, data: Dataset, state: LatentState, prior: RegulatoryPrior, hp: HyperParams,
              log: StepLog, fixed_pi=None, halvings: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Joint step on (weights, profiles).

    The bulk term couples the weights to the peak profiles, so the count-based
    stick update is paired with the exact profile update for those weights.
    The pair is accepted when the joint objective does not decrease; otherwise
    the logit-space segment towards the candidate is bisected, and the current
    pair is kept if nothing on it improves. Returns ``(pi, p)``.
    """
    cand = m_step_pi(counts, hp.phi, fixed_pi)
    if fixed_pi is not None or state.K == 1:
        return cand, state.p.copy()

    def profiles(pi):
        trial = state.copy()
        trial.pi = pi
        return m_step_p(data, trial, prior, hp)

    f0 = pi_objective(state.pi, counts, data, state, hp, prior)
    p_c = profiles(cand)
    if pi_objective(cand, counts, data, state, hp, prior, p_c) >= f0:
        return cand, p_c
    t0 = _logit(state.pi)
    t1 = _logit(cand)
    step = 0.5
    for _ in range(halvings):
        trial = stick_break(_expit(t0 + step * (t1 - t0)))
        p_t = profiles(trial)
        if pi_objective(trial, counts, data, state, hp, prior, p_t) >= f0:
            return trial, p_t
        step *= 0.5
    log.fail("pi")
    return state.pi.copy(), state.p.copy()


def _logit(pi: np.ndarray) -> np.ndarray:
    v = np.clip(stick_fractions(pi), 1e-300, 1 - 1e-16)
    return np.log(v) - np.log1p(-v)


def _expit(t: np.ndarray) -> np.ndarray:
    v = 1.0 / (1.0 + np.exp(-t))
    return np.clip(v, 1e-300, 1 - 1e-16)


# --------------------------------------------------------------------------
# c: cluster means


def m_step_mu_k(data: Dataset, r: np.ndarray, state: LatentState, precs=None) -> np.ndarray:
    """Closed-form means: Gaussian likelihood in mu_k times the N(mu', Sigma') prior."""
    precs = _precisions(state.Sigma) if precs is None else precs
    prec1 = precision(state.Sigma1)
    X = data.X
    w_quad = state.alpha**2 / state.beta
    w_lin = state.alpha / state.beta
    out = np.empty_like(state.mu)
    for k in range(state.K):
        a = float(r[:, k] @ w_quad)
        b = X @ (r[:, k] * w_lin)
        lhs = a * precs[k] + prec1
        rhs = precs[k] @ b + prec1 @ state.mu1
        out[k] = jitter_to_psd(symmetrize(lhs)).solve(rhs)
    return out


# --------------------------------------------------------------------------
# d: cluster covariances


def weighted_scatter(data: Dataset, r_k: np.ndarray, mu_k: np.ndarray, alpha, beta) -> np.ndarray:
    diff = data.X - np.outer(mu_k, alpha)
    w = r_k / beta
    return symmetrize((diff * w) @ diff.T)


def m_step_sigma_k(data: Dataset, r: np.ndarray, state: LatentState, hp: HyperParams,
                   log: StepLog | None = None, floor: float = 0.0) -> np.ndarray:
    """Sigma_k = (R*_k + weighted scatter) / (gamma + N_k - d - 1).

    With the scaled variant (``state.delta`` set) the prior term becomes
    ``D R*_k D`` with ``D = diag(delta_k)``. A positive ``floor`` bounds the
    eigenvalues of Sigma_k from below; the eigenvalue-clipped matrix is the
    exact maximiser over that constraint set because the objective depends on
    Sigma_k only through its eigenvalues in the eigenbasis of the numerator.
    """
    d = data.d
    out = np.empty_like(state.Sigma)
    for k in range(state.K):
        nk = float(r[:, k].sum())
        dof = hp.gamma + nk - d - 1
        if dof <= 0:
            raise DofTooSmall(f"gamma + N_k - d - 1 = {dof} for cluster {k}")
        rstar = grn_square(state.R[k]).values
        if state.delta is not None:
            rstar = rstar * np.outer(state.delta[k], state.delta[k])
        s = weighted_scatter(data, r[:, k], state.mu[k], state.alpha, state.beta)
        sig = symmetrize((rstar + s) / dof)
        if floor > 0:
            w, U = np.linalg.eigh(sig)
            if w.min() < floor:
                sig = symmetrize((U * np.maximum(w, floor)) @ U.T)
        sp = jitter_to_psd(sig)
        if sp.jitter and log is not None:
            log.jitter_events += 1
        out[k] = sp.values
    return out


def delta_objective(dk: np.ndarray, rstar: np.ndarray, prec: np.ndarray, gamma: float, sd: float) -> float:
    if np.any(dk <= 0):
        return -np.inf
    return float(gamma * np.sum(np.log(dk)) - 0.5 * dk @ (rstar * prec) @ dk
                 - 0.5 * np.sum((dk - 1.0) ** 2) / sd**2)


def delta_gradient(dk, rstar, prec, gamma, sd):
    return gamma / dk - (rstar * prec) @ dk - (dk - 1.0) / sd**2


def m_step_delta(state: LatentState, hp: HyperParams, sd: float, log: StepLog,
                 iters: int = 50) -> np.ndarray:
    """Diagonal scalings of the scaled Wishart prior by damped Newton.

    The objective is strictly concave on the positive orthant, so each accepted
    Newton step increases it; backtracking keeps the iterate positive.
    """
    out = state.delta.copy()
    for k in range(state.K):
        rstar = grn_square(state.R[k]).values
        prec = precision(state.Sigma[k])
        m = rstar * prec
        dk = out[k].copy()
        f = delta_objective(dk, rstar, prec, hp.gamma, sd)
        for _ in range(iters):
            g = delta_gradient(dk, rstar, prec, hp.gamma, sd)
            H = -(m + np.diag(hp.gamma / dk**2 + 1.0 / sd**2))
            step = -np.linalg.solve(H, g)
            t = 1.0
            improved = False
            for _ in range(40):
                trial = dk + t * step
                ft = delta_objective(trial, rstar, prec, hp.gamma, sd)
                if ft >= f:
                    improved = ft > f
                    dk, f = trial, ft
                    break
                t *= 0.5
            if not improved:
                break
        out[k] = dk
    return out


# --------------------------------------------------------------------------
# e, f: cell scalings


def _newton_maximise(f, grad, hess, u0: np.ndarray, iters: int, tol: float = 1e-12):
    """Vectorised safeguarded Newton for independent 1-D problems.

    Uses the Newton direction where the curvature is negative and a gradient
    step otherwise, then backtracks each coordinate until its value does not
    decrease. Returns the iterates, the per-iteration objective sums and a
    per-coordinate flag for failed line searches.
    """
    u = u0.copy()
    fu = f(u)
    trace = [float(fu.sum())]
    failed = np.zeros(u.shape, dtype=bool)
    active = np.ones(u.shape, dtype=bool)
    for _ in range(iters):
        g = grad(u)
        h = hess(u)
        step = np.where(h < 0, -g / np.where(h < 0, h, -1.0), g)
        step = np.clip(step, -2.0, 2.0)
        step[~active] = 0.0
        t = np.ones_like(u)
        done = ~active | (np.abs(step) < tol)
        new_u = u.copy()
        new_f = fu.copy()
        for _ in range(60):
            if done.all():
                break
            trial = u + t * step
            ft = f(trial)
            ok = ~done & (ft >= fu)
            new_u[ok] = trial[ok]
            new_f[ok] = ft[ok]
            done |= ok
            t = np.where(done, t, 0.5 * t)
        failed |= ~done
        active &= done & (np.abs(new_u - u) > tol)
        u, fu = new_u, new_f
        trace.append(float(fu.sum()))
        if not active.any():
            break
    return u, trace, failed


@dataclass
class ScalarUpdate:
    values: np.ndarray
    trace: list
    failed: np.ndarray


def alpha_objective(u: np.ndarray, A: np.ndarray, B: np.ndarray, nu: float, delta: float) -> np.ndarray:
    """Per-cell objective in u = log alpha: -A e^{2u}/2 + B e^u - (u - nu)^2 / (2 delta^2)."""
    e = np.exp(u)
    return -0.5 * A * e * e + B * e - 0.5 * (u - nu) ** 2 / delta**2


def alpha_gradient(u, A, B, nu, delta):
    e = np.exp(u)
    return -A * e * e + B * e - (u - nu) / delta**2


def alpha_curvature(u, A, B, nu, delta):
    e = np.exp(u)
    return -2.0 * A * e * e + B * e - 1.0 / delta**2


def alpha_coefficients(data: Dataset, r: np.ndarray, state: LatentState, chols=None):
    """Per-cell ``A_j = sum_k r_jk mu_k' P_k mu_k / beta_j`` and ``B_j = sum_k r_jk mu_k' P_k x_j / beta_j``."""
    wmu, wx = _whitened(data, state, chols)
    A = np.sum(wmu * wmu, axis=1)[None, :]  # (1, K)
    B = np.einsum("kd,kdn->nk", wmu, wx)
    return np.sum(r * A, axis=1) / state.beta, np.sum(r * B, axis=1) / state.beta


def m_step_alpha(data: Dataset, r: np.ndarray, state: LatentState, hp: HyperParams,
                 chols=None, iters: int = 50) -> ScalarUpdate:
    """Per-cell maximisation over log alpha_j by safeguarded Newton.

    Two starts are run, the current value and the prior mode, and the better
    end point is kept; the first start alone already guarantees no decrease.
    """
    A, B = alpha_coefficients(data, r, state, chols)
    nu, dl = hp.nu, hp.delta

    def f(u):
        return alpha_objective(u, A, B, nu, dl)

    def g(u):
        return alpha_gradient(u, A, B, nu, dl)

    def h(u):
        return alpha_curvature(u, A, B, nu, dl)

    u_cur = np.log(state.alpha)
    u1, trace, failed = _newton_maximise(f, g, h, u_cur, iters)
    u2, _, _ = _newton_maximise(f, g, h, np.full_like(u_cur, nu), iters)
    better = f(u2) > f(u1)
    u = np.where(better, u2, u1)
    trace.append(float(f(u).sum()))
    return ScalarUpdate(np.exp(u), trace, failed & ~better)


def beta_objective(u: np.ndarray, Q: np.ndarray, d: int, omega: float, theta: float) -> np.ndarray:
    """Per-cell objective in u = log beta: -(d/2) u - Q e^{-u}/2 - (u - omega)^2 / (2 theta^2)."""
    return -0.5 * d * u - 0.5 * Q * np.exp(-u) - 0.5 * (u - omega) ** 2 / theta**2


def beta_gradient(u, Q, d, omega, theta):
    return -0.5 * d + 0.5 * Q * np.exp(-u) - (u - omega) / theta**2


def beta_curvature(u, Q, d, omega, theta):
    return -0.5 * Q * np.exp(-u) - 1.0 / theta**2


def beta_coefficients(data: Dataset, r: np.ndarray, state: LatentState, chols=None) -> np.ndarray:
    """Per-cell ``Q_j = sum_k r_jk (x_j - alpha_j mu_k)' P_k (x_j - alpha_j mu_k)``."""
    wmu, wx = _whitened(data, state, chols)
    resid = wx - wmu[:, :, None] * state.alpha[None, None, :]
    return np.sum(r * np.sum(resid * resid, axis=1).T, axis=1)


def m_step_beta(data: Dataset, r: np.ndarray, state: LatentState, hp: HyperParams,
                chols=None, iters: int = 50) -> ScalarUpdate:
    """Per-cell maximisation over log beta_j; the objective is strictly concave."""
    Q = beta_coefficients(data, r, state, chols)
    d = data.d
    om, th = hp.omega, hp.theta
    dw = d * np.sum(r, axis=1)  # every row sums to one; the weight keeps the d-term explicit

    def f(u):
        return beta_objective(u, Q, dw, om, th)

    def g(u):
        return beta_gradient(u, Q, dw, om, th)

    def h(u):
        return beta_curvature(u, Q, dw, om, th)

    u, trace, failed = _newton_maximise(f, g, h, np.log(state.beta), iters)
    return ScalarUpdate(np.exp(u), trace, failed)


# --------------------------------------------------------------------------
# g, h: top-level mean and spread


def m_step_mu1(state: LatentState, hp: HyperParams, k_squared: bool = False) -> np.ndarray:
    """Gaussian update of mu' from the cluster means.

    The conjugate weight on the spread precision is K; ``k_squared`` switches to
    K^2 for comparison (that variant is not a block maximiser).
    """
    K = state.K
    if K == 0:
        return hp.mu2.copy()
    w = float(K * K if k_squared else K)
    prec2 = precision(hp.Sigma2)
    prec1 = precision(state.Sigma1)
    lhs = prec2 + w * prec1
    rhs = prec2 @ hp.mu2 + w * prec1 @ state.mu.mean(axis=0)
    return cho_solve(cho_factor(symmetrize(lhs), lower=True), rhs)


def m_step_sigma1(state: LatentState, hp: HyperParams) -> np.ndarray:
    """Mode of the Wishart posterior of the spread precision (dof d + K).

    The scatter of the cluster means about mu' is the sufficient statistic.
    """
    d, K = hp.d, state.K
    dof = K - 1.0
    if dof <= 0:
        raise DofTooSmall(f"posterior dof d + K = {d + K} has no mode in dimension {d}")
    diff = state.mu - state.mu1[None, :]
    scatter = diff.T @ diff
    return jitter_to_psd(symmetrize((d * hp.Sigma2 + scatter) / dof)).values


# --------------------------------------------------------------------------
# i: regulatory networks


def r_objective(Rk: np.ndarray, prec: np.ndarray, pk: np.ndarray, prior: RegulatoryPrior,
                hp: HyperParams) -> float:
    """Terms of the objective that involve R_k: Wishart prior of the precision plus edge prior."""
    try:
        rstar = grn_square(Rk)
    except NotPositiveDefinite:
        return -np.inf
    return log_prior_Sigma(prec, rstar, hp.gamma) + log_prior_R(Rk, pk, prior, hp)


def r_gradient(Rk: np.ndarray, prec: np.ndarray, pk: np.ndarray, prior: RegulatoryPrior,
               hp: HyperParams) -> np.ndarray:
    """Analytic gradient of :func:`r_objective` (exact when H = R + R^T is nonsingular)."""
    H = Rk + Rk.T
    G = H @ prec + prec @ H
    return -G + 2.0 * hp.gamma * np.linalg.inv(H) - (Rk - prior.prior_mean(pk)) / hp.lam


def _effective_precisions(state: LatentState) -> np.ndarray:
    precs = _precisions(state.Sigma)
    if state.delta is not None:
        precs = precs * state.delta[:, :, None] * state.delta[:, None, :]
    return precs


def m_step_R(state: LatentState, prior: RegulatoryPrior, hp: HyperParams, steps: int = 20,
             step_size: float | np.ndarray = 1e-2, log: StepLog | None = None):
    """Gradient ascent on every R_k with step halving and growth.

    A step is accepted only if the objective does not decrease; after an
    accepted step the step size grows by 1.5, after a rejected one it halves.
    Returns ``(R, step_sizes, traces)``.
    """
    precs = _effective_precisions(state)
    K = state.K
    sizes = np.broadcast_to(np.asarray(step_size, dtype=float), (K,)).copy()
    R = state.R.copy()
    traces = []
    for k in range(K):
        Rk = R[k]
        f = r_objective(Rk, precs[k], state.p[k], prior, hp)
        trace = [f]
        for _ in range(steps):
            g = r_gradient(Rk, precs[k], state.p[k], prior, hp)
            accepted = False
            for _ in range(50):
                trial = Rk + sizes[k] * g
                ft = r_objective(trial, precs[k], state.p[k], prior, hp)
                if ft >= f:
                    Rk, f = trial, ft
                    sizes[k] *= 1.5
                    accepted = True
                    break
                sizes[k] *= 0.5
            if not accepted:
                if log is not None:
                    log.fail("R")
                break
            trace.append(f)
        R[k] = Rk
        traces.append(trace)
    return R, sizes, traces


# --------------------------------------------------------------------------
# j: peak profiles


def _edge_sums(state: LatentState, prior: RegulatoryPrior):
    """A_m = sum of squared edge coefficients per region, B_km = sum a_e R_k[e]."""
    coef = prior.coef
    mask = (prior.region >= 0) & (coef != 0)
    regions = prior.region[mask]
    a = coef[mask]
    A = np.bincount(regions, weights=a * a, minlength=prior.l)
    B = np.stack([np.bincount(regions, weights=a * state.R[k][mask], minlength=prior.l)
                  for k in range(state.K)])
    return A, B


def p_system(data: Dataset, state: LatentState, prior: RegulatoryPrior, hp: HyperParams,
             use_bulk: bool = True):
    """Per-region quadratic ``-0.5 p' P_m p + h_m' p`` over the K profile values.

    Returns ``P`` (l, K, K) and ``h`` (l, K).
    """
    K, l = state.K, data.l
    A, B = _edge_sums(state, prior)
    reps = data.r
    cbar = data.C.mean(axis=1)
    pi = state.pi
    diag = 1.0 / hp.Lambda_diag + A / hp.lam  # (l,)
    P = np.zeros((l, K, K))
    P[:, np.arange(K), np.arange(K)] = diag[:, None]
    h = (hp.eta / hp.Lambda_diag)[:, None] + B.T / hp.lam
    if use_bulk:
        P += (reps / hp.zeta) * np.outer(pi, pi)[None, :, :]
        h += (reps / hp.zeta) * cbar[:, None] * pi[None, :]
    return P, h


def p_objective(p: np.ndarray, data: Dataset, state: LatentState, prior: RegulatoryPrior,
                hp: HyperParams) -> float:
    """Terms in the peak profiles: bulk likelihood, edge prior and truncated prior."""
    trial = state.copy()
    trial.p = p
    val = log_lik_bulk(data.C, trial, hp)
    val += sum(log_prior_R(state.R[k], p[k], prior, hp) for k in range(state.K))
    val += sum(log_prior_peaks(p[k], hp) for k in range(state.K))
    return float(val)


def p_gradient(p: np.ndarray, data: Dataset, state: LatentState, prior: RegulatoryPrior,
               hp: HyperParams) -> np.ndarray:
    P, h = p_system(data, state, prior, hp)
    return (h - np.einsum("mab,bm->ma", P, p)).T


def m_step_p(data: Dataset, state: LatentState, prior: RegulatoryPrior, hp: HyperParams) -> np.ndarray:
    """Exact maximiser over p >= 0, one K x K bound-constrained problem per region.

    The unconstrained optimum is found by a batched solve; regions with a
    negative component are re-solved as nonnegative least squares through the
    Cholesky factor of P_m.
    """
    P, h = p_system(data, state, prior, hp)
    sol = np.linalg.solve(P, h[:, :, None])[:, :, 0]
    for m in np.flatnonzero(np.any(sol < 0, axis=1)):
        L = np.linalg.cholesky(P[m])
        target = np.linalg.solve(L, h[m])
        sol[m], _ = nnls(L.T, target)
    return np.maximum(sol, 0.0).T


# --------------------------------------------------------------------------
# optional: relaxed motif indicators


def m_step_M(state: LatentState, prior: RegulatoryPrior, hp: HyperParams, M0: np.ndarray,
             var: float = M_RELAX_VAR) -> np.ndarray:
    """Closed-form update of relaxed motif indicators under N(M0, var) priors.

    Only mapped pairs are free; each is a 1-D quadratic combining the edge
    prior over all clusters with the tight relaxation prior.
    """
    mask = prior.region >= 0
    idx = np.where(mask, prior.region, 0)
    sp = prior.S[None, :, :] * state.p[:, idx]  # (K, d, d)
    num = np.sum(sp * state.R, axis=0) / hp.lam + M0 / var
    den = np.sum(sp * sp, axis=0) / hp.lam + 1.0 / var
    return np.where(mask, num / den, 0.0)


def log_prior_M(M: np.ndarray, M0: np.ndarray, prior: RegulatoryPrior, var: float = M_RELAX_VAR) -> float:
    mask = prior.region >= 0
    resid = (M - M0)[mask]
    return float(np.sum(-0.5 * np.log(2 * np.pi * var) - 0.5 * resid**2 / var))
