"""Outer variational EM loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..baselines import baseline_kmeans
from ..errors import NumericalError
from ..model import (
    Dataset,
    HyperParams,
    LatentState,
    RegulatoryPrior,
    Responsibilities,
    check_identifiability_condition,
    cluster_factors,
    elbo,
    grn_square,
)
from ..numeric import jitter_to_psd
from ..sampling import RngStream
from . import mstep
from .estep import PrecisionFactors, e_step_map, e_step_soft

logger = logging.getLogger(__name__)

MAX_RIDGE_ESCALATIONS = 12
RIDGE_COND_LIMIT = 1e8


@dataclass
class FitConfig:
    K: int = 3
    max_outer_iters: int = 500
    elbo_rel_tol: float = 1e-6
    e_step_mode: str = "soft"  # "soft" or "map"
    e_step_expectations: str = "point"  # "point" or "variational"
    z_update_period: int = 1
    init: str = "kmeans"  # "kmeans", "random" or "provided"
    init_labels: np.ndarray | None = None
    ridge_eps0: float = 1e-2
    learn_M: bool = False
    fixed_z: np.ndarray | None = None
    fixed_pi: np.ndarray | None = None
    r_steps: int = 20
    r_step_size: float = 1e-2
    alpha_newton_iters: int = 50
    mu1_k_squared: bool = False
    scaled_wishart: bool = False
    delta_sd: float = 0.5
    use_expression: bool = True
    seed: int = 0
    kmeans_restarts: int = 10
    # eigenvalue floor for the cluster covariances; None derives it from the
    # pooled within-cluster covariance of the initial labels
    sigma_floor: float | None = None
    sigma_floor_rel: float = 1e-3

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        if not self.elbo_rel_tol > 0:
            raise ValueError("elbo_rel_tol must be positive")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be positive")
        if self.z_update_period < 1:
            raise ValueError("z_update_period must be at least 1")
        if self.e_step_mode not in ("soft", "map"):
            raise ValueError(f"unknown e_step_mode {self.e_step_mode!r}")
        if self.e_step_expectations not in ("point", "variational"):
            raise ValueError(f"unknown e_step_expectations {self.e_step_expectations!r}")
        if self.init not in ("kmeans", "random", "provided"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "provided" and self.init_labels is None:
            raise ValueError("init='provided' needs init_labels")
        if not self.ridge_eps0 > 0 or not self.r_step_size > 0:
            raise ValueError("ridge_eps0 and r_step_size must be positive")


@dataclass
class FitReport:
    elbo_trace: list = field(default_factory=list)
    converged: bool = False
    iterations_run: int = 0
    jitter_events: int = 0
    condition_diagnostics: dict = field(default_factory=dict)
    deviation_flags: list = field(default_factory=list)
    failed_line_searches: dict = field(default_factory=dict)
    objective: str = "elbo"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        return cls(**d)


# --------------------------------------------------------------------------
# initialisation


def _ridge_network(mean: np.ndarray, eps0: float) -> tuple[np.ndarray, float]:
    """Prior-mean network plus the smallest ridge eps0 * 2^i making R + R^T well conditioned."""
    d = mean.shape[0]
    eps = 0.0
    for i in range(MAX_RIDGE_ESCALATIONS + 1):
        R = mean + eps * np.eye(d)
        H = R + R.T
        s = np.linalg.svd(H, compute_uv=False)
        if s.min() > 0 and s.max() / s.min() < RIDGE_COND_LIMIT:
            return R, eps
        eps = eps0 * 2.0**i
    return mean + eps * np.eye(d), eps


def initialise(data: Dataset, prior: RegulatoryPrior, hp: HyperParams, cfg: FitConfig,
               labels: np.ndarray | None = None) -> LatentState:
    """Starting point: weights from label counts, profiles from bulk row means,
    networks from their prior mean (ridged), covariances from the prior mode,
    unit scalings and per-cluster means."""
    K, d, n = cfg.K, data.d, data.n
    z = next(iter(candidate_labels(data, cfg).values())) if labels is None else np.asarray(labels, dtype=int)
    if z.shape != (n,) or z.min() < 0 or z.max() >= K:
        raise ValueError("initial labels must be n integers in [0, K)")
    counts = np.bincount(z, minlength=K).astype(float)
    pi = np.asarray(cfg.fixed_pi, dtype=float) if cfg.fixed_pi is not None else (counts + 1.0) / (n + K)
    p = np.repeat(np.maximum(data.C.mean(axis=1), 0.0)[None, :], K, axis=0)
    R = np.empty((K, d, d))
    for k in range(K):
        R[k], _ = _ridge_network(prior.prior_mean(p[k]), cfg.ridge_eps0)
    mu = np.empty((K, d))
    for k in range(K):
        members = z == k
        mu[k] = data.X[:, members].mean(axis=1) if members.any() else hp.mu2
    Sigma = np.stack([jitter_to_psd(grn_square(R[k]).values / (hp.gamma - d - 1)).values
                      for k in range(K)])
    delta = np.ones((K, d)) if cfg.scaled_wishart else None
    return LatentState(pi=pi, p=p, R=R, Sigma=Sigma, mu=mu, mu1=hp.mu2.copy(),
                       Sigma1=hp.Sigma2.copy(), alpha=np.ones(n), beta=np.ones(n), z=z, delta=delta)


def covariance_floor(data: Dataset, z: np.ndarray, cfg: FitConfig) -> float:
    """Eigenvalue floor for the cluster covariances.

    Per-cell mean scalings let a cluster cancel its residuals along one
    direction, which makes the objective unbounded as that covariance
    eigenvalue goes to zero. The floor keeps the objective bounded; by default
    it is a small fraction of the average within-cluster variance.
    """
    if cfg.sigma_floor is not None:
        return float(cfg.sigma_floor)
    resid = data.X.copy()
    for k in np.unique(z):
        members = z == k
        resid[:, members] -= resid[:, members].mean(axis=1, keepdims=True)
    avg_var = float(np.mean(resid**2))
    return cfg.sigma_floor_rel * avg_var if avg_var > 0 else cfg.sigma_floor_rel


# --------------------------------------------------------------------------
# objective


def _objective(state, resp, data, prior, hp, cfg, M0) -> float:
    kw = dict(use_expression=cfg.use_expression, delta_sd=cfg.delta_sd)
    if cfg.e_step_mode == "map" or cfg.fixed_z is not None:
        val = elbo(state, Responsibilities.from_labels(state.z, state.K), data, prior, hp, **kw)
    else:
        val = elbo(state, resp, data, prior, hp, **kw)
    if M0 is not None:
        val += mstep.log_prior_M(prior.M, M0, prior)
    return val


# --------------------------------------------------------------------------
# one sweep of block updates


def m_sweep(data: Dataset, resp: Responsibilities, state: LatentState, prior: RegulatoryPrior,
            hp: HyperParams, cfg: FitConfig, log: mstep.StepLog, r_sizes: np.ndarray,
            M0: np.ndarray | None = None, floor: float = 0.0):
    """Apply the block updates in order: weights, means, covariances, scalings,
    top-level mean and spread, networks, peaks (and motifs if learned)."""
    r = resp.r
    counts = resp.counts
    K = state.K

    if cfg.use_expression:
        state.pi, state.p = mstep.update_pi(counts, data, state, prior, hp, log, cfg.fixed_pi)
        state.mu = mstep.m_step_mu_k(data, r, state)
        state.Sigma = mstep.m_step_sigma_k(data, r, state, hp, log, floor)
        if state.delta is not None:
            state.delta = mstep.m_step_delta(state, hp, cfg.delta_sd, log)
            state.Sigma = mstep.m_step_sigma_k(data, r, state, hp, log, floor)
        chols = cluster_factors(state.Sigma)
        upd = mstep.m_step_alpha(data, r, state, hp, chols, cfg.alpha_newton_iters)
        state.alpha = upd.values
        log.fail("alpha", int(upd.failed.sum()))
        upd = mstep.m_step_beta(data, r, state, hp, chols, cfg.alpha_newton_iters)
        state.beta = upd.values
        log.fail("beta", int(upd.failed.sum()))
    else:
        # bulk-only ablation: the cluster blocks only see their priors
        state.pi, state.p = mstep.update_pi(np.zeros(K), data, state, prior, hp, log, cfg.fixed_pi)
        state.mu = mstep.m_step_mu_k(data, np.zeros_like(r), state)
        state.Sigma = mstep.m_step_sigma_k(data, np.zeros_like(r), state, hp, log, floor)

    state.mu1 = mstep.m_step_mu1(state, hp, cfg.mu1_k_squared)
    if K > 1:
        state.Sigma1 = mstep.m_step_sigma1(state, hp)

    state.R, r_sizes, _ = mstep.m_step_R(state, prior, hp, cfg.r_steps, r_sizes, log)
    state.p = mstep.m_step_p(data, state, prior, hp)
    if M0 is not None:
        prior.M = mstep.m_step_M(state, prior, hp, M0)
    return r_sizes


# --------------------------------------------------------------------------
# driver


def candidate_labels(data: Dataset, cfg: FitConfig) -> dict:
    """Initial labellings to start EM from.

    ``kmeans`` tries k-means on the raw cells and on the unit-normalised
    cells. The second is blind to the per-cell scaling of the cluster mean,
    which stretches clusters along rays through the origin.
    """
    if cfg.fixed_z is not None:
        return {"fixed": np.asarray(cfg.fixed_z, dtype=int)}
    if cfg.init == "provided":
        return {"provided": np.asarray(cfg.init_labels, dtype=int)}
    if cfg.init == "random" or cfg.K == 1:
        return {"random": RngStream(cfg.seed, 3000).gen.integers(cfg.K, size=data.n)}
    out = {"kmeans": baseline_kmeans(data.X, cfg.K, seed=cfg.seed, n_init=cfg.kmeans_restarts)}
    norms = np.linalg.norm(data.X, axis=0)
    if np.all(norms > 0):
        out["kmeans_direction"] = baseline_kmeans(data.X / norms, cfg.K, seed=cfg.seed,
                                                  n_init=cfg.kmeans_restarts)
    return out


def _run(data, prior, hp, cfg, state, floor):
    prior = replace(prior, M=prior.M.copy()) if cfg.learn_M else prior
    M0 = prior.M.copy() if cfg.learn_M else None
    report = FitReport()
    report.objective = "log_joint" if (cfg.e_step_mode == "map" or cfg.fixed_z is not None) else "elbo"
    log = mstep.StepLog()
    r_sizes = np.full(cfg.K, cfg.r_step_size)

    # warm start: one sweep against the initial hard labels
    resp = Responsibilities.from_labels(state.z, cfg.K)
    r_sizes = m_sweep(data, resp, state, prior, hp, cfg, log, r_sizes, M0, floor)
    prev = None
    for it in range(1, cfg.max_outer_iters + 1):
        refresh = (it - 1) % cfg.z_update_period == 0
        if cfg.fixed_z is not None:
            resp = Responsibilities.from_labels(cfg.fixed_z, cfg.K)
        elif not cfg.use_expression:
            resp = Responsibilities.from_labels(state.z, cfg.K)
        elif cfg.e_step_mode == "map":
            if refresh:
                state.z = e_step_map(data, state, hp, PrecisionFactors(state))
            resp = Responsibilities.from_labels(state.z, cfg.K)
        else:
            resp = e_step_soft(data, state, hp, cfg.e_step_expectations, resp.counts)
            if refresh:
                state.z = resp.labels()
        r_sizes = m_sweep(data, resp, state, prior, hp, cfg, log, r_sizes, M0, floor)
        val = _objective(state, resp, data, prior, hp, cfg, M0)
        if not np.isfinite(val):
            raise NumericalError(f"objective became non-finite at iteration {it}")
        report.elbo_trace.append(float(val))
        report.iterations_run = it
        if prev is not None and abs(val - prev) <= cfg.elbo_rel_tol * max(abs(prev), 1.0):
            report.converged = True
            break
        prev = val

    if cfg.fixed_z is None and cfg.use_expression and cfg.e_step_mode == "soft":
        state.z = resp.labels()
    report.jitter_events = log.jitter_events
    report.failed_line_searches = dict(log.failed_line_searches)
    if cfg.learn_M:
        report.condition_diagnostics["learned_M"] = prior.M.tolist()
    return state, resp, report


def fit(data: Dataset, prior: RegulatoryPrior, hp: HyperParams, cfg: FitConfig | None = None,
        init_state: LatentState | None = None):
    """Variational EM. Returns ``(state, responsibilities, report)``.

    The trace records the objective after every sweep: the EM lower bound in
    soft mode and the complete-data log joint when labels are hard (MAP E-step
    or fixed clustering). With several initial labellings EM is run from each
    and the run with the highest final objective is returned (earliest on ties).
    """
    cfg = FitConfig() if cfg is None else cfg
    if prior.d != data.d or prior.l != data.l or hp.d != data.d or hp.l != data.l:
        raise ValueError("data, prior and hyperparameter dimensions disagree")
    if cfg.fixed_z is not None and np.asarray(cfg.fixed_z).shape != (data.n,):
        raise ValueError("fixed_z must have one label per cell")

    if init_state is not None:
        starts = {"state": init_state.copy()}
    else:
        starts = {name: initialise(data, prior, hp, cfg, labels)
                  for name, labels in candidate_labels(data, cfg).items()}
    first = next(iter(starts.values()))
    floor = covariance_floor(data, first.z, cfg) if cfg.use_expression else 0.0

    best = None
    finals = {}
    for name, state in starts.items():
        result = _run(data, prior, hp, cfg, state, floor)
        finals[name] = result[2].elbo_trace[-1]
        if best is None or finals[name] > best[2].elbo_trace[-1]:
            best = result
            best_name = name
    state, resp, report = best

    report.condition_diagnostics["sigma_floor"] = floor
    report.condition_diagnostics["init"] = best_name
    report.condition_diagnostics["init_objectives"] = finals
    report.deviation_flags.append("Sigma1 update uses the scatter of cluster means about mu'")
    if cfg.mu1_k_squared:
        report.deviation_flags.append("mu' update uses K^2 weighting (not a block maximiser)")
    if cfg.e_step_expectations == "variational":
        report.deviation_flags.append("variational E-step expectations use gamma + N_k and stick posteriors")
    if cfg.K == 1:
        report.deviation_flags.append("Sigma1 kept at its initial value: no posterior mode for K = 1")
    if cfg.use_expression:
        report.condition_diagnostics.update(check_identifiability_condition(state, hp).summary())
    logger.debug("fit finished after %d iterations (converged=%s)", report.iterations_run, report.converged)
    return state, resp, report
