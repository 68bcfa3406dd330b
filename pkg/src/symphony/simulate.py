"""Forward sampling of complete synthetic datasets with their ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Dataset, Dims, HyperParams, LatentState, RegulatoryPrior, grn_square
from .numeric import SpdMatrix, jitter_to_psd, stick_break, symmetrize
from .sampling import RngStream, sample_trunc_normal, sample_wishart_bartlett

# stream ids, one per block of the generative process
_STREAMS = dict(prior=1, pi=2, p=3, R=4, Sigma=5, mu1=6, Sigma1=7, mu=8, alpha=9, beta=10,
                z=11, X=12, C=13)


@dataclass
class SimConfig:
    dims: Dims = field(default_factory=lambda: Dims(n=100, d=10, l=50, r=3, K=3))
    hp: HyperParams | None = None
    prior: RegulatoryPrior | None = None
    motif_density: float = 0.3
    sign_density: float = 0.5
    noise_free: bool = False
    seed: int = 0
    # rejection bound on the sampled weights, keeps every cluster populated;
    # None means min(0.15, 0.5 / K)
    min_weight: float | None = None
    max_pi_draws: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.motif_density <= 1.0:
            raise ValueError("motif_density must lie in [0, 1]")
        if not 0.0 <= self.sign_density <= 1.0:
            raise ValueError("sign_density must lie in [0, 1]")
        if self.min_weight is None:
            self.min_weight = min(0.15, 0.5 / self.dims.K)
        if self.min_weight * self.dims.K >= 1.0:
            raise ValueError("min_weight too large for K clusters")
        if self.hp is None:
            self.hp = HyperParams.simulation_default(self.dims.d, self.dims.l)


@dataclass
class GroundTruth:
    state: LatentState
    dataset: Dataset
    prior: RegulatoryPrior
    hp: HyperParams
    config: SimConfig


def random_regulatory_prior(d: int, l: int, motif_density: float, sign_density: float,
                            rng: RngStream) -> RegulatoryPrior:
    """Random motif matrix with a round-robin region per motif edge.

    Signs are symmetric in the gene pair and zero wherever no motif is present.
    """
    gen = rng.gen
    M = (gen.uniform(size=(d, d)) < motif_density).astype(float)
    np.fill_diagonal(M, 0.0)
    signs = np.where(gen.uniform(size=(d, d)) < sign_density, 1.0, -1.0)
    signs = np.triu(signs, 1)
    signs = signs + signs.T
    S = signs * M
    region = -np.ones((d, d), dtype=int)
    for t, (i, i2) in enumerate(np.argwhere(M > 0)):
        region[i, i2] = t % l
    return RegulatoryPrior(region, M, S, l)


def sample_pi(K: int, phi: float, rng: RngStream, min_weight: float = 0.0, max_draws: int = 1000):
    gen = rng.gen
    for _ in range(max_draws):
        v = np.clip(gen.beta(1.0, phi, size=K - 1), 1e-12, 1 - 1e-12)
        pi = stick_break(v)
        if pi.min() >= min_weight:
            return pi
    raise RuntimeError("could not draw weights satisfying min_weight")


def sample_cluster_precision(Rk: np.ndarray, gamma: float, rng: RngStream) -> np.ndarray:
    """Sigma_k^{-1} ~ Wishart((R + R^T)^{-2}, gamma)."""
    rstar = grn_square(Rk)
    scale = jitter_to_psd(rstar.inverse())
    return sample_wishart_bartlett(scale, gamma, rng).values


def simulate(cfg: SimConfig) -> GroundTruth:
    dims, hp = cfg.dims, cfg.hp
    n, d, l, r, K = dims.n, dims.d, dims.l, dims.r, dims.K
    streams = {name: RngStream(cfg.seed, sid) for name, sid in _STREAMS.items()}

    prior = cfg.prior
    if prior is None:
        prior = random_regulatory_prior(d, l, cfg.motif_density, cfg.sign_density, streams["prior"])

    pi = np.array([1.0]) if K == 1 else sample_pi(K, hp.phi, streams["pi"], cfg.min_weight,
                                                   cfg.max_pi_draws)
    p = np.stack([sample_trunc_normal(hp.eta, hp.Lambda_diag, 0.0, streams["p"]) for _ in range(K)])

    R = prior.prior_mean(p) + np.sqrt(hp.lam) * streams["R"].gen.standard_normal((K, d, d))
    prec = np.stack([sample_cluster_precision(R[k], hp.gamma, streams["Sigma"]) for k in range(K)])
    Sigma = np.stack([jitter_to_psd(np.linalg.inv(prec[k])).values for k in range(K)])
    Sigma = symmetrize(Sigma)

    mu1 = streams["mu1"].gen.multivariate_normal(hp.mu2, hp.Sigma2)
    prec1 = sample_wishart_bartlett(SpdMatrix(np.linalg.inv(d * hp.Sigma2)), float(d),
                                    streams["Sigma1"])
    Sigma1 = symmetrize(np.linalg.inv(prec1.values))
    l1 = jitter_to_psd(Sigma1).factor()
    mu = mu1[None, :] + streams["mu"].gen.standard_normal((K, d)) @ l1.T

    alpha = np.exp(hp.nu + hp.delta * streams["alpha"].gen.standard_normal(n))
    beta = np.exp(hp.omega + hp.theta * streams["beta"].gen.standard_normal(n))
    z = streams["z"].gen.choice(K, size=n, p=pi)

    X = np.empty((d, n))
    eps = streams["X"].gen.standard_normal((d, n))
    chols = [jitter_to_psd(s).factor() for s in Sigma]
    for j in range(n):
        k = z[j]
        X[:, j] = alpha[j] * mu[k] + np.sqrt(beta[j]) * (chols[k] @ eps[:, j])

    mean_c = pi @ p
    if cfg.noise_free:
        C = np.repeat(mean_c[:, None], r, axis=1)
    else:
        C = mean_c[:, None] + np.sqrt(hp.zeta) * streams["C"].gen.standard_normal((l, r))
        # the bulk view is log peak height + 1 and must stay nonnegative
        C = np.maximum(C, 0.0)

    state = LatentState(pi=pi, p=p, R=R, Sigma=Sigma, mu=mu, mu1=mu1, Sigma1=Sigma1,
                        alpha=alpha, beta=beta, z=z)
    return GroundTruth(state, Dataset(X, C), prior, hp, cfg)


def simulate_bulk_from_sorted(p_hat: np.ndarray, pi: np.ndarray, zeta: float, r: int,
                              rng) -> np.ndarray:
    """Mix sorted-population profiles into ``r`` synthetic bulk replicates.

    Returns an l x r matrix of draws from N(sum_k pi_k p_hat_k, zeta I).
    """
    p_hat = np.atleast_2d(np.asarray(p_hat, dtype=float))
    pi = np.asarray(pi, dtype=float)
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-10:
        raise ValueError("pi must lie on the simplex")
    mean = pi @ p_hat
    if zeta == 0:
        return np.repeat(mean[:, None], r, axis=1)
    gen = rng.gen if isinstance(rng, RngStream) else np.random.default_rng(rng)
    return mean[:, None] + np.sqrt(zeta) * gen.standard_normal((mean.size, r))


def covariance_sign_variability_demo(seed: int = 0, d: int = 6, K: int = 3, gamma: float | None = None,
                                     max_reseeds: int = 100, same_p: bool = False):
    """Covariances of K clusters that share one sign and motif matrix.

    Each cluster gets its own peak profile, so regulatory strengths differ and
    some covariance entries change sign between clusters. Reseeds until a sign
    flip appears. With ``same_p`` every cluster shares one profile and one
    network, the degenerate case without flips. Returns ``(Sigma, seed_used)``.
    """
    l = d * d
    hp = HyperParams.simulation_default(d, l)
    gamma = hp.gamma if gamma is None else gamma
    for attempt in range(max_reseeds):
        s = seed + attempt
        prior = random_regulatory_prior(d, l, 0.5, 0.5, RngStream(s, 1))
        prng = RngStream(s, 2)
        if same_p:
            p0 = sample_trunc_normal(hp.eta, hp.Lambda_diag, 0.0, prng)
            p = np.stack([p0] * K)
        else:
            p = np.stack([sample_trunc_normal(hp.eta, hp.Lambda_diag, 0.0, prng) for _ in range(K)])
        noise = np.sqrt(hp.lam) * RngStream(s, 3).gen.standard_normal((K, d, d))
        if same_p:
            noise[:] = noise[0]
        R = prior.prior_mean(p) + noise
        srng = RngStream(s, 4)
        Sigma = np.stack([jitter_to_psd(np.linalg.inv(sample_cluster_precision(R[k], gamma, srng))).values
                          for k in range(K)])
        if same_p or has_sign_flip(Sigma):
            return Sigma, s
    raise RuntimeError("no sign flip found")


def has_sign_flip(Sigma: np.ndarray) -> bool:
    off = ~np.eye(Sigma.shape[1], dtype=bool)
    signs = np.sign(Sigma[:, off])
    return bool(np.any((signs > 0).any(axis=0) & (signs < 0).any(axis=0)))
