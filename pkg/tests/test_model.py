import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import gammaln

from symphony.errors import MappingMissing
from symphony.model import (
    Responsibilities,
    build_sign_matrix,
    check_identifiability_condition,
    grn_square,
    log_joint,
    log_lik_bulk,
    log_lik_expression,
    log_prior_R,
    log_prior_Sigma,
    objective_terms,
    RegulatoryPrior,
    elbo,
)

from conftest import random_instance, random_spd


def test_expression_standard_normal_at_mode():
    _, state, _, _ = random_instance(d=1, K=1, n=1)
    state.mu[:] = 0.0
    state.Sigma[:] = 1.0
    state.alpha[:] = 1.0
    state.beta[:] = 1.0
    assert np.isclose(log_lik_expression(np.zeros(1), 0, state, 0), -0.9189385332, atol=1e-10)


def test_expression_beta_scaling():
    _, state, _, _ = random_instance(d=3, K=1, n=1, seed=2)
    x = state.alpha[0] * state.mu[0]
    base = log_lik_expression(x, 0, state, 0)
    state.beta[0] *= 4.0
    assert np.isclose(base - log_lik_expression(x, 0, state, 0), 1.5 * np.log(4.0), atol=1e-12)


def test_expression_scaling_invariant():
    _, state, _, _ = random_instance(d=3, K=1, n=1, seed=4)
    x = state.alpha[0] * state.mu[0]
    ref = -1.5 * np.log(2 * np.pi * state.beta[0]) - 0.5 * np.linalg.slogdet(state.Sigma[0])[1]
    assert np.isclose(log_lik_expression(x, 0, state, 0), ref, atol=1e-10)


def test_expression_matches_explicit_inverse():
    data, state, _, _ = random_instance(d=3, seed=5)
    j, k = 1, 1
    x = data.X[:, j]
    cov = state.beta[j] * state.Sigma[k]
    diff = x - state.alpha[j] * state.mu[k]
    ref = -0.5 * (3 * np.log(2 * np.pi) + np.log(np.linalg.det(cov)) + diff @ np.linalg.inv(cov) @ diff)
    assert np.isclose(log_lik_expression(x, k, state, j), ref, atol=1e-10)


def test_bulk_zero_residual():
    data, state, _, hp = random_instance(l=5)
    c = state.pi @ state.p
    assert np.isclose(log_lik_bulk(c, state, hp), -2.5 * np.log(2 * np.pi * hp.zeta), atol=1e-12)


def test_bulk_single_cluster():
    data, state, _, hp = random_instance(K=1, l=4, seed=7)
    c = data.C[:, 0]
    ref = -2.0 * np.log(2 * np.pi * hp.zeta) - 0.5 * np.sum((c - state.p[0]) ** 2) / hp.zeta
    assert np.isclose(log_lik_bulk(c, state, hp), ref, atol=1e-12)


def test_bulk_elementwise_sum():
    data, state, _, hp = random_instance(l=6, r=3, seed=8)
    mean = state.pi @ state.p
    ref = sum(stats.norm(mean[m], np.sqrt(hp.zeta)).logpdf(data.C[m, t])
              for m in range(data.l) for t in range(data.r))
    assert np.isclose(log_lik_bulk(data.C, state, hp), ref, atol=1e-10)


def test_grn_square_zero_is_jittered():
    sq = grn_square(np.zeros((3, 3)))
    assert np.all(np.linalg.eigvalsh(sq.values) > 0)
    assert np.abs(sq.values).max() < 1e-8


def test_grn_square_symmetric_input(gen):
    a = gen.standard_normal((4, 4))
    s = a + a.T
    assert np.allclose(grn_square(s).values, (2 * s) @ (2 * s))


@settings(max_examples=200, deadline=None)
@given(d=st.integers(1, 32), seed=st.integers(0, 2**32 - 1))
def test_grn_square_psd(d, seed):
    R = np.random.default_rng(seed).standard_normal((d, d))
    sq = grn_square(R).values
    h = R + R.T
    assert np.allclose(sq, sq.T)
    assert np.linalg.eigvalsh(sq).min() >= -1e-8 * np.linalg.norm(h, 2) ** 2


def test_prior_R_zero_residual():
    _, state, prior, hp = random_instance(d=4, l=6, seed=3)
    Rk = prior.prior_mean(state.p[0])
    assert np.isclose(log_prior_R(Rk, state.p[0], prior, hp), -8.0 * np.log(2 * np.pi * hp.lam))


def test_prior_R_scalar_loop():
    _, state, prior, hp = random_instance(d=4, l=6, seed=3)
    Rk, pk = state.R[1], state.p[1]
    ref = 0.0
    for i in range(4):
        for i2 in range(4):
            m = prior.region[i, i2]
            mean = prior.S[i, i2] * prior.M[i, i2] * pk[m] if m >= 0 else 0.0
            ref += stats.norm(mean, np.sqrt(hp.lam)).logpdf(Rk[i, i2])
    assert np.isclose(log_prior_R(Rk, pk, prior, hp), ref, atol=1e-10)


def test_prior_R_without_motifs():
    _, state, prior, hp = random_instance(d=3, l=4, seed=1, motif_density=0.0)
    Rk = state.R[0]
    ref = np.sum(stats.norm(0.0, np.sqrt(hp.lam)).logpdf(Rk))
    assert np.isclose(log_prior_R(Rk, state.p[0], prior, hp), ref)


def test_mapping_missing():
    with pytest.raises(MappingMissing):
        RegulatoryPrior(-np.ones((2, 2), dtype=int), np.array([[0, 1], [0, 0]]), np.zeros((2, 2)), 3)


def test_prior_sigma_scalar_gamma():
    # Wishart(scale 1/r, dof g) at w equals Gamma(g/2, rate r/2)
    w, r, g = 0.8, 2.5, 3.0
    ref = (g / 2) * np.log(r / 2) - gammaln(g / 2) + (g / 2 - 1) * np.log(w) - r * w / 2
    assert np.isclose(log_prior_Sigma(np.array([[w]]), np.array([[r]]), g), ref, atol=1e-12)


def test_prior_sigma_mode_and_rotation(gen):
    d, g = 3, 7.0
    rstar = random_spd(gen, d)
    inv = np.linalg.inv(rstar)
    mode = (g - d - 1) * inv
    at_mode = log_prior_Sigma(mode, rstar, g)
    assert at_mode >= log_prior_Sigma(g * inv, rstar, g)
    assert at_mode >= log_prior_Sigma(1.2 * mode, rstar, g)
    Q, _ = np.linalg.qr(gen.standard_normal((d, d)))
    w = random_spd(gen, d)
    assert np.isclose(log_prior_Sigma(w, rstar, g), log_prior_Sigma(Q @ w @ Q.T, Q @ rstar @ Q.T, g))


def test_log_joint_is_factor_sum():
    from symphony.model import (
        log_prior_cluster_precisions, log_prior_logscale, log_prior_means, log_prior_mu1,
        log_prior_peaks, log_prior_Sigma1, log_prior_sticks,
    )
    for seed in range(5):
        data, state, prior, hp = random_instance(seed=seed, n=4, d=2, l=3, K=2)
        ref = sum(log_lik_expression(data.X[:, j], state.z[j], state, j) for j in range(4))
        ref += float(np.sum(np.log(state.pi[state.z])))
        ref += log_lik_bulk(data.C, state, hp)
        ref += log_prior_sticks(state.pi, hp.phi)
        ref += log_prior_mu1(state.mu1, hp) + log_prior_Sigma1(state.Sigma1, hp)
        ref += log_prior_logscale(state.alpha, hp.nu, hp.delta)
        ref += log_prior_logscale(state.beta, hp.omega, hp.theta)
        ref += log_prior_means(state.mu, state.mu1, state.Sigma1)
        ref += log_prior_cluster_precisions(state, hp)
        ref += sum(log_prior_R(state.R[k], state.p[k], prior, hp) for k in range(2))
        ref += sum(log_prior_peaks(state.p[k], hp) for k in range(2))
        assert abs(log_joint(state, data, prior, hp) - ref) < 1e-8


def test_elbo_at_one_hot_equals_log_joint():
    data, state, prior, hp = random_instance(seed=11)
    resp = Responsibilities.from_labels(state.z, state.K)
    assert np.isclose(elbo(state, resp, data, prior, hp), log_joint(state, data, prior, hp))


def test_log_joint_increases_towards_prior_mean():
    data, state, prior, hp = random_instance(seed=12)
    base = log_joint(state, data, prior, hp)
    moved = state.copy()
    moved.R[0] = 0.5 * (moved.R[0] + prior.prior_mean(moved.p[0]))
    assert log_joint(moved, data, prior, hp) > base or np.allclose(moved.R[0], state.R[0])
    moved = state.copy()
    moved.mu1 = 0.5 * (moved.mu1 + hp.mu2)
    terms0 = objective_terms(state, data, prior, hp)["mu1"]
    assert objective_terms(moved, data, prior, hp)["mu1"] > terms0


def test_log_joint_finite_on_random_states():
    for seed in range(1000):
        data, state, prior, hp = random_instance(seed=seed, n=3, d=2, l=2, K=2, r=1)
        assert np.isfinite(log_joint(state, data, prior, hp))


def test_responsibilities_normalised(gen):
    r = Responsibilities(gen.uniform(size=(20, 4)))
    assert np.abs(r.r.sum(axis=1) - 1.0).max() <= 1e-12


def test_sign_matrix_cases(gen):
    x = gen.standard_normal(30)
    X = np.stack([x, x, -x, np.full(30, 2.0)])
    S = build_sign_matrix(X)
    assert S[0, 1] == 1 and S[0, 2] == -1
    assert np.all(S[3] == 0) and np.all(S[:, 3] == 0)


def test_identifiability_at_prior_location():
    _, state, _, hp = random_instance(seed=6, n=5, d=3)
    state.alpha[:] = np.exp(0.0)
    hp.nu = 1.0
    rep = check_identifiability_condition(state, hp)
    expect = np.all(state.mu >= state.mu1, axis=1)
    assert np.array_equal(rep.holds, np.broadcast_to(expect, (5, state.K)))


def test_identifiability_zero_spread():
    _, state, _, hp = random_instance(seed=6, n=5, d=3)
    state.Sigma1 = np.zeros((3, 3))
    rep = check_identifiability_condition(state, hp)
    assert np.array_equal(rep.holds[0], np.all(state.mu >= state.mu1, axis=1))


def test_identifiability_componentwise_oracle():
    _, state, _, hp = random_instance(seed=9, n=6, d=3, K=3)
    rep = check_identifiability_condition(state, hp)
    for j in range(6):
        for k in range(3):
            ok = all(state.mu[k, i] >= state.mu1[i] + state.Sigma1[i, i] * (state.alpha[j] - hp.nu) / hp.delta
                     for i in range(3))
            assert rep.holds[j, k] == ok
