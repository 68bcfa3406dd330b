import numpy as np
import pytest


def random_spd(gen, d, scale=1.0):
    a = gen.standard_normal((d, d))
    return scale * (a @ a.T + d * np.eye(d))


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def random_instance(seed=0, n=4, d=2, l=3, K=2, r=2, motif_density=0.5):
    """Small random (data, state, prior, hp) tuple for factor-level tests."""
    from symphony.model import Dataset, HyperParams, LatentState
    from symphony.sampling import RngStream
    from symphony.simulate import random_regulatory_prior

    g = np.random.default_rng(seed)
    prior = random_regulatory_prior(d, l, motif_density, 0.5, RngStream(seed, 99))
    hp = HyperParams.simulation_default(d, l, mu2=g.standard_normal(d), Sigma2=random_spd(g, d, 0.5))
    pi = g.dirichlet(np.ones(K))
    state = LatentState(
        pi=pi,
        p=g.uniform(0.1, 3.0, size=(K, l)),
        R=g.standard_normal((K, d, d)),
        Sigma=np.stack([random_spd(g, d, 0.3) for _ in range(K)]),
        mu=g.standard_normal((K, d)),
        mu1=g.standard_normal(d),
        Sigma1=random_spd(g, d, 0.5),
        alpha=np.exp(0.3 * g.standard_normal(n)),
        beta=np.exp(0.3 * g.standard_normal(n)),
        z=g.integers(0, K, size=n),
    )
    data = Dataset(g.standard_normal((d, n)), g.uniform(0.0, 4.0, size=(l, r)))
    return data, state, prior, hp


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
