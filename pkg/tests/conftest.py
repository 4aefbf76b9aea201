import numpy as np
import pytest

from nmmcaic import Dataset, ModelSpec, ParameterVector
from nmmcaic.simulation import SimConfig, draw_random_effects, replicate_rng, simulate_dataset

Q6 = np.array([-2.0, -1.0, 0.0, 1.0, 2.0, 3.0])

VARIANCES = frozenset({"log_sigma", "log_delta", "rho_transform", "dispersion_transform"})


def balanced(T, A, n):
    t = np.repeat(np.arange(T), A * n)
    a = np.tile(np.repeat(np.arange(A), n), T)
    return t, a


def simulated(family, link, T, A, n, q, sigma=1.0, delta=0.4, rho=0.8, dispersion=1.0,
              seed=0, index=0, **spec_kw):
    """Draw one dataset from the model; returns (spec, theta, u, data)."""
    spec = ModelSpec(family, link, T, A, replicates=n, **spec_kw)
    theta = ParameterVector.from_natural(q, sigma, delta, rho, dispersion,
                                         power=spec_kw.get("tweedie_power"),
                                         estimate_power=spec_kw.get("estimate_power", False))
    cfg = SimConfig(spec, theta, 1, 1, seed=seed, methods=(2,))
    rng = replicate_rng(seed, index)
    u = draw_random_effects(spec, theta, rng)
    return spec, theta, u, simulate_dataset(cfg, u, rng)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


def gaussian_lmm(spec, theta, data):
    """Dense pieces of the Gaussian linear mixed model at ``theta``.

    Returns ``(X, Z, P, V)``: age design, RE design scaled by sigma/delta,
    prior precision and the marginal covariance of y.
    """
    from nmmcaic.model import Design, prior_precision

    X = np.zeros((data.n, spec.n_ages))
    X[np.arange(data.n), data.a] = 1.0
    Z = Design.build(spec, data).z_matrix(theta.sigma, theta.delta).toarray()
    P = prior_precision(spec, theta.rho).toarray()
    V = Z @ np.linalg.inv(P) @ Z.T + theta.dispersion ** 2 * np.eye(data.n) if spec.q else \
        theta.dispersion ** 2 * np.eye(data.n)
    return X, Z, P, V


def gaussian_hat(spec, theta, data):
    """``d y_hat / d y`` for known variances: GLS fixed effects plus BLUP."""
    X, Z, P, V = gaussian_lmm(spec, theta, data)
    Vi = np.linalg.inv(V)
    B = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi)
    s2 = theta.dispersion ** 2
    D = np.linalg.solve(Z.T @ Z / s2 + P, Z.T / s2) @ (np.eye(data.n) - X @ B)
    return X @ B + Z @ D, B, D


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def verdict(request):
    """Record one pass/fail line per acceptance criterion and assert it."""

    def _verdict(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        assert ok, line

    return _verdict


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
