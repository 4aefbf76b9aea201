import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats
from scipy.special import gammaln

from nmmcaic import SpecError, UnsupportedFamilyError
from nmmcaic import families as F

H = 1e-5


def _obs(fam, rng, n=25):
    if isinstance(fam, F.Gaussian):
        return rng.normal(1.0, 1.0, n)
    if isinstance(fam, F.NegBinLog):
        return rng.poisson(3.0, n).astype(float)
    if isinstance(fam, F.TweedieLog):
        return np.where(rng.random(n) < 0.3, 0.0, rng.gamma(2.0, 1.0, n))
    return rng.gamma(3.0, 1.0, n)


FAMILIES = [
    (F.Gaussian(), -0.3),
    (F.GammaLog(), np.log(3.0)),
    (F.GammaShiftedLogit(), np.log(5.0)),
    (F.NegBinLog(), np.log(0.3)),
    (F.TweedieLog(1.6), np.log(0.5)),
]
IDS = ["gaussian", "gamma", "gamma-ssl", "negbin", "tweedie"]


class TestDerivatives:
    @pytest.mark.parametrize("fam,s", FAMILIES, ids=IDS)
    def test_against_central_differences(self, fam, s, rng):
        y = _obs(fam, rng)
        eta = rng.normal(0.5, 0.5, y.size)
        d = fam.derivs(y, eta, s)
        lp = lambda e, ss: fam.logpdf(y, e, ss)  # noqa: E731
        dd = lambda e, ss: fam.derivs(y, e, ss)  # noqa: E731
        pairs = [
            (d.d1, (lp(eta + H, s) - lp(eta - H, s)) / (2 * H)),
            (d.d2, (dd(eta + H, s).d1 - dd(eta - H, s).d1) / (2 * H)),
            (d.d3, (dd(eta + H, s).d2 - dd(eta - H, s).d2) / (2 * H)),
            (d.ds, (lp(eta, s + H) - lp(eta, s - H)) / (2 * H)),
            (d.d1s, (dd(eta, s + H).d1 - dd(eta, s - H).d1) / (2 * H)),
            (d.d2s, (dd(eta, s + H).d2 - dd(eta, s - H).d2) / (2 * H)),
        ]
        for got, want in pairs:
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-7)

    @pytest.mark.parametrize("fam,s", FAMILIES[:3], ids=IDS[:3])
    def test_cross_y(self, fam, s, rng):
        y = _obs(fam, rng)
        eta = rng.normal(0.5, 0.5, y.size)
        c_eta, c_s = fam.cross_y(y, eta, s)
        up, dn = fam.derivs(y + H, eta, s), fam.derivs(y - H, eta, s)
        np.testing.assert_allclose(c_eta, (up.d1 - dn.d1) / (2 * H), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(c_s, (up.ds - dn.ds) / (2 * H), rtol=1e-6, atol=1e-8)

    @pytest.mark.parametrize("fam", [F.NegBinLog(), F.TweedieLog(1.5)], ids=["negbin", "tweedie"])
    def test_discrete_families_have_no_y_derivative(self, fam):
        with pytest.raises(UnsupportedFamilyError):
            fam.cross_y(np.ones(2), np.zeros(2), 0.0)


class TestNegBinPrecision:
    def test_negbin_smooth_near_poisson_limit(self):
        # large size parameter: roundoff-level smoothness in eta and an accurate score
        fam = F.NegBinLog()
        y = np.array([0.0, 1.0, 2.0, 7.0, 150.0])
        eta = np.log(np.array([0.3, 1.2, 2.5, 6.0, 140.0]))
        s = np.log(1e-5)
        r = np.exp(-s)
        ref = stats.nbinom(r, r / (r + np.exp(eta))).logpmf(y)
        np.testing.assert_allclose(fam.logpdf(y, eta, s), ref, rtol=1e-9)
        grid = eta[:, None] + np.linspace(-1e-7, 1e-7, 41)[None, :]
        vals = fam.logpdf(y[:, None], grid, s)
        second = np.diff(vals, 2, axis=1)
        scale = 1.0 + y * np.abs(eta) + gammaln(y + 1.0) + np.exp(eta)
        assert np.all(np.abs(second) <= 4e-15 * scale[:, None])
        # wide step: the score is O(alpha) so a narrow step drowns in roundoff
        h = 1e-3
        fd = (fam.logpdf(y, eta, s + h) - fam.logpdf(y, eta, s - h)) / (2 * h)
        np.testing.assert_allclose(fam.derivs(y, eta, s).ds, fd, rtol=1e-5)


class TestNormalization:
    def test_negbin_sums_to_one(self):
        fam = F.NegBinLog()
        y = np.arange(3000.0)
        assert np.exp(fam.logpdf(y, np.log(3.0), np.log(0.4))).sum() == pytest.approx(1, abs=1e-12)

    @pytest.mark.parametrize("fam,s", [(F.GammaLog(), np.log(3)), (F.GammaShiftedLogit(), np.log(5))],
                             ids=["gamma", "gamma-ssl"])
    def test_gamma_integrates_to_one(self, fam, s):
        val = integrate.quad(lambda y: np.exp(fam.logpdf(y, 0.3, s)), 0, np.inf)[0]
        assert val == pytest.approx(1.0, abs=1e-9)


class TestMoments:
    @pytest.mark.parametrize("fam,s", FAMILIES, ids=IDS)
    def test_sampler_matches_moments(self, fam, s):
        rng = np.random.default_rng(5)
        n = 100_000
        eta = np.full(n, 0.4)
        y = fam.sample(eta, s, rng)
        mu, var = fam.moments(eta[:1], s)
        se_mean = np.sqrt(var[0] / n)
        se_var = np.sqrt((np.mean((y - y.mean())**4) - y.var()**2) / n)
        assert abs(y.mean() - mu[0]) < 4 * se_mean
        assert abs(y.var() - var[0]) < 4 * se_var

    def test_shifted_logit_scale_bounds(self):
        b = F.GammaShiftedLogit._scale(np.array([-50.0, 0.0, 50.0]))[0]
        np.testing.assert_allclose(b, [0.5, 1.25, 2.0])

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-3, 3), st.floats(-2, 2))
    def test_eta_from_mean_inverts(self, eta, s):
        for fam in (F.Gaussian(), F.GammaLog(), F.NegBinLog(), F.TweedieLog(1.5)):
            mu = fam.moments(np.array([eta]), s)[0]
            assert fam.eta_from_mean(mu, s)[0] == pytest.approx(eta, abs=1e-9)


class TestValidation:
    def test_gamma_requires_positive(self):
        with pytest.raises(SpecError):
            F.GammaLog().check_y(np.array([1.0, 0.0]))

    def test_negbin_requires_integers(self):
        with pytest.raises(SpecError):
            F.NegBinLog().check_y(np.array([1.5]))

    def test_tweedie_power_range(self):
        with pytest.raises(SpecError):
            F.TweedieLog(2.0)
