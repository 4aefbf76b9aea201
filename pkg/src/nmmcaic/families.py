"""Per-observation log densities and their derivatives.

Every family works on the linear predictor ``eta`` and on ``s``, the log
of the family's dispersion quantity (``sigma_e`` for Gaussian, the shape
for gamma, ``alpha`` for negative binomial, ``phi`` for Tweedie).  The
derivatives returned by :meth:`Family.derivs` are what the Laplace
gradient needs: up to third order in ``eta`` and the mixed terms with
``s`` up to second order in ``eta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, expit, gammaln

from . import tweedie
from .errors import SpecError, UnsupportedFamilyError

ETA_CLAMP = 30.0
_LOG_2PI = np.log(2.0 * np.pi)


def _clamp(eta):
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP)


@dataclass(frozen=True)
class ObsDerivs:
    """Derivatives of the per-observation log density.

    ``d1..d3`` are with respect to ``eta``; ``ds`` with respect to ``s``;
    ``d1s`` and ``d2s`` are the mixed ``eta``/``s`` terms.
    """

    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    ds: np.ndarray
    d1s: np.ndarray
    d2s: np.ndarray


class Family:
    name = ""
    dispersion_name = ""
    continuous = True

    def logpdf(self, y, eta, s):
        raise NotImplementedError

    def derivs(self, y, eta, s) -> ObsDerivs:
        raise NotImplementedError

    def cross_y(self, y, eta, s):
        """Return ``(d2 l / d eta d y, d2 l / d s d y)``."""
        raise UnsupportedFamilyError(f"{self.name} has no derivative in y")

    def moments(self, eta, s):
        """Conditional mean and variance given the linear predictor."""
        raise NotImplementedError

    def sample(self, eta, s, rng, size=None):
        raise NotImplementedError

    def eta_from_mean(self, mean, s):
        """Invert the mean function, used for initial values."""
        raise NotImplementedError

    def initial_dispersion(self, y, cells):
        """Moment-based starting value for ``s`` from within-cell spread."""
        raise NotImplementedError

    def check_y(self, y):
        pass


def _cell_moments(y, cells):
    """Pooled within-cell mean and variance, falling back to overall."""
    ids, inv, counts = np.unique(cells, return_inverse=True, return_counts=True)
    means = np.bincount(inv, weights=y) / counts
    resid = y - means[inv]
    dof = y.size - ids.size
    var = resid @ resid / dof if dof > 0 else np.var(y)
    return means[inv], max(var, 1e-8)


class Gaussian(Family):
    """Normal observations with identity link, ``s = log sigma_e``."""

    name = "gaussian"
    dispersion_name = "sigma_e"

    def logpdf(self, y, eta, s):
        r = (y - eta) * np.exp(-s)
        return -0.5 * _LOG_2PI - s - 0.5 * r * r

    def derivs(self, y, eta, s):
        w = np.exp(-2.0 * s)
        r = y - eta
        one = np.ones_like(r)
        return ObsDerivs(
            d1=r * w,
            d2=-w * one,
            d3=np.zeros_like(r),
            ds=-1.0 + r * r * w,
            d1s=-2.0 * r * w,
            d2s=2.0 * w * one,
        )

    def cross_y(self, y, eta, s):
        w = np.exp(-2.0 * s)
        return w * np.ones_like(y - eta), 2.0 * (y - eta) * w

    def moments(self, eta, s):
        eta = np.asarray(eta, dtype=float)
        return eta, np.full(eta.shape, np.exp(2.0 * s))

    def sample(self, eta, s, rng, size=None):
        return rng.normal(eta, np.exp(s), size=size)

    def eta_from_mean(self, mean, s):
        return np.asarray(mean, dtype=float)

    def initial_dispersion(self, y, cells):
        _, var = _cell_moments(y, cells)
        return 0.5 * np.log(var)


class GammaLog(Family):
    """Gamma with ``mean = exp(eta)``; ``s`` is the log shape."""

    name = "gamma"
    dispersion_name = "shape"

    def check_y(self, y):
        if np.any(y <= 0):
            raise SpecError("gamma observations must be strictly positive")

    def logpdf(self, y, eta, s):
        k = np.exp(s)
        eta = _clamp(eta)
        return -gammaln(k) + k * s - k * eta + (k - 1.0) * np.log(y) - k * y * np.exp(-eta)

    def derivs(self, y, eta, s):
        k = np.exp(s)
        eta = _clamp(eta)
        u = k * y * np.exp(-eta)
        d1 = u - k
        dk = -digamma(k) + s + 1.0 - eta + np.log(y) - y * np.exp(-eta)
        return ObsDerivs(d1=d1, d2=-u, d3=u, ds=k * dk, d1s=d1, d2s=-u)

    def cross_y(self, y, eta, s):
        k = np.exp(s)
        e = np.exp(-_clamp(eta))
        return k * e * np.ones_like(y), k * (1.0 / y - e)

    def moments(self, eta, s):
        k = np.exp(s)
        mu = np.exp(_clamp(eta))
        return mu, mu * mu / k

    def sample(self, eta, s, rng, size=None):
        k = np.exp(s)
        return rng.gamma(k, np.exp(_clamp(eta)) / k, size=size)

    def eta_from_mean(self, mean, s):
        return np.log(np.maximum(mean, 1e-10))

    def initial_dispersion(self, y, cells):
        means, _ = _cell_moments(y, cells)
        cv2 = np.mean((y / means - 1.0) ** 2)
        return float(np.log(1.0 / max(cv2, 1e-6)))


class GammaShiftedLogit(Family):
    """Gamma with fixed shape ``exp(s)`` and scale ``0.5 + 1.5 expit(eta)``."""

    name = "gamma"
    dispersion_name = "shape"

    def check_y(self, y):
        if np.any(y <= 0):
            raise SpecError("gamma observations must be strictly positive")

    @staticmethod
    def _scale(eta):
        e = expit(eta)
        v = e * (1.0 - e)
        b = 0.5 + 1.5 * e
        b1 = 1.5 * v
        b2 = 1.5 * v * (1.0 - 2.0 * e)
        b3 = 1.5 * v * (1.0 - 6.0 * e + 6.0 * e * e)
        return b, b1, b2, b3

    def logpdf(self, y, eta, s):
        k = np.exp(s)
        b = self._scale(eta)[0]
        return -gammaln(k) - k * np.log(b) + (k - 1.0) * np.log(y) - y / b

    def derivs(self, y, eta, s):
        k = np.exp(s)
        b, b1, b2, b3 = self._scale(eta)
        lb = -k / b + y / b**2
        lbb = k / b**2 - 2.0 * y / b**3
        lbbb = -2.0 * k / b**3 + 6.0 * y / b**4
        d1 = lb * b1
        d2 = lbb * b1**2 + lb * b2
        d3 = lbbb * b1**3 + 3.0 * lbb * b1 * b2 + lb * b3
        ds = k * (-digamma(k) - np.log(b) + np.log(y))
        d1s = -k * b1 / b
        d2s = k * (b1**2 / b**2 - b2 / b)
        return ObsDerivs(d1=d1, d2=d2, d3=d3, ds=ds, d1s=d1s, d2s=d2s)

    def cross_y(self, y, eta, s):
        k = np.exp(s)
        b, b1, _, _ = self._scale(eta)
        return b1 / b**2 * np.ones_like(y), k / y

    def moments(self, eta, s):
        k = np.exp(s)
        b = self._scale(eta)[0]
        return k * b, k * b * b

    def sample(self, eta, s, rng, size=None):
        return rng.gamma(np.exp(s), self._scale(eta)[0], size=size)

    def eta_from_mean(self, mean, s):
        frac = (np.asarray(mean, dtype=float) / np.exp(s) - 0.5) / 1.5
        frac = np.clip(frac, 0.02, 0.98)
        return np.log(frac / (1.0 - frac))

    def initial_dispersion(self, y, cells):
        means, var = _cell_moments(y, cells)
        # mean = k b, var = k b^2  =>  k = mean^2 / var
        return float(np.log(max(np.mean(means) ** 2 / var, 0.1)))


_SUM_TERMS = 64
_STIRLING_MIN = 1e3


def _small_counts(y):
    y = np.asarray(y, dtype=float)
    return (y <= _SUM_TERMS) & (y == np.round(y))


# Both helpers below avoid differencing two large log-gamma (or digamma)
# values when the negative binomial size r is large: small integer counts
# are summed exactly and the rest use differenced Stirling series, whose
# truncation error is below 1e-18 once every argument exceeds 1e3.

def _lgamma_ratio(y, r):
    """``log Gamma(y + r) - log Gamma(r)``."""
    y, r = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(r, dtype=float))
    out = np.array(gammaln(y + r) - gammaln(r), dtype=float)
    small = _small_counts(y)
    if np.any(small):
        ys, rs = y[small], r[small]
        k = np.arange(_SUM_TERMS)
        terms = np.where(k[None, :] < ys[:, None], np.log1p(k[None, :] / rs[:, None]), 0.0)
        out[small] = ys * np.log(rs) + terms.sum(axis=1)
    big = ~small & (r >= _STIRLING_MIN)
    if np.any(big):
        ys, rs = y[big], r[big]
        x = rs + ys
        out[big] = ((rs - 0.5) * np.log1p(ys / rs) + ys * np.log(x) - ys
                    + (1.0 / x - 1.0 / rs) / 12.0 - (1.0 / x**3 - 1.0 / rs**3) / 360.0)
    return out


def _digamma_diff(y, r):
    """``digamma(y + r) - digamma(r)``."""
    y, r = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(r, dtype=float))
    out = np.array(digamma(y + r) - digamma(r), dtype=float)
    small = _small_counts(y)
    if np.any(small):
        ys, rs = y[small], r[small]
        k = np.arange(_SUM_TERMS)
        terms = np.where(k[None, :] < ys[:, None], 1.0 / (rs[:, None] + k[None, :]), 0.0)
        out[small] = terms.sum(axis=1)
    big = ~small & (r >= _STIRLING_MIN)
    if np.any(big):
        ys, rs = y[big], r[big]
        x = rs + ys
        out[big] = (np.log1p(ys / rs) - 0.5 * (1.0 / x - 1.0 / rs)
                    - (1.0 / x**2 - 1.0 / rs**2) / 12.0 + (1.0 / x**4 - 1.0 / rs**4) / 120.0)
    return out

class NegBinLog(Family):
    """Negative binomial with ``Var = mu + alpha mu^2``; ``s = log alpha``."""

    name = "negbin"
    dispersion_name = "alpha"
    continuous = False

    def check_y(self, y):
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise SpecError("negative binomial observations must be nonnegative integers")

    def logpdf(self, y, eta, s):
        r = np.exp(-s)
        eta = _clamp(eta)
        # log(1 + mu / r), kept accurate near the Poisson limit
        l1 = np.logaddexp(0.0, eta + s)
        return (_lgamma_ratio(y, r) - gammaln(y + 1.0) - r * l1 + y * (eta + s - l1))

    def derivs(self, y, eta, s):
        r = np.exp(-s)
        mu = np.exp(_clamp(eta))
        w = mu / (r + mu)
        yr = y + r
        d1 = y - yr * w
        d2 = -yr * w * (1.0 - w)
        d3 = d2 * (1.0 - 2.0 * w)
        dr = _digamma_diff(y, r) - np.logaddexp(0.0, _clamp(eta) + s) + (mu - y) / (r + mu)
        ds = -r * dr
        d1s = r * w * (mu - y) / (r + mu)
        d2s = r * w * (1.0 - w) - r * yr * (1.0 - 2.0 * w) * w / (r + mu)
        return ObsDerivs(d1=d1, d2=d2, d3=d3, ds=ds, d1s=d1s, d2s=d2s)

    def moments(self, eta, s):
        mu = np.exp(_clamp(eta))
        return mu, mu + np.exp(s) * mu * mu

    def sample(self, eta, s, rng, size=None):
        r = np.exp(-s)
        mu = np.exp(_clamp(eta))
        return rng.negative_binomial(r, r / (r + mu), size=size).astype(float)

    def eta_from_mean(self, mean, s):
        return np.log(np.maximum(mean, 1e-3))

    def initial_dispersion(self, y, cells):
        means, var = _cell_moments(y, cells)
        m = np.mean(means)
        alpha = (var - m) / max(np.mean(means**2), 1e-8)
        return float(np.log(np.clip(alpha, 0.05, 5.0)))


class TweedieLog(Family):
    """Tweedie with ``mean = exp(eta)``, ``Var = phi mu^p``; ``s = log phi``."""

    name = "tweedie"
    dispersion_name = "phi"
    continuous = False

    def __init__(self, power=1.5):
        if not 1.0 < power < 2.0:
            raise SpecError(f"tweedie power must lie in (1, 2), got {power}")
        self.power = power

    def check_y(self, y):
        if np.any(y < 0):
            raise SpecError("tweedie observations must be nonnegative")

    def logpdf(self, y, eta, s):
        y, mu = np.broadcast_arrays(np.asarray(y, dtype=float), np.exp(_clamp(eta)))
        return tweedie.log_density(y, mu, np.exp(s), self.power)

    def derivs(self, y, eta, s):
        p = self.power
        phi = np.exp(s)
        eta = _clamp(eta)
        a = y * np.exp((1.0 - p) * eta)
        b = np.exp((2.0 - p) * eta)
        d1 = (a - b) / phi
        d2 = ((1.0 - p) * a - (2.0 - p) * b) / phi
        d3 = ((1.0 - p) ** 2 * a - (2.0 - p) ** 2 * b) / phi
        kernel = (a / (1.0 - p) - b / (2.0 - p)) / phi
        ds = -kernel
        pos = y > 0
        if np.any(pos):
            a0 = (2.0 - p) / (p - 1.0)
            _, mean_j = tweedie.series(y[pos], phi, p)
            ds = ds.copy()
            ds[pos] -= (1.0 + a0) * mean_j
        return ObsDerivs(d1=d1, d2=d2, d3=d3, ds=ds, d1s=-d1, d2s=-d2)

    def moments(self, eta, s):
        mu = np.exp(_clamp(eta))
        return mu, np.exp(s) * np.power(mu, self.power)

    def sample(self, eta, s, rng, size=None):
        return tweedie.sample(np.exp(_clamp(eta)), np.exp(s), self.power, rng, size=size)

    def eta_from_mean(self, mean, s):
        return np.log(np.maximum(mean, 1e-3))

    def initial_dispersion(self, y, cells):
        means, var = _cell_moments(y, cells)
        m = np.maximum(np.mean(means), 1e-3)
        return float(np.log(np.clip(var / m**self.power, 0.05, 10.0)))
