"""Tweedie (compound Poisson-gamma, 1 < p < 2) density and sampler.

The density is evaluated as

    log f(y) = log a(y, phi, p) + (y mu^(1-p)/(1-p) - mu^(2-p)/(2-p)) / phi

where ``a`` does not depend on the mean and is a series over the latent
Poisson count ``j``.  Summation starts at the dominant term
``j_max ~ y^(2-p) / (phi (2-p))`` and widens symmetrically until the edge
terms drop below ``1e-12`` relative to the peak.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import SpecError, TweedieSeriesError

SERIES_REL_TOL = 1e-12
MAX_TERMS = 10_000
_CHUNK_CELLS = 4_000_000


def _check_power(p):
    if not 1.0 < p < 2.0:
        raise SpecError(f"tweedie power must lie in (1, 2), got {p}")


def poisson_rate(mu, phi, p):
    """Rate of the latent Poisson count, ``mu^(2-p) / (phi (2-p))``."""
    return np.power(mu, 2.0 - p) / (phi * (2.0 - p))


def _log_w(j, c, a0):
    return j * c - gammaln(j + 1.0) - gammaln(j * a0)


def series(y, phi, p):
    """Return ``(log a(y), E_w[j])`` for strictly positive ``y``.

    ``E_w[j]`` is the series-weighted mean count, which gives the
    derivative of ``log a`` with respect to ``log phi`` as
    ``-(1 + a0) E_w[j]`` with ``a0 = (2-p)/(p-1)``.
    """
    _check_power(p)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    phi = np.broadcast_to(np.asarray(phi, dtype=float), y.shape)
    if np.any(y <= 0):
        raise SpecError("series() requires y > 0")
    a0 = (2.0 - p) / (p - 1.0)
    c = a0 * np.log(y) - a0 * np.log(p - 1.0) - (1.0 + a0) * np.log(phi) - np.log(2.0 - p)
    jmax = np.maximum(1.0, np.round(np.power(y, 2.0 - p) / (phi * (2.0 - p))))
    half = np.ceil(8.0 * np.sqrt(jmax / (1.0 + a0))) + 5.0
    log_tol = np.log(SERIES_REL_TOL)

    # widen until both edges are negligible (log W_j is concave in j)
    while True:
        lo = np.maximum(1.0, jmax - half)
        hi = jmax + half
        width = hi - lo + 1.0
        if np.any(width > MAX_TERMS):
            k = int(np.flatnonzero(width > MAX_TERMS)[0])
            raise TweedieSeriesError(
                f"tweedie series needs more than {MAX_TERMS} terms "
                f"(y={y[k]:.6g}, phi={phi[k]:.6g}, p={p})",
                y=float(y[k]), n_terms=int(width[k]),
            )
        peak = _log_w(jmax, c, a0)
        edge_hi = _log_w(hi, c, a0) - peak
        edge_lo = np.where(lo > 1.0, _log_w(lo, c, a0) - peak, -np.inf)
        pending = (edge_hi > log_tol) | (edge_lo > log_tol)
        if not pending.any():
            break
        half = np.where(pending, 2.0 * half, half)

    log_a = np.empty(y.shape)
    mean_j = np.empty(y.shape)
    width = (hi - lo + 1.0).astype(int)
    order = np.argsort(width, kind="stable")
    start = 0
    while start < order.size:
        # group elements of similar width to bound the 2D work array
        w = width[order[start]]
        stop = start + 1
        while stop < order.size and (stop - start + 1) * width[order[stop]] <= _CHUNK_CELLS:
            w = width[order[stop]]
            stop += 1
        idx = order[start:stop]
        offsets = np.arange(w, dtype=float)
        j = lo[idx, None] + offsets[None, :]
        valid = j <= hi[idx, None]
        lw = np.where(valid, _log_w(j, c[idx, None], a0), -np.inf)
        tot = logsumexp(lw, axis=1)
        wts = np.exp(lw - tot[:, None])
        log_a[idx] = tot - np.log(y[idx])
        mean_j[idx] = np.sum(wts * np.where(valid, j, 0.0), axis=1)
        start = stop
    return log_a, mean_j


def log_density(y, mu, phi, p):
    """Vectorised Tweedie log-density (point mass at zero included)."""
    _check_power(p)
    y, mu, phi = np.broadcast_arrays(
        np.asarray(y, dtype=float), np.asarray(mu, dtype=float), np.asarray(phi, dtype=float)
    )
    if np.any(y < 0):
        raise SpecError("tweedie observations must be nonnegative")
    kernel = (y * np.power(mu, 1.0 - p) / (1.0 - p) - np.power(mu, 2.0 - p) / (2.0 - p)) / phi
    out = np.array(kernel, dtype=float, copy=True)
    pos = y > 0
    if pos.any():
        log_a, _ = series(y[pos], phi[pos], p)
        out[pos] += log_a
    return out


def tweedie_log_density(y: float, mu: float, phi: float, p: float) -> float:
    """Scalar log-density; ``-lambda`` at ``y == 0``."""
    if mu <= 0 or phi <= 0:
        raise SpecError("tweedie requires mu > 0 and phi > 0")
    return float(log_density(np.array([y]), mu, phi, p)[0])


def sample(mu, phi, p, rng: np.random.Generator, size=None):
    """Draw from the compound Poisson-gamma representation.

    ``N ~ Poisson(lambda)`` and, given ``N = n > 0``, ``y`` is gamma with
    shape ``n (2-p)/(p-1)`` and scale ``phi (p-1) mu^(p-1)``.
    """
    _check_power(p)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(mu <= 0) or np.any(phi <= 0):
        raise SpecError("tweedie requires mu > 0 and phi > 0")
    if size is None:
        size = np.broadcast(mu, phi).shape
    lam = poisson_rate(mu, phi, p)
    n = rng.poisson(np.broadcast_to(lam, size))
    a0 = (2.0 - p) / (p - 1.0)
    scale = np.broadcast_to(phi * (p - 1.0) * np.power(mu, p - 1.0), size)
    y = np.zeros(size)
    hit = n > 0
    y[hit] = rng.gamma(n[hit] * a0, scale[hit])
    return y


def tweedie_sample(mu: float, phi: float, p: float, rng: np.random.Generator) -> float:
    """Single draw; see :func:`sample`."""
    return float(sample(np.array([mu]), phi, p, rng)[0])
