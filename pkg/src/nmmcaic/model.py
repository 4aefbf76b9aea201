"""Model specification, parameterisation and log-likelihood components.

The linear predictor for an observation in year ``t`` and age ``a`` is

    eta[t, a] = q[a] + sigma * psi_year[t] + delta * psi_int[t, a]

with AR(1) year effects (unit marginal variance, autocorrelation ``rho``)
and iid standard normal year-by-age interaction effects.  Random effects
are stored flat as ``[psi_year (T), psi_int (T*A, row-major)]``; either
block can be switched off in the :class:`ModelSpec`.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sps

from . import families
from .errors import IndexRangeError, NonFiniteLikelihoodError, SpecError

_LOG_2PI = np.log(2.0 * np.pi)


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    GAMMA = "gamma"
    NEGBIN = "negbin"
    TWEEDIE = "tweedie"


class Link(str, enum.Enum):
    IDENTITY = "identity"
    LOG = "log"
    SHIFTED_SCALED_LOGIT = "shifted_scaled_logit"


SUPPORTED = {
    (Family.GAUSSIAN, Link.IDENTITY),
    (Family.GAMMA, Link.LOG),
    (Family.GAMMA, Link.SHIFTED_SCALED_LOGIT),
    (Family.NEGBIN, Link.LOG),
    (Family.TWEEDIE, Link.LOG),
}

DEFAULT_LINK = {
    Family.GAUSSIAN: Link.IDENTITY,
    Family.GAMMA: Link.LOG,
    Family.NEGBIN: Link.LOG,
    Family.TWEEDIE: Link.LOG,
}


@dataclass(frozen=True)
class ModelSpec:
    """Observation family, link and latent structure.

    ``replicates`` is the number of observations per (year, age) cell used
    by the simulator; fitting takes whatever the dataset holds.
    """

    family: Family
    link: Link
    n_years: int
    n_ages: int = 6
    replicates: int = 1
    tweedie_power: float | None = None
    estimate_power: bool = False
    year_effects: bool = True
    interaction_effects: bool = True

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "link", Link(self.link))
        if (self.family, self.link) not in SUPPORTED:
            raise SpecError(f"unsupported family/link pair {self.family.value}/{self.link.value}")
        if self.n_years < 2:
            raise SpecError("n_years must be at least 2")
        if self.n_ages < 1:
            raise SpecError("n_ages must be at least 1")
        if self.replicates < 1:
            raise SpecError("replicates must be at least 1")
        if self.family is Family.TWEEDIE:
            p = 1.5 if self.tweedie_power is None else float(self.tweedie_power)
            if not 1.0 < p < 2.0:
                raise SpecError(f"tweedie_power must lie in (1, 2), got {p}")
            object.__setattr__(self, "tweedie_power", p)
        elif self.tweedie_power is not None or self.estimate_power:
            raise SpecError("tweedie_power applies to the Tweedie family only")

    @property
    def q(self) -> int:
        """Number of random effects."""
        return self.n_year_re + self.n_int_re

    @property
    def n_year_re(self) -> int:
        return self.n_years if self.year_effects else 0

    @property
    def n_int_re(self) -> int:
        return self.n_years * self.n_ages if self.interaction_effects else 0

    @property
    def param_names(self) -> tuple[str, ...]:
        names = tuple(f"q{a + 1}" for a in range(self.n_ages))
        names += ("log_sigma", "log_delta", "rho_transform", "dispersion_transform")
        if self.estimate_power:
            names += ("power_transform",)
        return names

    @property
    def n_theta(self) -> int:
        return len(self.param_names)

    def family_model(self, power: float | None = None) -> families.Family:
        if self.family is Family.GAUSSIAN:
            return families.Gaussian()
        if self.family is Family.GAMMA:
            if self.link is Link.LOG:
                return families.GammaLog()
            return families.GammaShiftedLogit()
        if self.family is Family.NEGBIN:
            return families.NegBinLog()
        return families.TweedieLog(self.tweedie_power if power is None else power)

    @property
    def dispersion_name(self) -> str:
        return self.family_model().dispersion_name

    @property
    def continuous(self) -> bool:
        return self.family in (Family.GAUSSIAN, Family.GAMMA)


# indices into the flat parameter array, relative to n_ages
def idx_log_sigma(spec): return spec.n_ages
def idx_log_delta(spec): return spec.n_ages + 1
def idx_rho(spec): return spec.n_ages + 2
def idx_dispersion(spec): return spec.n_ages + 3
def idx_power(spec): return spec.n_ages + 4


def lc_param_mask(spec: ModelSpec) -> np.ndarray:
    """Parameters that enter the conditional likelihood (``rho`` does not)."""
    mask = np.ones(spec.n_theta, dtype=bool)
    mask[idx_rho(spec)] = False
    if not spec.year_effects:
        mask[idx_log_sigma(spec)] = False
    if not spec.interaction_effects:
        mask[idx_log_delta(spec)] = False
    return mask


def structurally_fixed(spec: ModelSpec) -> set[str]:
    """Parameter names that cannot be estimated because their block is off."""
    out = set()
    if not spec.year_effects:
        out |= {"log_sigma", "rho_transform"}
    if not spec.interaction_effects:
        out.add("log_delta")
    return out


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Fixed effects and transformed variance/dispersion parameters.

    ``sigma``, ``delta`` and the dispersion are stored on the log scale,
    ``rho = tanh(rho_transform)`` and, when estimated, the Tweedie power
    is ``1 + expit(power_transform)``.
    """

    q: np.ndarray
    log_sigma: float
    log_delta: float
    rho_transform: float
    dispersion_transform: float
    power_transform: float | None = None

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        for name in ("log_sigma", "log_delta", "rho_transform", "dispersion_transform"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise SpecError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if not np.all(np.isfinite(q)):
            raise SpecError("q must be finite")

    @classmethod
    def from_natural(cls, q, sigma, delta, rho, dispersion, power=None, estimate_power=False):
        if sigma <= 0 or delta <= 0 or dispersion <= 0:
            raise SpecError("sigma, delta and dispersion must be positive")
        if not -1.0 < rho < 1.0:
            raise SpecError("rho must lie in (-1, 1)")
        pt = None
        if estimate_power:
            if power is None or not 1.0 < power < 2.0:
                raise SpecError("an initial power in (1, 2) is required")
            pt = float(np.log((power - 1.0) / (2.0 - power)))
        return cls(q=q, log_sigma=np.log(sigma), log_delta=np.log(delta),
                   rho_transform=np.arctanh(rho), dispersion_transform=np.log(dispersion),
                   power_transform=pt)

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    @property
    def delta(self) -> float:
        return float(np.exp(self.log_delta))

    @property
    def rho(self) -> float:
        return float(np.tanh(self.rho_transform))

    @property
    def dispersion(self) -> float:
        return float(np.exp(self.dispersion_transform))

    @property
    def power(self) -> float | None:
        if self.power_transform is None:
            return None
        return float(1.0 + 1.0 / (1.0 + np.exp(-self.power_transform)))

    def to_array(self) -> np.ndarray:
        tail = [self.log_sigma, self.log_delta, self.rho_transform, self.dispersion_transform]
        if self.power_transform is not None:
            tail.append(self.power_transform)
        return np.concatenate([self.q, tail])

    @classmethod
    def from_array(cls, spec: ModelSpec, arr) -> ParameterVector:
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (spec.n_theta,):
            raise SpecError(f"expected {spec.n_theta} parameters, got shape {arr.shape}")
        A = spec.n_ages
        return cls(q=arr[:A], log_sigma=arr[A], log_delta=arr[A + 1], rho_transform=arr[A + 2],
                   dispersion_transform=arr[A + 3],
                   power_transform=arr[A + 4] if spec.estimate_power else None)

    def natural(self) -> dict:
        out = {"q": self.q.tolist(), "sigma": self.sigma, "delta": self.delta,
               "rho": self.rho, "dispersion": self.dispersion}
        if self.power_transform is not None:
            out["power"] = self.power
        return out

    def check(self, spec: ModelSpec):
        if self.q.size != spec.n_ages:
            raise SpecError(f"q has {self.q.size} entries, spec has {spec.n_ages} ages")
        if spec.estimate_power != (self.power_transform is not None):
            raise SpecError("power_transform must be present exactly when the power is estimated")


def power_of(spec: ModelSpec, theta: ParameterVector) -> float | None:
    if spec.family is not Family.TWEEDIE:
        return None
    return theta.power if spec.estimate_power else spec.tweedie_power


@dataclass(frozen=True, eq=False)
class RandomEffectVector:
    """Year and year-by-age random effects with their flat layout."""

    year_effects: np.ndarray
    interaction_effects: np.ndarray

    def __post_init__(self):
        ye = np.array(self.year_effects, dtype=float).reshape(-1)
        ie = np.array(self.interaction_effects, dtype=float)
        if ie.ndim != 2 and ie.size:
            raise SpecError("interaction_effects must be a T x A matrix")
        ye.setflags(write=False)
        ie.setflags(write=False)
        object.__setattr__(self, "year_effects", ye)
        object.__setattr__(self, "interaction_effects", ie)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.year_effects, self.interaction_effects.reshape(-1)])

    @classmethod
    def from_flat(cls, spec: ModelSpec, flat) -> RandomEffectVector:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (spec.q,):
            raise SpecError(f"expected {spec.q} random effects, got shape {flat.shape}")
        ny = spec.n_year_re
        ie = flat[ny:].reshape(spec.n_years, spec.n_ages) if spec.interaction_effects \
            else np.zeros((0, 0))
        return cls(year_effects=flat[:ny], interaction_effects=ie)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> RandomEffectVector:
        return cls.from_flat(spec, np.zeros(spec.q))

    @staticmethod
    def layout(spec: ModelSpec) -> list[tuple[str, int, int | None]]:
        """Flat position -> (block, t, a); ``a`` is None for year effects."""
        out: list[tuple[str, int, int | None]] = []
        if spec.year_effects:
            out += [("year", t, None) for t in range(spec.n_years)]
        if spec.interaction_effects:
            out += [("interaction", t, a) for t in range(spec.n_years) for a in range(spec.n_ages)]
        return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations with 0-based year and age indices."""

    t: np.ndarray
    a: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        a = np.asarray(self.a, dtype=np.int64).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if not (t.size == a.size == y.size):
            raise SpecError("t, a and y must have equal length")
        for arr in (t, a, y):
            arr.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return int(self.y.size)

    def with_y(self, y) -> Dataset:
        return Dataset(self.t, self.a, y)

    def validate(self, spec: ModelSpec) -> Dataset:
        bad = np.flatnonzero((self.t < 0) | (self.t >= spec.n_years)
                             | (self.a < 0) | (self.a >= spec.n_ages))
        if bad.size:
            i = int(bad[0])
            raise IndexRangeError(
                f"observation {i} has (t, a) = ({self.t[i]}, {self.a[i]}) outside "
                f"{spec.n_years} years x {spec.n_ages} ages")
        if not np.all(np.isfinite(self.y)):
            raise SpecError("observations must be finite")
        spec.family_model().check_y(self.y)
        return self

    @classmethod
    def from_csv(cls, path) -> Dataset:
        """Read a headered ``t,a,y`` file with 1-based indices."""
        path = Path(path)
        ts, as_, ys = [], [], []
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip().lower() for h in header] != ["t", "a", "y"]:
                raise SpecError(f"{path}:1: expected header 't,a,y'")
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != 3:
                    raise SpecError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
                try:
                    t, a, y = int(row[0]), int(row[1]), float(row[2])
                except ValueError as exc:
                    raise SpecError(f"{path}:{lineno}: {exc}") from None
                ts.append(t - 1)
                as_.append(a - 1)
                ys.append(y)
        return cls(np.array(ts, dtype=np.int64), np.array(as_, dtype=np.int64), np.array(ys))

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "a", "y"])
            for t, a, y in zip(self.t, self.a, self.y):
                w.writerow([int(t) + 1, int(a) + 1, repr(float(y))])


@dataclass(frozen=True, eq=False)
class TrueProcess:
    """Generating parameters and the realised random effects."""

    theta_o: ParameterVector
    psi_o: RandomEffectVector


@dataclass(frozen=True, eq=False)
class Design:
    """Index arrays mapping observations onto the flat random-effect vector."""

    age: np.ndarray
    year_col: np.ndarray
    int_col: np.ndarray
    has_year: bool
    has_int: bool
    q: int
    age_onehot: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, spec: ModelSpec, data: Dataset) -> Design:
        t, a = data.t, data.a
        year_col = t.copy()
        int_col = spec.n_year_re + t * spec.n_ages + a
        onehot = np.zeros((data.n, spec.n_ages))
        onehot[np.arange(data.n), a] = 1.0
        return cls(age=a, year_col=year_col, int_col=int_col, has_year=spec.year_effects,
                   has_int=spec.interaction_effects, q=spec.q, age_onehot=onehot)

    def re_parts(self, psi_flat):
        py = psi_flat[self.year_col] if self.has_year else np.zeros(self.age.size)
        pi = psi_flat[self.int_col] if self.has_int else np.zeros(self.age.size)
        return py, pi

    def z_apply(self, v, sigma, delta):
        """``Z v`` where ``Z = d eta / d psi``."""
        py, pi = self.re_parts(v)
        return sigma * py + delta * pi

    def zt_apply(self, w, sigma, delta):
        """``Z' w`` for a vector or an (n, k) matrix."""
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            out = np.zeros(self.q)
            if self.has_year:
                out += np.bincount(self.year_col, sigma * w, minlength=self.q)
            if self.has_int:
                out += np.bincount(self.int_col, delta * w, minlength=self.q)
            return out
        return np.column_stack([self.zt_apply(w[:, k], sigma, delta) for k in range(w.shape[1])])

    def z_matrix(self, sigma, delta) -> sps.csr_matrix:
        n = self.age.size
        rows, cols, vals = [], [], []
        if self.has_year:
            rows.append(np.arange(n)); cols.append(self.year_col); vals.append(np.full(n, sigma))
        if self.has_int:
            rows.append(np.arange(n)); cols.append(self.int_col); vals.append(np.full(n, delta))
        if not rows:
            return sps.csr_matrix((n, self.q))
        return sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n, self.q))


# ---------------------------------------------------------------------------
# AR(1) prior
# ---------------------------------------------------------------------------

def ar1_precision(T: int, rho: float) -> sps.csr_matrix:
    """Tridiagonal precision of a stationary unit-variance AR(1) process."""
    if not -1.0 < rho < 1.0:
        raise SpecError("rho must lie in (-1, 1)")
    diag = np.full(T, 1.0 + rho * rho)
    diag[0] = diag[-1] = 1.0
    off = np.full(T - 1, -rho)
    return (sps.diags([off, diag, off], [-1, 0, 1]) / (1.0 - rho * rho)).tocsr()


def ar1_precision_drho(T: int, rho: float) -> sps.csr_matrix:
    """Derivative of :func:`ar1_precision` with respect to ``rho``."""
    r2 = 1.0 - rho * rho
    diag = np.full(T, 1.0 + rho * rho)
    diag[0] = diag[-1] = 1.0
    ddiag = np.full(T, 2.0 * rho)
    ddiag[0] = ddiag[-1] = 0.0
    off = np.full(T - 1, -rho)
    doff = np.full(T - 1, -1.0)
    m = sps.diags([off, diag, off], [-1, 0, 1])
    dm = sps.diags([doff, ddiag, doff], [-1, 0, 1])
    return (2.0 * rho / r2**2 * m + dm / r2).tocsr()


def prior_precision(spec: ModelSpec, rho: float) -> sps.csr_matrix:
    """Block-diagonal precision of the random-effect model."""
    blocks = []
    if spec.year_effects:
        blocks.append(ar1_precision(spec.n_years, rho))
    if spec.interaction_effects:
        blocks.append(sps.identity(spec.n_int_re, format="csr"))
    if not blocks:
        return sps.csr_matrix((0, 0))
    return sps.block_diag(blocks, format="csr")


def prior_precision_dr(spec: ModelSpec, rho: float) -> sps.csr_matrix:
    """Derivative of the prior precision in ``rho_transform``."""
    q = spec.q
    if not spec.year_effects:
        return sps.csr_matrix((q, q))
    dq = ar1_precision_drho(spec.n_years, rho) * (1.0 - rho * rho)
    return sps.block_diag([dq, sps.csr_matrix((spec.n_int_re, spec.n_int_re))], format="csr")


def prior_log_det(spec: ModelSpec, rho: float) -> float:
    """``log det`` of the prior precision."""
    if not spec.year_effects:
        return 0.0
    return -(spec.n_years - 1) * np.log1p(-rho * rho)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def linear_predictor(spec: ModelSpec, theta: ParameterVector, psi: RandomEffectVector,
                     t: int, a: int) -> float:
    if not (0 <= t < spec.n_years and 0 <= a < spec.n_ages):
        raise IndexRangeError(f"(t, a) = ({t}, {a}) outside {spec.n_years} x {spec.n_ages}")
    eta = theta.q[a]
    if spec.year_effects:
        eta += theta.sigma * psi.year_effects[t]
    if spec.interaction_effects:
        eta += theta.delta * psi.interaction_effects[t, a]
    return float(eta)


def mean_from_linear_predictor(link: Link, eta):
    """Apply the inverse link.

    For the shifted-scaled logit the result is the gamma *scale*, bounded
    in (0.5, 2.0).
    """
    link = Link(link)
    eta = np.asarray(eta, dtype=float)
    if link is Link.IDENTITY:
        out = eta
    elif link is Link.LOG:
        out = np.exp(np.clip(eta, -families.ETA_CLAMP, families.ETA_CLAMP))
    else:
        out = families.GammaShiftedLogit._scale(eta)[0]
    return out if out.ndim else float(out)


def eta_vector(spec: ModelSpec, theta_arr: np.ndarray, psi_flat: np.ndarray, design: Design):
    A = spec.n_ages
    sigma = np.exp(theta_arr[A])
    delta = np.exp(theta_arr[A + 1])
    return theta_arr[:A][design.age] + design.z_apply(psi_flat, sigma, delta)


def _cond_terms(spec, theta: ParameterVector, psi: RandomEffectVector, data: Dataset):
    design = Design.build(spec, data)
    eta = eta_vector(spec, theta.to_array(), psi.flat, design)
    fam = spec.family_model(power_of(spec, theta))
    return fam.logpdf(data.y, eta, theta.dispersion_transform)


def log_cond_likelihood(spec: ModelSpec, theta: ParameterVector, psi: RandomEffectVector,
                        data: Dataset) -> float:
    """``log f(y | theta, psi)``, conditionally independent given the REs."""
    theta.check(spec)
    data.validate(spec)
    terms = _cond_terms(spec, theta, psi, data)
    bad = np.flatnonzero(~np.isfinite(terms))
    if bad.size:
        i = int(bad[0])
        raise NonFiniteLikelihoodError(
            f"non-finite conditional log-likelihood at observation {i} (y={data.y[i]!r})", index=i)
    return float(np.sum(terms))


def log_re_density(spec: ModelSpec, theta: ParameterVector, psi: RandomEffectVector) -> float:
    """MVN log-density of the random effects (AR(1) years + iid interactions)."""
    rho = theta.rho
    x = psi.flat
    P = prior_precision(spec, rho)
    return float(-0.5 * spec.q * _LOG_2PI + 0.5 * prior_log_det(spec, rho) - 0.5 * x @ (P @ x))


def log_joint(spec: ModelSpec, theta: ParameterVector, psi: RandomEffectVector,
              data: Dataset) -> float:
    return log_cond_likelihood(spec, theta, psi, data) + log_re_density(spec, theta, psi)


def grad_log_joint(spec: ModelSpec, theta: ParameterVector, psi: RandomEffectVector,
                   data: Dataset):
    """Analytic gradient of the joint log-likelihood in (theta, psi).

    The power coordinate, when estimated, is differentiated numerically.
    """
    th = theta.to_array()
    x = psi.flat
    A = spec.n_ages
    design = Design.build(spec, data)
    sigma, delta, rho = np.exp(th[A]), np.exp(th[A + 1]), np.tanh(th[A + 2])
    fam = spec.family_model(power_of(spec, theta))
    eta = eta_vector(spec, th, x, design)
    d = fam.derivs(data.y, eta, th[A + 3])
    py, pi = design.re_parts(x)
    P = prior_precision(spec, rho)
    g_theta = np.zeros(spec.n_theta)
    g_theta[:A] = design.age_onehot.T @ d.d1
    g_theta[A] = np.sum(d.d1 * sigma * py) if spec.year_effects else 0.0
    g_theta[A + 1] = np.sum(d.d1 * delta * pi) if spec.interaction_effects else 0.0
    if spec.year_effects:
        xy = x[:spec.n_years]
        dQ = ar1_precision_drho(spec.n_years, rho) * (1.0 - rho * rho)
        g_theta[A + 2] = (spec.n_years - 1) * rho - 0.5 * xy @ (dQ @ xy)
    g_theta[A + 3] = np.sum(d.ds)
    if spec.estimate_power:
        h = 1e-6
        vals = []
        for sign in (1.0, -1.0):
            arr = th.copy()
            arr[A + 4] += sign * h
            vals.append(log_joint(spec, ParameterVector.from_array(spec, arr), psi, data))
        g_theta[A + 4] = (vals[0] - vals[1]) / (2 * h)
    g_psi = design.zt_apply(d.d1, sigma, delta) - P @ x
    return g_theta, g_psi


def cond_mean_cov(spec: ModelSpec, theta: ParameterVector, psi: RandomEffectVector,
                  data: Dataset):
    """Conditional mean vector and (diagonal, sparse) covariance of y."""
    design = Design.build(spec, data)
    eta = eta_vector(spec, theta.to_array(), psi.flat, design)
    fam = spec.family_model(power_of(spec, theta))
    mu, var = fam.moments(eta, theta.dispersion_transform)
    return np.asarray(mu, dtype=float), sps.diags(np.asarray(var, dtype=float))
