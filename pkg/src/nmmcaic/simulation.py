"""Monte Carlo estimation of the true bias correction and of its estimators.

For each outer replicate ``k`` the harness draws random effects and data,
fits the model, and then draws ``n_inner`` fresh datasets from the same
conditional distribution to estimate

    BC_k = -2 [ mean_j l_c(theta_hat, psi_hat | y*_j) - l_c(theta_hat, psi_hat | y) ].

The same replicates supply each method's penalty, so BC_true and BC_est
are always computed over an identical set of fits.  Every replicate owns
an RNG substream keyed by ``(seed, k)``; results do not depend on the
number of worker processes.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .caic import caic_method2, method1_penalty
from .derivatives import estimator_jacobians
from .errors import CaicError, SimulationError, SpecError
from .estimation import FitOptions, Problem, fit
from .model import Dataset, ModelSpec, ParameterVector, RandomEffectVector, power_of
from .tweedie import tweedie_sample  # noqa: F401  (re-exported sampler)

DISCARD_WARN_FRACTION = 0.2
_CHUNK_ELEMENTS = 1_000_000


@dataclass(frozen=True, eq=False)
class SimConfig:
    """One Monte Carlo design point.

    ``method1_moments`` selects the conditional variances used by Method 1:
    ``"fitted"`` (model-implied at the estimate) or ``"true"`` (generating
    values).  With ``control_variate`` each replicate's BC subtracts the
    same observed-minus-predicted contrast evaluated at the generating
    parameters; that contrast has mean zero given the random effects, so
    the expectation is unchanged while most of the between-replicate noise
    cancels.  ``prediction_mode="observed"`` reuses the observed data as
    every prediction draw, which forces each replicate's BC to zero.
    """

    spec: ModelSpec
    theta_true: ParameterVector
    n_out: int
    n_inner: int
    seed: int = 0
    methods: tuple[int, ...] = (1, 2)
    discard_nonconverged: bool = True
    fit_options: FitOptions = field(default_factory=FitOptions)
    method1_moments: str = "fitted"
    prediction_mode: str = "fresh"
    control_variate: bool = True

    def __post_init__(self):
        if self.n_out < 1 or self.n_inner < 1:
            raise SpecError("n_out and n_inner must be at least 1")
        self.theta_true.check(self.spec)
        if self.theta_true.delta <= 0:
            raise SpecError("delta must be positive")
        methods = tuple(sorted(set(int(m) for m in self.methods)))
        if not methods or any(m not in (1, 2) for m in methods):
            raise SpecError("methods must be a non-empty subset of {1, 2}")
        if 1 in methods and not self.spec.continuous:
            methods = tuple(m for m in methods if m != 1)
            if not methods:
                raise SpecError("method 1 needs a continuous family")
        object.__setattr__(self, "methods", methods)
        if self.method1_moments not in ("fitted", "true"):
            raise SpecError("method1_moments must be 'fitted' or 'true'")
        if self.prediction_mode not in ("fresh", "observed"):
            raise SpecError("prediction_mode must be 'fresh' or 'observed'")
        if not 0 <= int(self.seed) < 2**64:
            raise SpecError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class ReplicateRecord:
    index: int
    converged: bool
    kept: bool
    reason: str
    bc: float
    penalties: dict
    neg2_lc: float
    method2_trace: float
    theta_hat: tuple
    boundary: tuple
    outer_iterations: int
    bc_plain: float = float("nan")

    def to_json(self) -> str:
        rec = {
            "index": self.index, "converged": self.converged, "kept": self.kept,
            "reason": self.reason, "bc": _num(self.bc), "bc_plain": _num(self.bc_plain),
            "penalties": {str(k): _num(v) for k, v in sorted(self.penalties.items())},
            "neg2_lc": _num(self.neg2_lc), "method2_trace": _num(self.method2_trace),
            "theta_hat": [_num(v) for v in self.theta_hat], "boundary": list(self.boundary),
            "outer_iterations": self.outer_iterations,
        }
        return json.dumps(rec, sort_keys=True)


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float


@dataclass(frozen=True, eq=False)
class SimResult:
    bc_true: Estimate
    bc_est: dict
    rb: dict
    rb_se: dict
    n_converged: int
    n_discarded: int
    records: tuple
    warnings: tuple = ()
    bc_true_plain: Estimate | None = None

    def kept_indices(self) -> list[int]:
        return [r.index for r in self.records if r.kept]


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based substream for outer replicate ``index``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed),
                                                                       spawn_key=(int(index),))))


def sample_ar1(T: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary unit-variance AR(1) path of length ``T``."""
    if not -1.0 < rho < 1.0:
        raise SpecError("rho must lie in (-1, 1)")
    eps = rng.standard_normal(T)
    out = np.empty(T)
    out[0] = eps[0]
    c = math.sqrt(1.0 - rho * rho)
    for t in range(1, T):
        out[t] = rho * out[t - 1] + c * eps[t]
    return out


def draw_random_effects(spec: ModelSpec, theta: ParameterVector,
                        rng: np.random.Generator) -> RandomEffectVector:
    ye = sample_ar1(spec.n_years, theta.rho, rng) if spec.year_effects else np.zeros(0)
    ie = rng.standard_normal((spec.n_years, spec.n_ages)) if spec.interaction_effects \
        else np.zeros((0, 0))
    return RandomEffectVector(ye, ie)


def design_indices(spec: ModelSpec):
    """Balanced layout: year-major, then age, then replicate."""
    T, A, n = spec.n_years, spec.n_ages, spec.replicates
    t = np.repeat(np.arange(T), A * n)
    a = np.tile(np.repeat(np.arange(A), n), T)
    return t, a


def true_eta(spec: ModelSpec, theta: ParameterVector, u: RandomEffectVector, t, a):
    eta = theta.q[a].copy()
    if spec.year_effects:
        eta += theta.sigma * u.year_effects[t]
    if spec.interaction_effects:
        eta += theta.delta * u.interaction_effects[t, a]
    return eta


def simulate_dataset(config: SimConfig, u: RandomEffectVector, rng: np.random.Generator) -> Dataset:
    spec = config.spec
    th = config.theta_true
    if u.year_effects.size != spec.n_year_re or u.interaction_effects.size != spec.n_int_re:
        raise SpecError("random-effect dimensions do not match the model")
    t, a = design_indices(spec)
    eta = true_eta(spec, th, u, t, a)
    fam = spec.family_model(power_of(spec, th))
    return Dataset(t, a, fam.sample(eta, th.dispersion_transform, rng))


# ---------------------------------------------------------------------------
# one replicate
# ---------------------------------------------------------------------------

def _prediction_contrasts(config: SimConfig, eta_true, eta_hat, s_hat, fam_hat, rng, y_obs):
    """Mean prediction log-likelihoods at the fit and at the generating values.

    Returns ``(mean_j l_c(fit | y*_j), mean_j l_c(truth | y*_j))`` using
    one shared set of prediction draws.
    """
    spec = config.spec
    th = config.theta_true
    fam_true = spec.family_model(power_of(spec, th))
    s_true = th.dispersion_transform
    if config.prediction_mode == "observed":
        return (float(np.sum(fam_hat.logpdf(y_obs, eta_hat, s_hat))),
                float(np.sum(fam_true.logpdf(y_obs, eta_true, s_true))))
    n = eta_true.size
    per = max(1, _CHUNK_ELEMENTS // max(n, 1))
    tot_hat = tot_true = 0.0
    done = 0
    while done < config.n_inner:
        m = min(per, config.n_inner - done)
        ys = fam_true.sample(np.broadcast_to(eta_true, (m, n)), s_true, rng, size=(m, n))
        tot_hat += float(np.sum(fam_hat.logpdf(ys, eta_hat[None, :], s_hat)))
        tot_true += float(np.sum(fam_true.logpdf(ys, eta_true[None, :], s_true)))
        done += m
    return tot_hat / config.n_inner, tot_true / config.n_inner


def run_replicate(config: SimConfig, index: int) -> ReplicateRecord:
    spec = config.spec
    rng = replicate_rng(config.seed, index)
    u = draw_random_effects(spec, config.theta_true, rng)
    data = simulate_dataset(config, u, rng)
    nan = float("nan")

    def failed(reason, res=None):
        th = tuple(res.theta_hat.to_array().tolist()) if res is not None else ()
        return ReplicateRecord(index, bool(res is not None and res.converged), False, reason, nan,
                               {}, nan, nan, th, tuple(res.boundary) if res else (),
                               res.outer_iterations if res else 0)

    try:
        res = fit(data, spec, config.fit_options)
    except CaicError as exc:
        return failed(f"fit error: {exc}")
    if not res.converged and config.discard_nonconverged:
        return failed("not converged", res)

    th_hat = res.theta_hat.to_array()
    prob = Problem(spec, data)
    eta_hat = prob.eta(th_hat, res.psi_hat.flat)
    fam_hat = prob.family(th_hat)
    s_hat = th_hat[spec.n_ages + 3]
    lc_obs = float(np.sum(fam_hat.logpdf(data.y, eta_hat, s_hat)))
    t, a = design_indices(spec)
    eta_true = true_eta(spec, config.theta_true, u, t, a)
    try:
        pred_hat, pred_true = _prediction_contrasts(config, eta_true, eta_hat, s_hat, fam_hat,
                                                    rng, data.y)
        fam_true = spec.family_model(power_of(spec, config.theta_true))
        lc_obs_true = float(np.sum(fam_true.logpdf(data.y, eta_true,
                                                   config.theta_true.dispersion_transform)))
    except CaicError as exc:
        return failed(f"prediction error: {exc}", res)
    bc_plain = -2.0 * (pred_hat - lc_obs)
    # the same contrast at the generating values has conditional mean zero
    control = -2.0 * (pred_true - lc_obs_true)
    bc = bc_plain - control if config.control_variate else bc_plain

    penalties = {}
    try:
        rep = caic_method2(res, data)
        if 2 in config.methods:
            penalties[2] = rep.method2_penalty
        if 1 in config.methods:
            jac = estimator_jacobians(res, data)
            var = None
            if config.method1_moments == "true":
                fam_true = spec.family_model(power_of(spec, config.theta_true))
                var = fam_true.moments(eta_true, config.theta_true.dispersion_transform)[1]
            penalties[1] = method1_penalty(res, data, jac, var)
    except CaicError as exc:
        return failed(f"penalty error: {exc}", res)
    if not all(np.isfinite(v) for v in penalties.values()) or not np.isfinite(bc):
        return failed("non-finite penalty", res)
    return ReplicateRecord(index, res.converged, True, "", bc, penalties, rep.neg2_lc,
                           rep.method2_trace, tuple(th_hat.tolist()), res.boundary,
                           res.outer_iterations, bc_plain)


def _worker_init():
    # one BLAS thread per process keeps floating-point reductions reproducible
    threadpool_limits(1)


def _run_one(args):
    config, index = args
    with threadpool_limits(1):
        return run_replicate(config, index)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def _mean_se(x):
    x = np.asarray(x, dtype=float)
    m = x.size
    if m == 0:
        return Estimate(float("nan"), float("nan"))
    se = float(np.std(x, ddof=1) / math.sqrt(m)) if m > 1 else float("nan")
    return Estimate(float(np.mean(x)), se)


def relative_bias(bc_est: float, bc_true: float) -> float:
    if bc_true == 0:
        raise SimulationError("relative bias is undefined when BC_true is zero")
    return (bc_est - bc_true) / bc_true


def _ratio_se(est, true):
    """Delta-method standard error of ``mean(est) / mean(true) - 1``."""
    m = est.size
    if m < 2:
        return float("nan")
    r = np.mean(est) / np.mean(true)
    resid = est - r * true
    return float(np.std(resid, ddof=1) / math.sqrt(m) / abs(np.mean(true)))


def aggregate(config: SimConfig, records) -> SimResult:
    records = tuple(sorted(records, key=lambda r: r.index))
    kept = [r for r in records if r.kept]
    n_conv = len(kept)
    n_disc = len(records) - n_conv
    notes = []
    if n_conv == 0:
        raise SimulationError(f"no usable replicates out of {len(records)}")
    if n_disc > DISCARD_WARN_FRACTION * len(records):
        msg = f"{n_disc} of {len(records)} replicates discarded"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    bc = np.array([r.bc for r in kept])
    bc_true = _mean_se(bc)
    bc_est, rb, rb_se = {}, {}, {}
    for m in config.methods:
        pen = np.array([r.penalties[m] for r in kept])
        bc_est[m] = _mean_se(pen)
        if bc_true.value == 0:
            rb[m] = float("nan")
            rb_se[m] = float("nan")
        else:
            rb[m] = relative_bias(bc_est[m].value, bc_true.value)
            rb_se[m] = _ratio_se(pen, bc)
    plain = _mean_se([r.bc_plain for r in kept])
    return SimResult(bc_true, bc_est, rb, rb_se, n_conv, n_disc, records, tuple(notes), plain)


def run_simulation(config: SimConfig, workers: int = 1, log_path=None) -> SimResult:
    """Run all outer replicates and aggregate them in index order."""
    jobs = [(config, k) for k in range(config.n_out)]
    if workers <= 1:
        records = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init) as pool:
            records = list(pool.map(_run_one, jobs, chunksize=1))
    if log_path is not None:
        with open(log_path, "a") as fh:
            for r in records:
                fh.write(r.to_json() + "\n")
    return aggregate(config, records)


def bc_true(config: SimConfig | SimResult, workers: int = 1) -> tuple[float, float]:
    res = config if isinstance(config, SimResult) else run_simulation(config, workers)
    return res.bc_true.value, res.bc_true.se


def bc_est(config: SimConfig | SimResult, method: int, workers: int = 1) -> tuple[float, float]:
    res = config if isinstance(config, SimResult) else run_simulation(config, workers)
    if method not in res.bc_est:
        raise SimulationError(f"method {method} was not computed")
    e = res.bc_est[method]
    return e.value, e.se


def with_overrides(config: SimConfig, **kw) -> SimConfig:
    return replace(config, **kw)


__all__ = [
    "SimConfig", "SimResult", "ReplicateRecord", "Estimate", "replicate_rng", "sample_ar1",
    "draw_random_effects", "simulate_dataset", "tweedie_sample", "run_replicate",
    "run_simulation", "aggregate", "bc_true", "bc_est", "relative_bias", "design_indices",
]
