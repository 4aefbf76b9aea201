"""Laplace-approximated maximum marginal likelihood.

The random effects are integrated out around the inner optimum
``psi_hat(theta)`` found by damped Newton iterations; the outer problem
maximises

    l(theta) = l_j(theta, psi_hat) - 0.5 log det(-d2 l_j / d psi^2) + (q/2) log(2 pi)

with L-BFGS-B on an analytic gradient, followed by a few Newton polishing
steps on a finite-difference Hessian of that gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
from scipy.optimize import minimize

from .errors import (
    FactorizationError, InnerSolveError, NonFiniteLikelihoodError, SpecError, TweedieSeriesError,
)
from .model import (
    Dataset,
    Design,
    Family,
    ModelSpec,
    ParameterVector,
    RandomEffectVector,
    ar1_precision,
    ar1_precision_drho,
    idx_dispersion,
    idx_log_delta,
    idx_log_sigma,
    idx_power,
    idx_rho,
    lc_param_mask,
    power_of,
    prior_log_det,
    structurally_fixed,
)

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)

# box constraints on the transformed scale; the SD floor comes from FitOptions
_LOG_BOUNDS = (-10.0, 6.0)
_RHO_BOUNDS = (-4.0, 4.0)
_DISP_BOUNDS = (-12.0, 12.0)
_POWER_BOUNDS = (-6.0, 6.0)

# failures that mark a trial theta as infeasible during the outer search
_INFEASIBLE = (InnerSolveError, FactorizationError, TweedieSeriesError, NonFiniteLikelihoodError)


@dataclass(frozen=True)
class FitOptions:
    """Optimiser settings.

    ``fixed`` names parameters (see ``ModelSpec.param_names``; ``"q"``
    stands for every age effect) held at their ``theta_init`` values.
    A free ``log_sigma`` or ``log_delta`` ending within ``boundary_margin``
    of ``log_sd_floor`` is flagged as a boundary estimate, as is ``rho`` or
    the dispersion at its box limit.  Boundary parameters are left out of
    the convergence check and of every parameter-Hessian computation.
    """

    tol_inner: float = 1e-10
    tol_outer: float = 1e-8
    max_inner: int = 100
    max_outer: int = 500
    fixed: frozenset = frozenset()
    theta_init: ParameterVector | None = None
    log_sd_floor: float = -10.0
    boundary_margin: float = 3.0
    polish_steps: int = 10
    hessian_step: float = 1e-5

    def __post_init__(self):
        if self.tol_inner <= 0 or self.tol_outer <= 0:
            raise SpecError("tolerances must be positive")
        if self.max_inner < 1 or self.max_outer < 0:
            raise SpecError("iteration limits must be positive")
        object.__setattr__(self, "fixed", frozenset(self.fixed))


@dataclass(frozen=True, eq=False)
class FitResult:
    spec: ModelSpec
    theta_hat: ParameterVector
    psi_hat: RandomEffectVector
    joint_hessian_psi: sps.csr_matrix
    marginal_loglik: float
    conditional_loglik: float
    converged: bool
    inner_iterations: int
    outer_iterations: int
    gradient_norm: float
    inner_gradient_norm: float
    free: np.ndarray
    active: np.ndarray
    boundary: tuple[str, ...]
    hessian_theta: np.ndarray
    options: FitOptions = field(repr=False)
    message: str = ""

    @property
    def active_index(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    @property
    def at_boundary(self) -> bool:
        return bool(self.boundary)

    def to_record(self) -> dict:
        return {
            "theta_hat": self.theta_hat.to_array().tolist(),
            "theta_natural": self.theta_hat.natural(),
            "marginal_loglik": self.marginal_loglik,
            "conditional_loglik": self.conditional_loglik,
            "converged": self.converged,
            "boundary": list(self.boundary),
            "inner_iterations": self.inner_iterations,
            "outer_iterations": self.outer_iterations,
            "gradient_norm": self.gradient_norm,
            "message": self.message,
        }


@dataclass
class InnerState:
    """Result of one inner solve: the optimum plus its Cholesky factor."""

    x: np.ndarray
    chol: tuple | None
    grad_norm: float
    iterations: int
    lj: float
    grad_tol: float = 0.0


class Problem:
    """Evaluation kernel bound to one model and dataset.

    Parameters and random effects are flat arrays here; the public
    functions below wrap them in the domain types.
    """

    def __init__(self, spec: ModelSpec, data: Dataset):
        data.validate(spec)
        self.spec = spec
        self.data = data
        self.y = np.array(data.y, dtype=float)
        self.design = Design.build(spec, data)
        self.A = spec.n_ages
        self.T = spec.n_years
        self.q = spec.q
        self.ny = spec.n_year_re
        self._fam_cache = {}

    # -- parameter unpacking -------------------------------------------------
    def family(self, th):
        spec = self.spec
        p = None
        if spec.family is Family.TWEEDIE:
            p = spec.tweedie_power
            if spec.estimate_power:
                p = float(1.0 + 1.0 / (1.0 + np.exp(-th[idx_power(spec)])))
        fam = self._fam_cache.get(p)
        if fam is None:
            fam = self._fam_cache[p] = spec.family_model(p)
        return fam

    def scales(self, th):
        A = self.A
        return np.exp(th[A]), np.exp(th[A + 1]), np.tanh(th[A + 2]), th[A + 3]

    def prior(self, rho):
        P = np.zeros((self.q, self.q))
        if self.spec.year_effects:
            P[:self.T, :self.T] = ar1_precision(self.T, rho).toarray()
        if self.spec.interaction_effects:
            i = np.arange(self.ny, self.q)
            P[i, i] = 1.0
        return P

    def prior_dr(self, rho):
        """Derivative of the prior precision (year block) in rho_transform."""
        if not self.spec.year_effects:
            return None
        return ar1_precision_drho(self.T, rho).toarray() * (1.0 - rho * rho)

    # -- likelihood pieces ---------------------------------------------------
    def eta(self, th, x):
        sigma, delta, _, _ = self.scales(th)
        return th[:self.A][self.design.age] + self.design.z_apply(x, sigma, delta)

    def lc_terms(self, th, x, y=None):
        y = self.y if y is None else y
        return self.family(th).logpdf(y, self.eta(th, x), th[self.A + 3])

    def lc(self, th, x):
        return float(np.sum(self.lc_terms(th, x)))

    def lr(self, th, x, P=None):
        rho = np.tanh(th[self.A + 2])
        P = self.prior(rho) if P is None else P
        return float(-0.5 * self.q * _LOG_2PI + 0.5 * prior_log_det(self.spec, rho)
                     - 0.5 * x @ P @ x)

    def lj(self, th, x, P=None):
        return self.lc(th, x) + self.lr(th, x, P)

    def derivs(self, th, x):
        return self.family(th).derivs(self.y, self.eta(th, x), th[self.A + 3])

    def grad_psi(self, th, x, d=None, P=None):
        sigma, delta, rho, _ = self.scales(th)
        d = self.derivs(th, x) if d is None else d
        P = self.prior(rho) if P is None else P
        return self.design.zt_apply(d.d1, sigma, delta) - P @ x

    def neg_hess_psi(self, th, x, d=None, P=None):
        """Dense ``H = -d2 l_j / d psi d psi'``."""
        sigma, delta, rho, _ = self.scales(th)
        d = self.derivs(th, x) if d is None else d
        H = (self.prior(rho) if P is None else P).copy()
        w = -d.d2
        dz = self.design
        q = self.q
        idx, val = [], []
        if dz.has_year:
            idx.append(dz.year_col * (q + 1)); val.append(sigma * sigma * w)
        if dz.has_int:
            idx.append(dz.int_col * (q + 1)); val.append(delta * delta * w)
        if dz.has_year and dz.has_int:
            sd = sigma * delta * w
            idx += [dz.year_col * q + dz.int_col, dz.int_col * q + dz.year_col]
            val += [sd, sd]
        if idx:
            H += np.bincount(np.concatenate(idx), np.concatenate(val),
                             minlength=q * q).reshape(q, q)
        return H

    # -- inner problem -------------------------------------------------------
    def inner(self, th, x0=None, tol=1e-10, max_iter=100, history=None) -> InnerState:
        q = self.q
        rho = np.tanh(th[self.A + 2])
        P = self.prior(rho)
        x = np.zeros(q) if x0 is None else np.array(x0, dtype=float)
        if q == 0:
            return InnerState(x, None, 0.0, 0, self.lj(th, x, P))
        f = self.lj(th, x, P)
        if history is not None:
            history.append(f)
        sigma_, delta_, _, _ = self.scales(th)
        gnorm = np.inf
        for it in range(max_iter + 1):
            d = self.derivs(th, x)
            g = self.grad_psi(th, x, d, P)
            gnorm = float(np.max(np.abs(g)))
            # large likelihood terms cancel in g, leaving a roundoff floor
            # (rounding in eta is magnified by the curvature)
            mag = np.abs(d.d1) + np.abs(d.d2) * np.abs(self.eta(th, x))
            scale = max(np.max(self.design.zt_apply(mag, abs(sigma_), abs(delta_))),
                        np.max(abs(P) @ np.abs(x)))
            gtol = max(tol, 1e-12 * scale)
            H = self.neg_hess_psi(th, x, d, P)
            try:
                chol = sla.cho_factor(H, lower=True, check_finite=False)
                ridged = False
            except np.linalg.LinAlgError:
                chol = _ridge_factor(H)
                ridged = True
            if gnorm <= gtol and not ridged:
                return InnerState(x, chol, gnorm, it, f, gtol)
            if it == max_iter:
                break
            step = sla.cho_solve(chol, g, check_finite=False)
            roundoff = 1e-12 * (1.0 + abs(f))
            # predicted gain below the resolution of l_j: the change cannot be
            # seen in f, so the (tiny) Newton step is taken on the gradient alone
            tiny = float(g @ step) <= 100.0 * roundoff
            t = 1.0
            while True:
                xn = x + t * step
                fn = self.lj(th, xn, P)
                if np.isfinite(fn) and (fn >= f or tiny):
                    break
                t *= 0.5
                if t < 1e-12:
                    raise InnerSolveError(
                        f"inner line search failed (gradient max-norm {gnorm:.3e})", gnorm)
            x, f = xn, fn
            if history is not None:
                history.append(f)
        raise InnerSolveError(
            f"inner Newton did not converge in {max_iter} iterations "
            f"(gradient max-norm {gnorm:.3e})", gnorm)

    # -- Laplace marginal ----------------------------------------------------
    def laplace(self, th, st: InnerState):
        if self.q == 0:
            return st.lj
        L = st.chol[0]
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return st.lj - 0.5 * logdet + 0.5 * self.q * _LOG_2PI

    def mixed_psi_theta(self, th, x, d=None):
        """``G = d2 l_j / d psi d theta'`` as a (q, n_theta) array."""
        spec = self.spec
        A = self.A
        sigma, delta, rho, s = self.scales(th)
        d = self.derivs(th, x) if d is None else d
        dz = self.design
        py, pi = dz.re_parts(x)
        G = np.zeros((self.q, spec.n_theta))
        G[:, :A] = dz.zt_apply(d.d2[:, None] * dz.age_onehot, sigma, delta)
        if dz.has_year:
            G[:, A] = sigma * np.bincount(dz.year_col, d.d1, minlength=self.q) \
                + dz.zt_apply(d.d2 * sigma * py, sigma, delta)
            dP = self.prior_dr(rho)
            G[:self.T, A + 2] = -dP @ x[:self.T]
        if dz.has_int:
            G[:, A + 1] = delta * np.bincount(dz.int_col, d.d1, minlength=self.q) \
                + dz.zt_apply(d.d2 * delta * pi, sigma, delta)
        G[:, A + 3] = dz.zt_apply(d.d1s, sigma, delta)
        if spec.estimate_power:
            h = 1e-6
            k = idx_power(spec)
            tp, tm = th.copy(), th.copy()
            tp[k] += h
            tm[k] -= h
            G[:, k] = (self.grad_psi(tp, x) - self.grad_psi(tm, x)) / (2 * h)
        return G

    def laplace_grad(self, th, st: InnerState, mask=None):
        """Analytic gradient of the Laplace marginal in theta.

        ``mask`` limits work to the listed coordinates (others are zero).
        """
        spec = self.spec
        A = self.A
        x = st.x
        sigma, delta, rho, s = self.scales(th)
        dz = self.design
        d = self.derivs(th, x)
        py, pi = dz.re_parts(x)
        n_th = spec.n_theta
        mask = np.ones(n_th, dtype=bool) if mask is None else mask
        grad = np.zeros(n_th)

        partial = np.zeros(n_th)
        partial[:A] = dz.age_onehot.T @ d.d1
        if dz.has_year:
            partial[A] = np.sum(d.d1 * sigma * py)
            dP = self.prior_dr(rho)
            xy = x[:self.T]
            partial[A + 2] = (self.T - 1) * rho - 0.5 * xy @ dP @ xy
        if dz.has_int:
            partial[A + 1] = np.sum(d.d1 * delta * pi)
        partial[A + 3] = np.sum(d.ds)

        if self.q == 0:
            grad[:A + 4] = partial[:A + 4]
        else:
            Hinv = sla.cho_solve(st.chol, np.eye(self.q), check_finite=False)
            n = self.y.size
            hyy = Hinv[dz.year_col, dz.year_col] if dz.has_year else np.zeros(n)
            hii = Hinv[dz.int_col, dz.int_col] if dz.has_int else np.zeros(n)
            hyi = Hinv[dz.year_col, dz.int_col] if (dz.has_year and dz.has_int) else np.zeros(n)
            m = sigma**2 * hyy + 2.0 * sigma * delta * hyi + delta**2 * hii

            tr = np.zeros(n_th)
            tr[:A] = dz.age_onehot.T @ (d.d3 * m)
            if dz.has_year:
                tr[A] = np.sum(2.0 * d.d2 * (sigma**2 * hyy + sigma * delta * hyi)
                               + d.d3 * sigma * py * m)
                tr[A + 2] = -np.sum(Hinv[:self.T, :self.T] * dP)
            if dz.has_int:
                tr[A + 1] = np.sum(2.0 * d.d2 * (delta**2 * hii + sigma * delta * hyi)
                                   + d.d3 * delta * pi * m)
            tr[A + 3] = np.sum(d.d2s * m)

            G = self.mixed_psi_theta(th, x, d)
            cols = np.flatnonzero(mask[:A + 4])
            V = Hinv @ G[:, cols]
            ZV = sigma * V[dz.year_col] if dz.has_year else 0.0
            if dz.has_int:
                ZV = ZV + delta * V[dz.int_col]
            implicit = np.zeros(n_th)
            implicit[cols] = (d.d3 * m) @ ZV
            grad[:A + 4] = partial[:A + 4] + 0.5 * (tr[:A + 4] + implicit[:A + 4])
        if spec.estimate_power and mask[idx_power(spec)]:
            grad[idx_power(spec)] = self._fd_power_grad(th, st)
        return np.where(mask, grad, 0.0)

    def _fd_power_grad(self, th, st, h=1e-5):
        k = idx_power(self.spec)
        vals = []
        for sign in (1.0, -1.0):
            tt = th.copy()
            tt[k] += sign * h
            s2 = self.inner(tt, st.x)
            vals.append(self.laplace(tt, s2))
        return (vals[0] - vals[1]) / (2.0 * h)

    def value_grad(self, th, x0=None, mask=None, tol=1e-10, max_iter=100):
        st = self.inner(th, x0, tol=tol, max_iter=max_iter)
        return self.laplace(th, st), self.laplace_grad(th, st, mask), st

    def fd_hessian(self, th, x0, idx, step=1e-5, tol=1e-10, max_iter=100):
        """Central differences of the analytic gradient over ``idx``."""
        k = len(idx)
        mask = np.zeros(self.spec.n_theta, dtype=bool)
        mask[idx] = True
        Hs = np.zeros((k, k))
        for c, j in enumerate(idx):
            h = step * (1.0 + abs(th[j]))
            tp, tm = th.copy(), th.copy()
            tp[j] += h
            tm[j] -= h
            gp = self.value_grad(tp, x0, mask, tol, max_iter)[1]
            gm = self.value_grad(tm, x0, mask, tol, max_iter)[1]
            Hs[:, c] = (gp[idx] - gm[idx]) / (2.0 * h)
        return 0.5 * (Hs + Hs.T)


def _ridge_factor(H):
    """Cholesky of ``H + ridge``, doubling the ridge until it succeeds."""
    base = 1e-8 * (1.0 + np.abs(np.diag(H)))
    scale = 1.0
    for _ in range(80):
        try:
            return sla.cho_factor(H + np.diag(scale * base), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            scale *= 2.0
    raise FactorizationError("could not regularise the random-effect Hessian")


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def inner_maximize_psi(spec: ModelSpec, theta: ParameterVector, data: Dataset,
                       psi_init: RandomEffectVector | None = None,
                       options: FitOptions | None = None, history: list | None = None
                       ) -> RandomEffectVector:
    """Empirical Bayes random effects at fixed ``theta``."""
    options = options or FitOptions()
    theta.check(spec)
    prob = Problem(spec, data)
    x0 = None if psi_init is None else psi_init.flat
    st = prob.inner(theta.to_array(), x0, options.tol_inner, options.max_inner, history)
    return RandomEffectVector.from_flat(spec, st.x)


def joint_hessian_psi(spec: ModelSpec, theta: ParameterVector, psi: RandomEffectVector,
                      data: Dataset) -> sps.csr_matrix:
    """Sparse ``d2 l_j / d psi d psi'`` (negative definite at an optimum)."""
    prob = Problem(spec, data)
    th = theta.to_array()
    sigma, delta, rho, _ = prob.scales(th)
    d = prob.derivs(th, psi.flat)
    Z = prob.design.z_matrix(sigma, delta)
    P = sps.csr_matrix(prob.prior(rho))
    J = (Z.T @ sps.diags(d.d2) @ Z - P).tocsr()
    J = ((J + J.T) * 0.5).tocsr()
    J.eliminate_zeros()
    return J


def laplace_marginal(spec: ModelSpec, theta: ParameterVector, data: Dataset,
                     options: FitOptions | None = None) -> float:
    options = options or FitOptions()
    theta.check(spec)
    prob = Problem(spec, data)
    th = theta.to_array()
    st = prob.inner(th, None, options.tol_inner, options.max_inner)
    _check_pd(prob, th, st)
    return float(prob.laplace(th, st))


def laplace_gradient(spec: ModelSpec, theta: ParameterVector, data: Dataset,
                     options: FitOptions | None = None) -> np.ndarray:
    """Analytic gradient of :func:`laplace_marginal` in the transformed parameters."""
    options = options or FitOptions()
    prob = Problem(spec, data)
    th = theta.to_array()
    st = prob.inner(th, None, options.tol_inner, options.max_inner)
    return prob.laplace_grad(th, st)


def _check_pd(prob, th, st):
    if prob.q == 0:
        return
    H = prob.neg_hess_psi(th, st.x)
    try:
        sla.cho_factor(H, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise FactorizationError("negated joint Hessian is not positive definite") from None


def free_mask(spec: ModelSpec, fixed) -> np.ndarray:
    names = spec.param_names
    fixed = set(fixed) | structurally_fixed(spec)
    unknown = fixed - set(names) - {"q"}
    if unknown:
        raise SpecError(f"unknown parameter names {sorted(unknown)}")
    mask = np.array([n not in fixed for n in names])
    if "q" in fixed:
        mask[:spec.n_ages] = False
    return mask


def initial_theta(spec: ModelSpec, data: Dataset) -> ParameterVector:
    """Per-age link-scale means; variances at log(0.5); rho at 0."""
    fam = spec.family_model()
    cells = data.t * spec.n_ages + data.a
    s0 = fam.initial_dispersion(data.y, cells) if data.n > 1 else 0.0
    q0 = np.zeros(spec.n_ages)
    for a in range(spec.n_ages):
        ya = data.y[data.a == a]
        if ya.size:
            q0[a] = float(fam.eta_from_mean(np.mean(ya), s0))
    pt = 0.0 if spec.estimate_power else None
    return ParameterVector(q=q0, log_sigma=np.log(0.5), log_delta=np.log(0.5),
                           rho_transform=0.0, dispersion_transform=s0, power_transform=pt)


def _bounds(spec: ModelSpec, options: FitOptions):
    b = [(None, None)] * spec.n_ages
    sd = (options.log_sd_floor, _LOG_BOUNDS[1])
    b += [sd, sd, _RHO_BOUNDS, _DISP_BOUNDS]
    if spec.estimate_power:
        b.append(_POWER_BOUNDS)
    return b


def fit(data: Dataset, spec: ModelSpec, options: FitOptions | None = None) -> FitResult:
    """Maximise the Laplace marginal likelihood and predict the random effects."""
    options = options or FitOptions()
    prob = Problem(spec, data)
    free = free_mask(spec, options.fixed)
    if options.theta_init is not None:
        options.theta_init.check(spec)
        th = options.theta_init.to_array()
    else:
        if (~free & ~_structural_mask(spec)).any():
            raise SpecError("fixed parameters need FitOptions.theta_init")
        th = initial_theta(spec, data).to_array()
    bounds = _bounds(spec, options)
    th = _clip(th, bounds, free)
    tol_in, max_in = options.tol_inner, options.max_inner
    inner_its = 0
    outer_its = 0
    message = ""
    ld = idx_log_delta(spec)

    ls, ir, idisp = idx_log_sigma(spec), idx_rho(spec), idx_dispersion(spec)
    low = options.log_sd_floor + options.boundary_margin

    def boundary_mask(theta_arr):
        b = np.zeros(spec.n_theta, dtype=bool)
        b[ld] = free[ld] and theta_arr[ld] <= low
        if free[ls] and theta_arr[ls] <= low:
            # without year variation the autocorrelation is not identified
            b[ls] = True
            b[ir] = free[ir]
        b[ir] |= free[ir] and abs(theta_arr[ir]) >= _RHO_BOUNDS[1] - 1e-3
        b[idisp] = free[idisp] and abs(theta_arr[idisp]) >= _DISP_BOUNDS[1] - 1e-3
        return b

    st = prob.inner(th, None, tol_in, max_in)
    inner_its += st.iterations
    active = free & ~boundary_mask(th)
    g = prob.laplace_grad(th, st, free)
    need_search = active.any() and np.max(np.abs(g[active])) > options.tol_outer

    if need_search and free.any():
        cache = {"x": st.x.copy(), "f": -prob.laplace(th, st)}
        fidx = np.flatnonzero(free)

        def objective(z):
            nonlocal inner_its
            full = th.copy()
            full[fidx] = z
            try:
                sti = prob.inner(full, cache["x"], tol_in, max_in)
            except _INFEASIBLE:
                return abs(cache["f"]) * 10.0 + 1e10, np.zeros(z.size)
            inner_its += sti.iterations
            val = prob.laplace(full, sti)
            gr = prob.laplace_grad(full, sti, free)
            if not np.isfinite(val) or not np.all(np.isfinite(gr)):
                return abs(cache["f"]) * 10.0 + 1e10, np.zeros(z.size)
            cache["x"] = sti.x
            cache["f"] = -val
            return -val, -gr[fidx]

        res = minimize(objective, th[fidx], jac=True, method="L-BFGS-B",
                       bounds=[bounds[i] for i in fidx],
                       options={"maxiter": options.max_outer, "gtol": options.tol_outer,
                                "ftol": 1e-15, "maxcor": 20})
        outer_its += int(res.nit)
        th[fidx] = res.x
        message = str(res.message)
        st = prob.inner(th, cache["x"], tol_in, max_in)
        inner_its += st.iterations

    active = free & ~boundary_mask(th)
    aidx = np.flatnonzero(active)
    val = prob.laplace(th, st)
    g = prob.laplace_grad(th, st, free)
    gnorm = float(np.max(np.abs(g[aidx]))) if aidx.size else 0.0
    hess = np.zeros((0, 0))
    for _ in range(options.polish_steps if need_search else 0):
        if gnorm <= options.tol_outer:
            break
        hess = prob.fd_hessian(th, st.x, aidx, options.hessian_step, tol_in, max_in)
        try:
            c = sla.cho_factor(-hess, lower=True, check_finite=False)
            step = sla.cho_solve(c, g[aidx], check_finite=False)
        except np.linalg.LinAlgError:
            message += "; polish skipped (parameter Hessian not negative definite)"
            break
        t = 1.0
        improved = False
        while t > 1e-6:
            cand = th.copy()
            cand[aidx] += t * step
            cand = _clip(cand, bounds, free)
            try:
                stc = prob.inner(cand, st.x, tol_in, max_in)
            except _INFEASIBLE:
                t *= 0.5
                continue
            vc = prob.laplace(cand, stc)
            if vc >= val - 1e-12 * (1.0 + abs(val)):
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        outer_its += 1
        inner_its += stc.iterations
        th, st, val = cand, stc, vc
        g = prob.laplace_grad(th, st, free)
        gnorm = float(np.max(np.abs(g[aidx]))) if aidx.size else 0.0

    if aidx.size:
        hess = prob.fd_hessian(th, st.x, aidx, options.hessian_step, tol_in, max_in)
    converged = gnorm <= options.tol_outer and st.grad_norm <= max(tol_in, st.grad_tol)
    theta_hat = ParameterVector.from_array(spec, th)
    boundary = tuple(spec.param_names[i] for i in np.flatnonzero(boundary_mask(th)))
    _check_pd(prob, th, st)
    return FitResult(
        spec=spec,
        theta_hat=theta_hat,
        psi_hat=RandomEffectVector.from_flat(spec, st.x),
        joint_hessian_psi=joint_hessian_psi(spec, theta_hat,
                                            RandomEffectVector.from_flat(spec, st.x), data),
        marginal_loglik=float(val),
        conditional_loglik=prob.lc(th, st.x),
        converged=bool(converged),
        inner_iterations=int(inner_its),
        outer_iterations=int(outer_its),
        gradient_norm=gnorm,
        inner_gradient_norm=float(st.grad_norm),
        free=free,
        active=active,
        boundary=boundary,
        hessian_theta=hess,
        options=options,
        message=message,
    )


def _structural_mask(spec):
    names = structurally_fixed(spec)
    return np.array([n in names for n in spec.param_names])


def _clip(th, bounds, free):
    out = th.copy()
    for i, (lo, hi) in enumerate(bounds):
        if not free[i]:
            continue
        if lo is not None:
            out[i] = max(out[i], lo)
        if hi is not None:
            out[i] = min(out[i], hi)
    return out


def refresh_problem(fit_result: FitResult, data: Dataset) -> tuple[Problem, np.ndarray, InnerState]:
    """Rebuild the evaluation kernel and inner state at the fitted point."""
    prob = Problem(fit_result.spec, data)
    th = fit_result.theta_hat.to_array()
    opts = fit_result.options
    st = prob.inner(th, fit_result.psi_hat.flat, opts.tol_inner, opts.max_inner)
    return prob, th, st


__all__ = [
    "FitOptions", "FitResult", "Problem", "fit", "inner_maximize_psi", "joint_hessian_psi",
    "laplace_marginal", "laplace_gradient", "initial_theta", "free_mask", "refresh_problem",
    "lc_param_mask", "idx_log_sigma", "idx_rho", "idx_dispersion",
]
