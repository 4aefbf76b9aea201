"""Sensitivity of the fitted parameters and random effects to the data.

The estimators are defined implicitly by stationarity conditions that
hold for any ``y``:

    d l(y, theta_hat) / d theta = 0        d l_j(y, theta_hat, psi_hat) / d psi = 0

Differentiating those in ``y`` gives

    d theta_hat' / dy = -(d2 l / dy dtheta') (d2 l / dtheta dtheta')^-1
    d psi_hat' / dy   = -(d2 l_j / dy dpsi' + d theta_hat'/dy d2 l_j / dtheta dpsi')
                        (d2 l_j / dpsi dpsi')^-1

The mixed ``y``/``theta`` partial of the Laplace marginal is obtained by
central differences in ``y`` of the analytic ``theta`` gradient.  A
refitting oracle is provided for validation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NonFiniteLikelihoodError, SingularHessianError, UnsupportedFamilyError
from .estimation import FitOptions, FitResult, Problem, fit as _fit, refresh_problem
from .model import Dataset, Family

_COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class EstimatorJacobians:
    """Derivatives of the estimators at a fitted point.

    ``d_theta_dy[i, j] = d theta_hat_j / d y_i`` (n x dim theta),
    ``d_psi_dy[i, k] = d psi_hat_k / d y_i`` (n x q) and
    ``d_psi_dtheta[j, k] = d psi_hat_k / d theta_j`` (dim theta x q).
    Columns of ``d_theta_dy`` and rows of ``d_psi_dtheta`` belonging to
    fixed or boundary parameters are zero.
    """

    d_theta_dy: np.ndarray
    d_psi_dy: np.ndarray
    d_psi_dtheta: np.ndarray
    mixed_y_theta: np.ndarray
    hessian_theta: np.ndarray
    active: np.ndarray


def _require_continuous(spec):
    if spec.family not in (Family.GAUSSIAN, Family.GAMMA):
        raise UnsupportedFamilyError(
            f"derivatives in y are defined for continuous families only, not {spec.family.value}")


def _y_step(y_i, positive):
    h = 1e-4 * (1.0 + abs(y_i))
    if positive:
        h = min(h, 0.5 * y_i)
    return h


def mixed_partial_marginal_y_theta(fit: FitResult, data: Dataset) -> np.ndarray:
    """``d2 l / dy dtheta'`` as an (n, dim theta) array (zero on inactive columns)."""
    spec = fit.spec
    _require_continuous(spec)
    prob, th, st = refresh_problem(fit, data)
    opts = fit.options
    mask = np.asarray(fit.active, dtype=bool)
    n = data.n
    M = np.zeros((n, spec.n_theta))
    if not mask.any():
        return M
    sigma, delta, _, s = prob.scales(th)
    eta = prob.eta(th, st.x)
    c_eta, _ = prob.family(th).cross_y(prob.y, eta, s)
    Hinv = sla.cho_solve(st.chol, np.eye(prob.q), check_finite=False) if prob.q else None
    dz = prob.design
    positive = spec.family is Family.GAMMA
    y0 = prob.y.copy()
    for i in range(n):
        h = _y_step(y0[i], positive)
        # first-order prediction of the moved inner optimum as warm start
        if Hinv is not None:
            u = np.zeros(prob.q)
            if dz.has_year:
                u += sigma * Hinv[:, dz.year_col[i]]
            if dz.has_int:
                u += delta * Hinv[:, dz.int_col[i]]
            u *= c_eta[i]
        grads = []
        for sign in (1.0, -1.0):
            prob.y = y0.copy()
            prob.y[i] += sign * h
            x0 = st.x + sign * h * u if Hinv is not None else st.x
            sti = prob.inner(th, x0, opts.tol_inner, opts.max_inner)
            grads.append(prob.laplace_grad(th, sti, mask))
        M[i] = (grads[0] - grads[1]) / (2.0 * h)
        if not np.all(np.isfinite(M[i])):
            j = int(np.flatnonzero(~np.isfinite(M[i]))[0])
            raise NonFiniteLikelihoodError(f"non-finite mixed partial at (i={i}, j={j})", index=i)
    prob.y = y0
    return M


def _theta_hessian_inverse(fit: FitResult) -> np.ndarray:
    Hs = np.asarray(fit.hessian_theta)
    if Hs.size == 0:
        return Hs
    try:
        cond = np.linalg.cond(Hs)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularHessianError(
            f"parameter Hessian of the marginal likelihood is near-singular (cond={cond:.3e})")
    return np.linalg.inv(Hs)


def d_theta_dy(fit: FitResult, data: Dataset, mixed: np.ndarray | None = None) -> np.ndarray:
    """``d theta_hat / d y`` as an (n, dim theta) array."""
    M = mixed_partial_marginal_y_theta(fit, data) if mixed is None else mixed
    act = fit.active_index
    out = np.zeros_like(M)
    if act.size:
        out[:, act] = -M[:, act] @ _theta_hessian_inverse(fit)
    return out


def d_psi_dtheta(fit: FitResult, data: Dataset) -> np.ndarray:
    """``d psi_hat / d theta`` as a (dim theta, q) array (zero rows when inactive)."""
    prob, th, st = refresh_problem(fit, data)
    return _d_psi_dtheta(prob, th, st, fit.active)


def _d_psi_dtheta(prob: Problem, th, st, active):
    if prob.q == 0:
        return np.zeros((prob.spec.n_theta, 0))
    G = prob.mixed_psi_theta(th, st.x)
    V = sla.cho_solve(st.chol, G, check_finite=False)
    return (V * np.asarray(active, dtype=float)[None, :]).T


def _cross_y_psi(prob: Problem, th, x):
    """``d2 l_j / dy dpsi'`` as a dense (n, q) array."""
    sigma, delta, _, s = prob.scales(th)
    c_eta, _ = prob.family(th).cross_y(prob.y, prob.eta(th, x), s)
    return (prob.design.z_matrix(sigma, delta).multiply(c_eta[:, None])).toarray()


def d_psi_dy(fit: FitResult, data: Dataset, dtheta: np.ndarray | None = None) -> np.ndarray:
    """``d psi_hat / d y`` as an (n, q) array."""
    _require_continuous(fit.spec)
    prob, th, st = refresh_problem(fit, data)
    dtheta = d_theta_dy(fit, data) if dtheta is None else dtheta
    return _d_psi_dy(prob, th, st, dtheta)


def _d_psi_dy(prob, th, st, dtheta):
    if prob.q == 0:
        return np.zeros((prob.y.size, 0))
    C = _cross_y_psi(prob, th, st.x)
    G = prob.mixed_psi_theta(th, st.x)
    rhs = C + dtheta @ G.T
    return sla.cho_solve(st.chol, rhs.T, check_finite=False).T


def estimator_jacobians(fit: FitResult, data: Dataset) -> EstimatorJacobians:
    """All estimator derivatives, sharing one factorization of the RE Hessian."""
    _require_continuous(fit.spec)
    M = mixed_partial_marginal_y_theta(fit, data)
    dth = d_theta_dy(fit, data, M)
    prob, th, st = refresh_problem(fit, data)
    return EstimatorJacobians(
        d_theta_dy=dth,
        d_psi_dy=_d_psi_dy(prob, th, st, dth),
        d_psi_dtheta=_d_psi_dtheta(prob, th, st, fit.active),
        mixed_y_theta=M,
        hessian_theta=np.asarray(fit.hessian_theta),
        active=np.asarray(fit.active, dtype=bool),
    )


def stationarity_residuals(fit: FitResult, data: Dataset, jac: EstimatorJacobians):
    """Max-norm residuals of the two differentiated stationarity identities.

    Returns ``(r_theta, r_psi)`` for
    ``d2l/dy dtheta' + dtheta'/dy d2l/dtheta dtheta'`` on the active block and
    ``d2l_j/dy dpsi' + dtheta'/dy d2l_j/dtheta dpsi' + dpsi'/dy d2l_j/dpsi dpsi'``.
    """
    act = fit.active_index
    r_theta = 0.0
    if act.size:
        R = jac.mixed_y_theta[:, act] + jac.d_theta_dy[:, act] @ jac.hessian_theta
        r_theta = float(np.max(np.abs(R)))
    prob, th, st = refresh_problem(fit, data)
    if prob.q == 0:
        return r_theta, 0.0
    C = _cross_y_psi(prob, th, st.x)
    G = prob.mixed_psi_theta(th, st.x)
    J = -prob.neg_hess_psi(th, st.x)
    R2 = C + jac.d_theta_dy @ G.T + jac.d_psi_dy @ J
    return r_theta, float(np.max(np.abs(R2)))


def refit_jacobians(fit: FitResult, data: Dataset, eps: float = 1e-4, rows=None,
                    options: FitOptions | None = None):
    """Difference quotients of ``(theta_hat, psi_hat)`` from refitting perturbed data.

    Each selected ``y_i`` is moved by ``+-eps`` and the model refitted from
    the original optimum, keeping fixed and boundary parameters fixed.
    Returns ``(d_theta_dy, d_psi_dy)`` restricted to ``rows``.
    """
    spec = fit.spec
    rows = np.arange(data.n) if rows is None else np.asarray(rows)
    base = options or fit.options
    fixed = set(base.fixed) | set(fit.boundary)
    opts = FitOptions(tol_inner=base.tol_inner, tol_outer=base.tol_outer * 1e-2,
                      max_inner=base.max_inner, max_outer=base.max_outer, fixed=frozenset(fixed),
                      theta_init=fit.theta_hat, log_sd_floor=base.log_sd_floor,
                      boundary_margin=base.boundary_margin, polish_steps=base.polish_steps + 10,
                      hessian_step=base.hessian_step)
    dth = np.zeros((rows.size, spec.n_theta))
    dps = np.zeros((rows.size, spec.q))
    for r, i in enumerate(rows):
        outs = []
        for sign in (1.0, -1.0):
            y = data.y.copy()
            y[i] += sign * eps
            res = _fit(data.with_y(y), spec, opts)
            outs.append((res.theta_hat.to_array(), res.psi_hat.flat))
        dth[r] = (outs[0][0] - outs[1][0]) / (2.0 * eps)
        dps[r] = (outs[0][1] - outs[1][1]) / (2.0 * eps)
    return dth, dps


__all__ = [
    "EstimatorJacobians", "mixed_partial_marginal_y_theta", "d_theta_dy", "d_psi_dy",
    "d_psi_dtheta", "estimator_jacobians", "stationarity_residuals", "refit_jacobians",
]
