"""Conditional AIC penalties.

Method 1 is the first-order Stein-type covariance penalty

    2 sum_i Var(y_i) d/dy_i [d log f_i / dy_i](theta_hat(y), psi_hat(y))

with the second-derivative factor evaluated at the fitted mean.  It needs
a log density differentiable in ``y`` and so applies to Gaussian and gamma
data only.

Method 2 applies to every family:

    penalty = 2 p_c + 2 q - 2 tr{ (d2 l_j / dpsi dpsi')^-1 (d2 l_r / dpsi dpsi') }
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla

from .derivatives import (
    EstimatorJacobians,
    _d_psi_dtheta,
    _theta_hessian_inverse,
    estimator_jacobians,
)
from .errors import BoundaryError, UnsupportedFamilyError
from .estimation import FitResult, refresh_problem
from .model import Dataset, Family, lc_param_mask

_TRACE_SLACK = 1e-8


@dataclass(frozen=True)
class CaicReport:
    neg2_lc: float
    p_c: int
    q: int
    method2_trace: float
    method2_penalty: float
    caic_method2: float
    method1_penalty: float | None = None
    caic_method1: float | None = None
    small_sample_term: float | None = None
    flags: tuple[str, ...] = field(default=())

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["flags"] = ";".join(self.flags)
        rec["effective_df"] = effective_df(self)
        return rec


def count_pc(fit: FitResult) -> int:
    """Number of estimated parameters entering the conditional likelihood."""
    return int(np.sum(lc_param_mask(fit.spec) & np.asarray(fit.free, dtype=bool)))


def _method2_parts(fit: FitResult, data: Dataset):
    prob, th, st = refresh_problem(fit, data)
    q = prob.q
    flags = []
    if q:
        P = prob.prior(np.tanh(th[prob.A + 2]))
        trace = float(np.trace(sla.cho_solve(st.chol, P, check_finite=False)))
        if np.any(prob.derivs(th, st.x).d2 > 0):
            flags.append("lc_not_nsd")
    else:
        trace = 0.0
    if trace < -_TRACE_SLACK or trace > q + _TRACE_SLACK:
        flags.append("trace_out_of_bounds")
    neg2_lc = -2.0 * prob.lc(th, st.x)
    return prob, th, st, trace, neg2_lc, flags


def caic_method2(fit: FitResult, data: Dataset) -> CaicReport:
    _, _, _, trace, neg2_lc, flags = _method2_parts(fit, data)
    p_c = count_pc(fit)
    q = fit.spec.q
    pen = 2.0 * p_c + 2.0 * q - 2.0 * trace
    return CaicReport(neg2_lc=neg2_lc, p_c=p_c, q=q, method2_trace=trace, method2_penalty=pen,
                      caic_method2=neg2_lc + pen, flags=tuple(flags))


def method1_penalty(fit: FitResult, data: Dataset, jacobians: EstimatorJacobians,
                    variance: np.ndarray | None = None) -> float:
    """Covariance penalty from the estimator Jacobians.

    ``variance`` overrides the model-implied conditional variances at the
    fitted point (for example with the generating values in a simulation).
    """
    spec = fit.spec
    if spec.family not in (Family.GAUSSIAN, Family.GAMMA):
        raise UnsupportedFamilyError(
            f"the covariance penalty needs a continuous family, not {spec.family.value}")
    prob, th, st = refresh_problem(fit, data)
    A = prob.A
    sigma, delta, _, s = prob.scales(th)
    fam = prob.family(th)
    eta = prob.eta(th, st.x)
    mu, var = fam.moments(eta, s)
    var = np.asarray(var, dtype=float) if variance is None else np.asarray(variance, dtype=float)
    c_eta, c_s = fam.cross_y(mu, eta, s)

    dth = jacobians.d_theta_dy
    dps = jacobians.d_psi_dy
    n = data.n
    dz = prob.design
    rows = np.arange(n)
    py, pi = dz.re_parts(st.x)
    deta = dth[rows, dz.age]
    deta = deta + dth[:, A] * sigma * py + dth[:, A + 1] * delta * pi
    if dz.has_year:
        deta = deta + sigma * dps[rows, dz.year_col]
    if dz.has_int:
        deta = deta + delta * dps[rows, dz.int_col]
    ds = dth[:, A + 3]
    return float(2.0 * np.sum(var * (c_eta * deta + c_s * ds)))


def caic_method1(fit: FitResult, data: Dataset, jacobians: EstimatorJacobians | None = None,
                 variance: np.ndarray | None = None) -> CaicReport:
    """Report carrying both penalties; Method 1 requires a continuous family."""
    if fit.spec.family not in (Family.GAUSSIAN, Family.GAMMA):
        raise UnsupportedFamilyError(
            f"the covariance penalty needs a continuous family, not {fit.spec.family.value}")
    jacobians = estimator_jacobians(fit, data) if jacobians is None else jacobians
    rep = caic_method2(fit, data)
    pen = method1_penalty(fit, data, jacobians, variance)
    return CaicReport(neg2_lc=rep.neg2_lc, p_c=rep.p_c, q=rep.q,
                      method2_trace=rep.method2_trace, method2_penalty=rep.method2_penalty,
                      caic_method2=rep.caic_method2, method1_penalty=pen,
                      caic_method1=rep.neg2_lc + pen, flags=rep.flags)


def effective_df(report: CaicReport) -> float:
    return report.p_c + report.q - report.method2_trace


def small_sample_term(fit: FitResult, data: Dataset,
                      jacobians: EstimatorJacobians | None = None) -> float:
    """``-2 tr{ P dpsi_hat/dtheta' Cov(theta_hat) dpsi_hat'/dtheta }``.

    ``P`` is the fitted random-effect precision and ``Cov`` the inverse
    observed information of the marginal likelihood.  Undefined when a
    variance parameter sits on its boundary.
    """
    if fit.at_boundary:
        raise BoundaryError(
            f"parameters {list(fit.boundary)} are on the boundary; their covariance cannot be "
            "estimated from the inverse observed information")
    prob, th, st = refresh_problem(fit, data)
    act = fit.active_index
    if prob.q == 0 or act.size == 0:
        return 0.0
    if jacobians is not None:
        D = jacobians.d_psi_dtheta
    else:
        D = _d_psi_dtheta(prob, th, st, fit.active)
    D = D[act]
    cov = -_theta_hessian_inverse(fit)
    P = prob.prior(np.tanh(th[prob.A + 2]))
    return float(-2.0 * np.trace(P @ D.T @ cov @ D))


__all__ = ["CaicReport", "caic_method1", "caic_method2", "method1_penalty", "effective_df",
           "small_sample_term", "count_pc"]
