"""Loss functions, calibration-weight rules, quadrature and GP prediction.

Four loss families are implemented:

- sum of squares (continuous responses),
- quasi-likelihood for counts (log link, Poisson-shaped score),
- negative partial log-likelihood for right-censored event times,
- an L2 discrepancy between a nonparametric GP prediction and the linear
  approximation, discretized on a tensor quadrature grid.

Every loss returns a :class:`LossEvaluation` with value, gradient and (where
available) Hessian, all with respect to the p-vector of linear coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .designs import Design, UniqueTreatmentStructure
from .errors import (
    DegenerateDataError,
    DegenerateLossError,
    GpFitError,
    NoReplicationError,
    OverflowGuardError,
    RankError,
)

ETA_OVERFLOW = 700.0
WEIGHT_CLAMP = (1e-6, 1e6)


@dataclass
class LossEvaluation:
    """Value and derivatives of a loss at one parameter point."""

    value: float
    gradient: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None


@dataclass(frozen=True)
class WeightRule:
    """Calibration-weight rule: how w in exp(-w * loss) is chosen.

    kind is one of ``fixed``, ``pure_error``, ``dispersion``, ``l2_trace``,
    ``unit``, ``random_conjugate``; ``value`` is only used by ``fixed``.
    """

    kind: str
    value: Optional[float] = None

    KNOWN = ("fixed", "pure_error", "dispersion", "l2_trace", "unit", "random_conjugate")

    def __post_init__(self):
        if self.kind not in self.KNOWN:
            raise ValueError(f"unknown weight rule {self.kind!r}")
        if self.kind == "fixed":
            if self.value is None or not self.value > 0:
                raise ValueError("fixed weight rule needs a positive value")


# ---------------------------------------------------------------------------
# sum-of-squares family
# ---------------------------------------------------------------------------

def ss_loss(t: np.ndarray, y: np.ndarray, f: np.ndarray) -> LossEvaluation:
    """Sum of squared residuals sum_i (y_i - f(x_i)'t)^2.

    Gradient is -2 F'(y - Ft), Hessian the constant 2 F'F.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    r = y - f @ t
    return LossEvaluation(
        value=float(r @ r),
        gradient=-2.0 * (f.T @ r),
        hessian=2.0 * (f.T @ f),
    )


def pure_error_variance(y: np.ndarray, uts: UniqueTreatmentStructure) -> float:
    """Replication-based error variance y'(I - H_Z)y / (n - q).

    Model-free: depends on the design only through the unique-treatment
    grouping, never on a regression spec.

    Raises
    ------
    NoReplicationError
        If d = n - q = 0 (no repeated treatment).
    """
    if uts.d <= 0:
        raise NoReplicationError(
            "pure-error variance needs at least one repeated treatment (d = 0)"
        )
    y = np.asarray(y, dtype=float)
    group_means = (uts.z.T @ y) / uts.counts
    resid = y - uts.z @ group_means
    return float(resid @ resid / uts.d)


def dispersion_weight(y: np.ndarray, f: np.ndarray, eta_hat: np.ndarray) -> tuple[float, bool]:
    """Reciprocal Pearson dispersion (n - p) / sum (y - mu)^2 / mu at the fit.

    Returns (w, clamped) where ``clamped`` reports that the Pearson statistic
    was extreme and w was clamped to the safe range.
    """
    y = np.asarray(y, dtype=float)
    mu = np.exp(eta_hat)
    n, p = f.shape
    pearson = float(np.sum((y - mu) ** 2 / mu))
    if pearson <= 1e-12:
        return WEIGHT_CLAMP[1], True
    w = (n - p) / pearson
    if w < WEIGHT_CLAMP[0] or w > WEIGHT_CLAMP[1]:
        return float(np.clip(w, *WEIGHT_CLAMP)), True
    return float(w), False


def resolve_weight(rule: WeightRule, *, y=None, f=None, uts=None, eta_hat=None,
                   gpfit=None, quad=None, f_nodes=None) -> float:
    """Resolve a calibration-weight rule to a positive number.

    Only the context pieces the rule needs have to be supplied:
    ``pure_error`` needs (y, uts); ``dispersion`` needs (y, f, eta_hat);
    ``l2_trace`` needs (y, design-bound gpfit, quad, f_nodes).

    Raises
    ------
    DegenerateDataError
        If a rule's denominator is below 1e-12.
    """
    if rule.kind == "unit":
        return 1.0
    if rule.kind == "fixed":
        return float(rule.value)
    if rule.kind == "pure_error":
        s2 = pure_error_variance(y, uts)
        if s2 <= 1e-12:
            raise DegenerateDataError("pure-error variance is zero; weight undefined")
        return 1.0 / (2.0 * s2)
    if rule.kind == "dispersion":
        w, _ = dispersion_weight(y, f, eta_hat)
        return w
    if rule.kind == "l2_trace":
        return l2_trace_weight(y, gpfit, quad, f_nodes)[0]
    raise ValueError(f"rule {rule.kind!r} has no scalar resolution")


# ---------------------------------------------------------------------------
# quasi-likelihood (count) family
# ---------------------------------------------------------------------------

def ql_loss(t: np.ndarray, y: np.ndarray, f: np.ndarray) -> LossEvaluation:
    """Quasi-likelihood loss sum_i [exp(eta_i) - y_i eta_i], eta = Ft.

    Raises
    ------
    OverflowGuardError
        If any |eta_i| > 700; such parameter values signal an absurd draw
        and are surfaced rather than clamped.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    eta = f @ t
    if np.max(np.abs(eta)) > ETA_OVERFLOW:
        raise OverflowGuardError(f"|eta| exceeds {ETA_OVERFLOW}; parameter draw rejected")
    mu = np.exp(eta)
    return LossEvaluation(
        value=float(np.sum(mu - y * eta)),
        gradient=f.T @ (mu - y),
        hessian=(f * mu[:, None]).T @ f,
    )


# ---------------------------------------------------------------------------
# partial-likelihood (time-to-event) family
# ---------------------------------------------------------------------------

def pl_loss(t: np.ndarray, y: np.ndarray, c: np.ndarray, f: np.ndarray) -> LossEvaluation:
    """Negative partial log-likelihood with risk sets {j : y_j >= y_i}.

    Censored runs (c_i = 0) contribute to risk sets but add no summand.
    Ties are broken by run index, giving a strict (y, index) ordering; the
    designer distributions here are continuous so ties have measure zero.

    Raises
    ------
    DegenerateLossError
        If every run is censored (the loss is constant zero).
    OverflowGuardError
        If any |eta_i| > 700.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    c = np.asarray(c)
    n, p = f.shape
    if not np.any(c == 1):
        raise DegenerateLossError("all runs censored; partial likelihood is constant")
    eta = f @ t
    if np.max(np.abs(eta)) > ETA_OVERFLOW:
        raise OverflowGuardError(f"|eta| exceeds {ETA_OVERFLOW}; parameter draw rejected")

    # ascending (y, index); risk set of position m is the suffix m..n-1
    order = np.lexsort((np.arange(n), y))
    eta_s = eta[order]
    f_s = f[order]
    c_s = (c[order] == 1)

    eta_max = eta_s.max()
    w = np.exp(eta_s - eta_max)  # stabilized hazards
    # suffix sums: T_m = sum_{j >= m} w_j, S_m = sum_{j >= m} w_j f_j
    tsum = np.cumsum(w[::-1])[::-1]
    ssum = np.cumsum((f_s * w[:, None])[::-1], axis=0)[::-1]

    value = float(np.sum(np.log(tsum[c_s]) + eta_max - eta_s[c_s]))

    # gradient: sum over events m of (S_m / T_m - f_m)
    grad = ssum[c_s].T @ (1.0 / tsum[c_s]) - f_s[c_s].sum(axis=0)

    # Hessian: sum over events of (sum_j pi_mj f_j f_j' - g_m g_m')
    # first piece via prefix sums of c_m / T_m
    a = np.cumsum(np.where(c_s, 1.0 / tsum, 0.0))
    hess = (f_s * (w * a)[:, None]).T @ f_s
    g_events = ssum[c_s] / tsum[c_s][:, None]
    hess -= g_events.T @ g_events
    return LossEvaluation(value=value, gradient=grad, hessian=hess)


# ---------------------------------------------------------------------------
# quadrature and GP prediction for the L2 loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureGrid:
    """Tensor-product quadrature on [-1, 1]^k: nodes (M, k), weights (M,)."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def m(self) -> int:
        return self.nodes.shape[0]


def gauss_legendre_grid(k: int, m_per_dim: int) -> QuadratureGrid:
    """Tensor product of 1-d Gauss-Legendre rules on [-1, 1].

    M = m_per_dim ** k nodes; weights are positive and sum to 2^k.
    """
    if m_per_dim < 1:
        raise ValueError("m_per_dim must be >= 1")
    x1, w1 = np.polynomial.legendre.leggauss(m_per_dim)
    grids = np.meshgrid(*([x1] * k), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    wgrids = np.meshgrid(*([w1] * k), indexing="ij")
    weights = np.ones(m_per_dim ** k)
    for g in wgrids:
        weights = weights * g.ravel()
    return QuadratureGrid(nodes=nodes, weights=weights)


def sq_exp_corr(a: np.ndarray, b: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Squared-exponential correlation exp(-sum_z alpha_z (a_z - b_z)^2)."""
    d2 = (a[:, None, :] - b[None, :, :]) ** 2
    return np.exp(-np.tensordot(d2, alpha, axes=([2], [0])))


@dataclass(frozen=True)
class GpFit:
    """Zero-mean GP with nugget, fitted for prediction.

    ``vbar`` is (nugget * I + B)^{-1} at the fitted parameters, the only
    matrix downstream predictions need.  ``phi2`` is the profiled process
    variance (it cancels out of the predictive mean). ``degenerate`` flags
    the all-zero-response fallback.
    """

    phi2: float
    nu: float
    alpha: np.ndarray
    vbar: np.ndarray
    bbar: np.ndarray
    loo_mse: float
    degenerate: bool = False


def _loo_mse(y: np.ndarray, corr: np.ndarray, nu: float) -> float:
    """LOO mean squared prediction error via the rank-one identity.

    For the smoother with C = nu*I + B, the leave-one-out residual is
    (C^{-1} y)_i / (C^{-1})_ii.
    """
    n = len(y)
    cmat = corr + nu * np.eye(n)
    try:
        cf = cho_factor(cmat, lower=True)
    except np.linalg.LinAlgError:
        return np.inf
    cinv_y = cho_solve(cf, y)
    cinv = cho_solve(cf, np.eye(n))
    diag = np.diag(cinv)
    if np.any(diag <= 0):
        return np.inf
    resid = cinv_y / diag
    return float(np.mean(resid ** 2))


def gp_fit_loo(y: np.ndarray, design: Design, restarts: int = 10, seed: int = 0) -> GpFit:
    """Fit (nugget, inverse length-scales) by leave-one-out cross validation.

    The LOO criterion is mean squared prediction error; the process variance
    does not enter the predictive mean and is profiled afterwards as
    y' (nu I + B)^{-1} y / n.  Optimization runs over log-parameters with
    bounds nu in [1e-6, 1e3], alpha_z in [1e-3, 1e3], L-BFGS-B from
    ``restarts`` deterministic random starts.

    Raises
    ------
    GpFitError
        If no start produces a finite LOO error.
    """
    y = np.asarray(y, dtype=float)
    n, k = design.n, design.k
    if n < 3:
        raise GpFitError("need n >= 3 for leave-one-out fitting")
    if np.allclose(y, 0.0):
        # any parameters give zero LOO error; return flagged defaults
        alpha = np.ones(k)
        bbar = sq_exp_corr(design.points, design.points, alpha)
        vbar = np.linalg.inv(bbar + 1.0 * np.eye(n))
        return GpFit(phi2=1.0, nu=1.0, alpha=alpha, vbar=vbar, bbar=bbar,
                     loo_mse=0.0, degenerate=True)

    pts = design.points
    d2 = (pts[:, None, :] - pts[None, :, :]) ** 2  # (n, n, k), reused per eval

    lo = np.log(np.concatenate(([1e-6], np.full(k, 1e-3))))
    hi = np.log(np.concatenate(([1e3], np.full(k, 1e3))))

    def objective(logparams):
        nu = np.exp(logparams[0])
        alpha = np.exp(logparams[1:])
        corr = np.exp(-d2 @ alpha)
        val = _loo_mse(y, corr, nu)
        return val if np.isfinite(val) else 1e30

    rng = np.random.default_rng(seed)
    best_val, best_x = np.inf, None
    starts = [np.log(np.concatenate(([0.1], np.ones(k))))]
    starts += [rng.uniform(lo, hi) for _ in range(max(restarts - 1, 0))]
    for x0 in starts:
        res = minimize(objective, x0, method="L-BFGS-B",
                       bounds=list(zip(lo, hi)), options={"maxiter": 200})
        if res.fun < best_val:
            best_val, best_x = res.fun, res.x
    if best_x is None or not np.isfinite(best_val) or best_val >= 1e30:
        raise GpFitError("LOO optimization failed at every start", best_params=best_x)

    nu = float(np.exp(best_x[0]))
    alpha = np.exp(best_x[1:])
    bbar = np.exp(-d2 @ alpha)
    vbar = np.linalg.inv(bbar + nu * np.eye(n))
    phi2 = float(y @ vbar @ y / n)
    return GpFit(phi2=phi2, nu=nu, alpha=alpha, vbar=vbar, bbar=bbar, loo_mse=best_val)


def gp_predict_mean(x: np.ndarray, design: Design, fit: GpFit, y: np.ndarray) -> np.ndarray:
    """Predictive mean b(x)' vbar y at one or more points x (rows)."""
    x = np.atleast_2d(x)
    b = sq_exp_corr(x, design.points, fit.alpha)
    return b @ (fit.vbar @ y)


# ---------------------------------------------------------------------------
# L2 loss machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class L2Operator:
    """Precomputed pieces of the L2 loss for one (design, spec, quad, fit).

    ``core`` maps a response vector to the loss minimizer:
    theta_hat = core @ y with core = E_Q^{-1} F_Q' D_Q vbar.
    """

    e_q: np.ndarray        # (p, p) quadrature Gram of the regression
    f_nodes: np.ndarray    # (M, p) regression at the nodes
    f_q: np.ndarray        # (M, p) rows scaled by quadrature weights
    d_q: np.ndarray        # (M, n) correlation nodes-to-design at fitted alpha
    core: np.ndarray       # (p, n)
    weights: np.ndarray    # (M,) quadrature weights

    def mestimate(self, y: np.ndarray) -> np.ndarray:
        return self.core @ y


def l2_operator(design: Design, f_nodes: np.ndarray, quad: QuadratureGrid, fit: GpFit) -> L2Operator:
    """Assemble the linear map behind the L2 loss minimizer.

    Raises
    ------
    RankError
        If the quadrature Gram E_Q is numerically singular (grid too coarse
        for the regression degree).
    """
    f_q = f_nodes * quad.weights[:, None]
    e_q = f_nodes.T @ f_q
    d_q = sq_exp_corr(quad.nodes, design.points, fit.alpha)
    try:
        cf = cho_factor((e_q + e_q.T) / 2.0, lower=True)
    except np.linalg.LinAlgError as exc:
        raise RankError("quadrature Gram E_Q is singular") from exc
    core = cho_solve(cf, f_q.T @ (d_q @ fit.vbar))
    return L2Operator(e_q=e_q, f_nodes=f_nodes, f_q=f_q, d_q=d_q, core=core,
                      weights=quad.weights)


def l2_mestimator(y: np.ndarray, design: Design, f_nodes: np.ndarray,
                  quad: QuadratureGrid, fit: GpFit) -> tuple[np.ndarray, L2Operator]:
    """Closed-form minimizer of the L2 loss, plus the reusable operator."""
    op = l2_operator(design, f_nodes, quad, fit)
    return op.mestimate(np.asarray(y, dtype=float)), op


def l2_loss(t: np.ndarray, y: np.ndarray, op: L2Operator, fit: GpFit) -> LossEvaluation:
    """Quadrature discrepancy sum_m s_m [mu_hat(chi_m; y) - f(chi_m)'t]^2."""
    t = np.asarray(t, dtype=float)
    pred = op.d_q @ (fit.vbar @ np.asarray(y, dtype=float))
    r = pred - op.f_nodes @ t
    return LossEvaluation(
        value=float(np.sum(op.weights * r * r)),
        gradient=-2.0 * (op.f_q.T @ r),
        hessian=2.0 * op.e_q,
    )


def l2_trace_weight(y: np.ndarray, fit: GpFit, quad: QuadratureGrid,
                    f_nodes: np.ndarray, op: Optional[L2Operator] = None,
                    design: Optional[Design] = None) -> tuple[float, float]:
    """Trace-matching calibration weight for the L2 loss.

    w = tr(E_Q^{-1}) / (2 sbar^2 tr(core core')) where sbar^2 is the GP
    smoother's residual variance estimate.  Returns (w, sbar2).
    """
    y = np.asarray(y, dtype=float)
    if op is None:
        op = l2_operator(design, f_nodes, quad, fit)
    n = len(y)
    smooth = fit.bbar @ fit.vbar
    resid = y - smooth @ y
    r_mat = np.eye(n) - smooth
    denom_tr = float(np.trace(r_mat.T @ r_mat))
    if denom_tr <= 1e-12:
        raise DegenerateDataError("GP smoother leaves no residual degrees of freedom")
    sbar2 = float(resid @ resid / denom_tr)
    try:
        cf = cho_factor((op.e_q + op.e_q.T) / 2.0, lower=True)
    except np.linalg.LinAlgError as exc:
        raise RankError("quadrature Gram E_Q is singular") from exc
    tr_eq_inv = float(np.trace(cho_solve(cf, np.eye(op.e_q.shape[0]))))
    tr_sandwich = float(np.sum(op.core * op.core))
    if sbar2 * tr_sandwich <= 1e-12:
        raise DegenerateDataError("trace-rule denominator collapsed")
    return tr_eq_inv / (2.0 * sbar2 * tr_sandwich), sbar2
