"""Gibbs posterior approximation: mode finding, Laplace curvature, closed forms.

The generic path maximizes -w*loss(t) + log_prior(t) with a damped Newton
iteration when the loss supplies an analytic Hessian, falling back to BFGS
restarts otherwise, then takes the covariance as the inverse Hessian of the
negative log posterior at the mode.  Three closed-form posteriors cover the
linear-model cases where no numerical work is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from .designs import UniqueTreatmentStructure
from .errors import (
    CurvatureError,
    DofError,
    ModeError,
    NoReplicationError,
    OverflowGuardError,
    RankError,
)
from .losses import LossEvaluation, pure_error_variance

GRAD_TOL = 1e-8
MAX_ITER = 200
RESTARTS = 5
RESTART_SCALE = 0.5
SPD_FLOOR = 1e-10
SPD_REPAIR_LIMIT = 1e-6

LossFn = Callable[[np.ndarray], LossEvaluation]
PriorFn = Callable[[np.ndarray], LossEvaluation]


@dataclass(frozen=True)
class GibbsPosteriorApprox:
    """Normal or multivariate-t posterior summary.

    ``covariance_or_scale`` is the covariance for kind ``normal`` and the
    scale matrix for kind ``multivariate_t`` (with ``dof`` degrees of
    freedom).  ``repaired`` flags an eigenvalue repair of the curvature;
    ``boundary`` flags a mode on the feasible-box boundary; ``degenerate``
    flags a collapsed scale (perfect fit).
    """

    kind: str
    mode: np.ndarray
    covariance_or_scale: np.ndarray
    dof: Optional[float] = None
    repaired: bool = False
    boundary: bool = False
    degenerate: bool = False

    def __post_init__(self):
        if self.kind not in ("normal", "multivariate_t"):
            raise ValueError(f"unknown posterior kind {self.kind!r}")
        if self.kind == "multivariate_t" and (self.dof is None or self.dof <= 0):
            raise DofError("multivariate_t posterior needs dof > 0")


def flat_prior(t: np.ndarray) -> LossEvaluation:
    """Improper uniform prior: zero log-density contribution everywhere."""
    p = len(t)
    return LossEvaluation(value=0.0, gradient=np.zeros(p), hessian=np.zeros((p, p)))


def gaussian_prior(mean: np.ndarray, var: float) -> PriorFn:
    """Independent N(mean, var) log-prior with analytic derivatives."""
    mean = np.asarray(mean, dtype=float)

    def logpdf(t: np.ndarray) -> LossEvaluation:
        d = t - mean
        p = len(t)
        return LossEvaluation(
            value=float(-0.5 * d @ d / var),
            gradient=-d / var,
            hessian=-np.eye(p) / var,
        )

    return logpdf


def _objective(loss: LossFn, w: float, log_prior: PriorFn, t: np.ndarray):
    """phi(t) = w*loss - log_prior (minimized), with gradient and Hessian."""
    le = loss(t)
    pe = log_prior(t)
    val = w * le.value - pe.value
    grad = w * le.gradient - pe.gradient if le.gradient is not None else None
    hess = None
    if le.hessian is not None and pe.hessian is not None:
        hess = w * le.hessian - pe.hessian
    return val, grad, hess


def posterior_mode(loss: LossFn, w: float, init: np.ndarray,
                   log_prior: PriorFn = flat_prior,
                   bounds: Optional[tuple[np.ndarray, np.ndarray]] = None,
                   restarts: int = RESTARTS, restart_seed: int = 0,
                   grad_tol: float = GRAD_TOL) -> tuple[np.ndarray, bool]:
    """Maximize -w*loss(t) + log_prior(t).

    Returns (mode, on_boundary).  Deterministic given ``init`` and
    ``restart_seed``: restarts perturb the init with scale 0.5 draws from a
    generator seeded by the restart index.

    A damped Newton iteration with Armijo backtracking is used when the loss
    supplies a Hessian; otherwise BFGS with the analytic gradient.  With
    ``bounds``, iterates are projected onto the box and convergence is judged
    on the projected gradient.

    Raises
    ------
    ModeError
        If no restart reaches gradient max-norm < ``grad_tol``; carries the
        best iterate and its gradient norm.
    """
    init = np.asarray(init, dtype=float)
    best, best_norm, best_boundary = None, np.inf, False
    for r in range(max(restarts, 1)):
        if r == 0:
            t0 = init
        else:
            rng = np.random.default_rng((restart_seed, r))
            t0 = init + RESTART_SCALE * rng.standard_normal(len(init))
            if bounds is not None:
                t0 = np.clip(t0, bounds[0], bounds[1])
        try:
            t, norm, boundary = _solve_once(loss, w, log_prior, t0, bounds, grad_tol)
        except (np.linalg.LinAlgError, FloatingPointError, OverflowGuardError):
            continue
        if norm < best_norm:
            best, best_norm, best_boundary = t, norm, boundary
        if best_norm < grad_tol:
            return best, best_boundary
    raise ModeError(
        f"posterior mode search failed (best gradient max-norm {best_norm:.3g})",
        best=best, grad_norm=best_norm,
    )


def _project(t, bounds):
    return t if bounds is None else np.clip(t, bounds[0], bounds[1])


def _conv_norm(t, grad, bounds):
    """Projected-gradient max-norm (reduces to the plain norm without bounds)."""
    if bounds is None:
        return float(np.max(np.abs(grad)))
    lo, hi = bounds
    eps = 1e-12
    g = grad.copy()
    g[(t <= lo + eps) & (g > 0)] = 0.0
    g[(t >= hi - eps) & (g < 0)] = 0.0
    return float(np.max(np.abs(g)))


def _solve_once(loss, w, log_prior, t0, bounds, grad_tol):
    t = _project(np.array(t0, dtype=float), bounds)
    val, grad, hess = _objective(loss, w, log_prior, t)
    if grad is None:
        return _solve_bfgs(loss, w, log_prior, t, bounds, grad_tol)
    for _ in range(MAX_ITER):
        norm = _conv_norm(t, grad, bounds)
        if norm < grad_tol:
            return t, norm, _on_boundary(t, bounds)
        if hess is None:
            return _solve_bfgs(loss, w, log_prior, t, bounds, grad_tol)
        step = _newton_step(hess, grad)
        # Armijo backtracking on the descent direction
        scale, accepted = 1.0, False
        for _ in range(60):
            cand = _project(t - scale * step, bounds)
            try:
                cval, cgrad, chess = _objective(loss, w, log_prior, cand)
            except (FloatingPointError, OverflowGuardError):
                scale *= 0.5
                continue
            if np.isfinite(cval) and cval <= val - 1e-4 * scale * float(grad @ step):
                t, val, grad, hess = cand, cval, cgrad, chess
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            norm = _conv_norm(t, grad, bounds)
            return t, norm, _on_boundary(t, bounds)
    return t, _conv_norm(t, grad, bounds), _on_boundary(t, bounds)


def _newton_step(hess, grad):
    """Newton direction with escalating Levenberg damping until descent."""
    p = len(grad)
    damp = 0.0
    scale = max(float(np.max(np.abs(np.diag(hess)))), 1.0)
    for _ in range(12):
        try:
            step = np.linalg.solve(hess + damp * scale * np.eye(p), grad)
            if step @ grad > 0:
                return step
        except np.linalg.LinAlgError:
            pass
        damp = 1e-8 * scale if damp == 0.0 else damp * 10.0
    return grad / scale  # steepest descent fallback


def _solve_bfgs(loss, w, log_prior, t0, bounds, grad_tol):
    def fun(t):
        val, grad, _ = _objective(loss, w, log_prior, t)
        return val, grad

    if bounds is None:
        res = minimize(fun, t0, jac=True, method="BFGS",
                       options={"gtol": grad_tol, "maxiter": MAX_ITER})
        norm = float(np.max(np.abs(res.jac)))
        return res.x, norm, False
    res = minimize(fun, t0, jac=True, method="L-BFGS-B",
                   bounds=list(zip(bounds[0], bounds[1])),
                   options={"gtol": grad_tol * 1e-2, "maxiter": MAX_ITER})
    _, grad, _ = _objective(loss, w, log_prior, res.x)
    return res.x, _conv_norm(res.x, grad, bounds), _on_boundary(res.x, bounds)


def _on_boundary(t, bounds):
    if bounds is None:
        return False
    return bool(np.any(t <= bounds[0] + 1e-9) or np.any(t >= bounds[1] - 1e-9))


def fd_hessian(grad_fn: Callable[[np.ndarray], np.ndarray], t: np.ndarray,
               rel_step: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian from a gradient function."""
    t = np.asarray(t, dtype=float)
    p = len(t)
    h = np.empty((p, p))
    for j in range(p):
        step = rel_step * (1.0 + abs(t[j]))
        tp, tm = t.copy(), t.copy()
        tp[j] += step
        tm[j] -= step
        h[:, j] = (grad_fn(tp) - grad_fn(tm)) / (2.0 * step)
    return (h + h.T) / 2.0


def laplace_covariance(loss: LossFn, w: float, mode: np.ndarray,
                       log_prior: PriorFn = flat_prior) -> tuple[np.ndarray, bool]:
    """Inverse curvature of the negative log posterior at the mode.

    Returns (covariance, repaired).  The curvature w*hess(loss) - hess(prior)
    is symmetrized; eigenvalues below 1e-10 of the largest are lifted to that
    floor, and the repair is flagged.

    Raises
    ------
    CurvatureError
        If the repair would move more than 1e-6 of the spectrum mass.
    """
    mode = np.asarray(mode, dtype=float)
    le = loss(mode)
    if le.hessian is None:
        hess_l = fd_hessian(lambda t: loss(t).gradient, mode)
    else:
        hess_l = le.hessian
    pe = log_prior(mode)
    curv = w * hess_l - pe.hessian
    curv = (curv + curv.T) / 2.0
    eigval, eigvec = np.linalg.eigh(curv)
    lam_max = float(eigval[-1])
    if lam_max <= 0:
        raise CurvatureError("curvature at mode is not positive definite")
    floor = SPD_FLOOR * lam_max
    deficit = np.clip(floor - eigval, 0.0, None)
    repaired = bool(np.any(deficit > 0))
    if float(deficit.sum()) > SPD_REPAIR_LIMIT * lam_max:
        raise CurvatureError("indefinite curvature beyond repair threshold")
    fixed = np.maximum(eigval, floor)
    cov = (eigvec / fixed) @ eigvec.T
    return (cov + cov.T) / 2.0, repaired


# ---------------------------------------------------------------------------
# closed-form posteriors for the linear model
# ---------------------------------------------------------------------------

def ss_fixed_posterior(y: np.ndarray, f: np.ndarray,
                       uts: UniqueTreatmentStructure) -> GibbsPosteriorApprox:
    """Sum-of-squares posterior under the pure-error calibration weight.

    Normal with the least-squares mode and covariance sigma_tilde^2 (F'F)^{-1}
    (the weight 1/(2 sigma_tilde^2) makes the posterior variance match the
    sampling variance of the least-squares estimator).

    Raises
    ------
    NoReplicationError / RankError
    """
    y = np.asarray(y, dtype=float)
    s2 = pure_error_variance(y, uts)  # raises NoReplicationError at d=0
    mode, ftf_inv = _lstsq_with_gram(f, y)
    return GibbsPosteriorApprox(kind="normal", mode=mode,
                                covariance_or_scale=s2 * ftf_inv)


def ss_random_posterior(y: np.ndarray, f: np.ndarray) -> GibbsPosteriorApprox:
    """Marginal posterior under the conjugate random calibration weight.

    Multivariate t with the least-squares mode, scale sigma_hat^2 (F'F)^{-1}
    and n - p degrees of freedom, sigma_hat^2 the usual regression variance
    estimate.  A perfect fit (zero residual) is flagged as degenerate.
    """
    y = np.asarray(y, dtype=float)
    n, p = f.shape
    if n <= p:
        raise DofError(f"random-weight posterior needs n > p (n={n}, p={p})")
    mode, ftf_inv = _lstsq_with_gram(f, y)
    resid = y - f @ mode
    s2 = float(resid @ resid / (n - p))
    return GibbsPosteriorApprox(
        kind="multivariate_t", mode=mode, covariance_or_scale=s2 * ftf_inv,
        dof=float(n - p), degenerate=bool(s2 <= 1e-12),
    )


def l2_posterior(theta_hat: np.ndarray, w: float, e_q: np.ndarray) -> GibbsPosteriorApprox:
    """L2-loss posterior: normal with covariance E_Q^{-1} / (2w)."""
    if w <= 0:
        raise ValueError("w must be positive")
    try:
        e_q_inv = np.linalg.inv((e_q + e_q.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise RankError("quadrature Gram E_Q is singular") from exc
    cov = (e_q_inv + e_q_inv.T) / (2.0 * 2.0 * w)
    return GibbsPosteriorApprox(kind="normal", mode=np.asarray(theta_hat, dtype=float),
                                covariance_or_scale=cov)


def _lstsq_with_gram(f: np.ndarray, y: np.ndarray):
    n, p = f.shape
    gram = f.T @ f
    try:
        gram_inv = np.linalg.inv(gram)
    except np.linalg.LinAlgError as exc:
        raise RankError("F'F is singular") from exc
    if np.linalg.cond(gram) > 1e12:
        raise RankError("F'F is numerically singular")
    mode = gram_inv @ (f.T @ y)
    return mode, (gram_inv + gram_inv.T) / 2.0
