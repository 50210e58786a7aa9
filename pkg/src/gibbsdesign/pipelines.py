"""Per-family Monte Carlo pipelines and objective evaluators.

A *pipeline* bundles the scenario sampler, the posterior computation and the
utility for one inference family, in the shape the engine in
:mod:`gibbsdesign.utility` expects (``prepare`` / ``sample_value``).  An
:class:`Objective` wraps either a pipeline or a closed form into the single
``evaluate(design, seed_block) -> (value, std_error)`` signature the
optimizer consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .designs import Design, RegressionSpec, expand_model_matrix, unique_treatments
from .designer import (
    DesignerConfig,
    fisher_scoring_poisson,
    linear_mean_chol,
    sample_hyper,
    sample_scenario,
)
from .errors import DofError, GibbsDesignError, OverflowGuardError, RankError
from .losses import (
    LossEvaluation,
    WeightRule,
    dispersion_weight,
    gauss_legendre_grid,
    gp_fit_loo,
    l2_operator,
    l2_trace_weight,
    pl_loss,
    pure_error_variance,
    ql_loss,
)
from .posterior import (
    GibbsPosteriorApprox,
    flat_prior,
    gaussian_prior,
    laplace_covariance,
    posterior_mode,
    ss_fixed_posterior,
    ss_random_posterior,
    l2_posterior,
)
from .utility import (
    UtilityEstimate,
    closed_objective,
    mc_expected_utility,
    mvt_entropy,
    normal_logpdf,
    nse_utility,
    sh_random_objective,
    sh_random_sample_value,
    sh_utility,
)

MODE_BOX = 15.0  # box for count/tte modes; separable samples park on the wall
ETA_GUARD = 700.0


# ---------------------------------------------------------------------------
# linear model, sum-of-squares loss
# ---------------------------------------------------------------------------

class LinearSSPipeline:
    """SS loss under the unique-treatment Gaussian-process designer.

    ``weight`` selects the posterior: ``pure_error`` gives the fixed-weight
    normal posterior, ``random_conjugate`` the multivariate-t posterior.

    For the Shannon utility the per-sample value is reported on the scale of
    the closed-form objectives: twice the log density at the target plus
    p*log(4 pi kappa) for the fixed weight (whose expectation is exactly the
    closed form), and the entropy-based analogue for the random weight.
    """

    def __init__(self, spec: RegressionSpec, designer: DesignerConfig,
                 utility: str = "sh", weight: str = "pure_error"):
        if designer.family != "linear":
            raise ValueError("LinearSSPipeline needs a linear designer")
        if weight not in ("pure_error", "random_conjugate"):
            raise ValueError(f"unsupported weight rule {weight!r} for the SS pipeline")
        self.spec = spec
        self.designer = designer
        self.utility = utility
        self.weight = weight

    def prepare(self, design: Design):
        f = expand_model_matrix(design, self.spec)
        uts = unique_treatments(design)
        n, p = f.shape
        if self.weight == "pure_error" and uts.d == 0:
            from .errors import NoReplicationError

            raise NoReplicationError("fixed-weight SS posterior needs d > 0")
        if self.weight == "random_conjugate" and n <= p:
            raise DofError("random-weight posterior needs n > p")
        logdet = gram_logdet_or_raise(f)
        if not math.isfinite(logdet):
            raise RankError("F'F singular")
        return {
            "design": design, "f": f, "uts": uts,
            "chol": linear_mean_chol(uts, self.designer),
            "n": n, "p": p, "logdet": logdet,
        }

    def sample_value(self, ctx, rng) -> float:
        uts, f = ctx["uts"], ctx["f"]
        draw = sample_hyper(self.designer, uts, rng, chol=ctx["chol"])
        mu = uts.z @ draw.mu_bar
        y = mu + math.sqrt(draw.kappa) * rng.standard_normal(ctx["n"])
        target, *_ = np.linalg.lstsq(f, mu, rcond=None)
        if self.weight == "pure_error":
            post = ss_fixed_posterior(y, f, uts)
            if self.utility == "nse":
                return nse_utility(target, post)
            return 2.0 * sh_utility(target, post) + ctx["p"] * math.log(4.0 * math.pi * draw.kappa)
        post = ss_random_posterior(y, f)
        if self.utility == "nse":
            return nse_utility(target, post)
        resid = y - f @ post.mode
        s2 = float(resid @ resid) / (ctx["n"] - ctx["p"])
        return sh_random_sample_value(ctx["logdet"], s2, draw.kappa,
                                      ctx["n"], ctx["p"])


def gram_logdet_or_raise(f: np.ndarray) -> float:
    sign, logdet = np.linalg.slogdet(f.T @ f)
    return float(logdet) if sign > 0 else -math.inf


# ---------------------------------------------------------------------------
# linear model, L2 loss
# ---------------------------------------------------------------------------

class L2Pipeline:
    """L2 loss: GP prediction vs. linear approximation on a quadrature grid.

    Each sample refits the GP by leave-one-out on the drawn responses, so it
    is far more expensive than the SS pipeline; ``gp_restarts`` trades fit
    quality for speed in inner loops.
    """

    def __init__(self, spec: RegressionSpec, designer: DesignerConfig,
                 utility: str = "nse", m_per_dim: int = 10, gp_restarts: int = 3):
        if designer.family != "linear":
            raise ValueError("L2Pipeline needs a linear designer")
        self.spec = spec
        self.designer = designer
        self.utility = utility
        self.m_per_dim = m_per_dim
        self.gp_restarts = gp_restarts

    def prepare(self, design: Design):
        quad = gauss_legendre_grid(design.k, self.m_per_dim)
        f_nodes = expand_model_matrix(Design(quad.nodes), self.spec)
        uts = unique_treatments(design)
        return {
            "design": design, "uts": uts, "quad": quad, "f_nodes": f_nodes,
            "chol": linear_mean_chol(uts, self.designer), "p": self.spec.p,
        }

    def sample_value(self, ctx, rng) -> float:
        design, uts = ctx["design"], ctx["uts"]
        draw = sample_hyper(self.designer, uts, rng, chol=ctx["chol"])
        mu = uts.z @ draw.mu_bar
        y = mu + math.sqrt(draw.kappa) * rng.standard_normal(design.n)
        fit = gp_fit_loo(y, design, restarts=self.gp_restarts,
                         seed=int(rng.integers(2 ** 31)))
        op = l2_operator(design, ctx["f_nodes"], ctx["quad"], fit)
        theta_hat = op.mestimate(y)
        target = op.core @ mu
        w, _ = l2_trace_weight(y, fit, ctx["quad"], ctx["f_nodes"], op=op)
        post = l2_posterior(theta_hat, w, op.e_q)
        if self.utility == "nse":
            return nse_utility(target, post)
        return sh_utility(target, post)


# ---------------------------------------------------------------------------
# count responses, quasi-likelihood loss
# ---------------------------------------------------------------------------

class CountQLPipeline:
    """Quasi-likelihood Gibbs inference under the negative-binomial designer."""

    def __init__(self, spec: RegressionSpec, designer: DesignerConfig,
                 utility: str = "nse", weight: WeightRule = WeightRule("dispersion")):
        if designer.family != "count":
            raise ValueError("CountQLPipeline needs a count designer")
        self.spec = spec
        self.designer = designer
        self.utility = utility
        self.weight = weight

    def prepare(self, design: Design):
        f = expand_model_matrix(design, self.spec)
        uts = unique_treatments(design)
        p = self.spec.p
        bounds = (np.full(p, -MODE_BOX), np.full(p, MODE_BOX))
        return {"f": f, "uts": uts, "p": p, "bounds": bounds}

    def sample_value(self, ctx, rng) -> float:
        f, uts = ctx["f"], ctx["uts"]
        draw = sample_hyper(self.designer, uts, rng, p=ctx["p"])
        eta_true = f @ draw.beta + uts.z @ draw.tau
        mu = np.exp(eta_true)
        from .designer import negbin_sample

        y = negbin_sample(mu, draw.kappa, rng)
        target = fisher_scoring_poisson(f, mu)

        def loss(t):
            return ql_loss(t, y, f)

        seed = int(rng.integers(2 ** 31))
        mode, on_boundary = posterior_mode(loss, 1.0, init=target,
                                           bounds=ctx["bounds"], restart_seed=seed)
        if self.utility == "nse":
            d = target - mode
            return float(-(d @ d))
        # Shannon: dispersion-rule weight scales the Laplace curvature
        w, _ = dispersion_weight(y, f, f @ mode)
        cov, _ = laplace_covariance(loss, w, mode)
        post = GibbsPosteriorApprox(kind="normal", mode=mode,
                                    covariance_or_scale=cov, boundary=on_boundary)
        return sh_utility(target, post)


class PoissonBayesPipeline:
    """Bayesian baseline: Poisson model is both sampler and inference model."""

    def __init__(self, spec: RegressionSpec, utility: str = "nse", prior_var: float = 1.0):
        self.spec = spec
        self.utility = utility
        self.prior_var = prior_var

    def prepare(self, design: Design):
        f = expand_model_matrix(design, self.spec)
        p = self.spec.p
        return {
            "f": f, "p": p,
            "prior": gaussian_prior(np.zeros(p), self.prior_var),
            "bounds": (np.full(p, -MODE_BOX), np.full(p, MODE_BOX)),
        }

    def sample_value(self, ctx, rng) -> float:
        f, p = ctx["f"], ctx["p"]
        theta_true = math.sqrt(self.prior_var) * rng.standard_normal(p)
        eta = f @ theta_true
        if np.max(np.abs(eta)) > ETA_GUARD:
            raise OverflowGuardError("designer eta overflow")
        y = rng.poisson(np.exp(eta)).astype(float)

        def loss(t):
            return ql_loss(t, y, f)  # Poisson negative log-likelihood up to a constant

        seed = int(rng.integers(2 ** 31))
        mode, on_boundary = posterior_mode(loss, 1.0, init=theta_true,
                                           log_prior=ctx["prior"],
                                           bounds=ctx["bounds"], restart_seed=seed)
        if self.utility == "nse":
            d = theta_true - mode
            return float(-(d @ d))
        cov, _ = laplace_covariance(loss, 1.0, mode, log_prior=ctx["prior"])
        post = GibbsPosteriorApprox(kind="normal", mode=mode,
                                    covariance_or_scale=cov, boundary=on_boundary)
        return sh_utility(theta_true, post)


# ---------------------------------------------------------------------------
# time-to-event responses
# ---------------------------------------------------------------------------

class TtePLPipeline:
    """Partial-likelihood Gibbs inference with Bernoulli right censoring.

    The partial likelihood is invariant to the intercept (it is absorbed in
    the baseline hazard), so inference runs on the main-effect columns only;
    the designer still draws a coefficient for every regression term when
    generating event times.
    """

    def __init__(self, gen_spec: RegressionSpec, designer: DesignerConfig,
                 utility: str = "nse", weight: WeightRule = WeightRule("unit")):
        if designer.family != "tte":
            raise ValueError("TtePLPipeline needs a tte designer")
        self.gen_spec = gen_spec
        self.fit_terms = tuple(t for t in gen_spec.terms if t != ())
        self.fit_idx = np.array([i for i, t in enumerate(gen_spec.terms) if t != ()])
        self.designer = designer
        self.utility = utility
        self.weight = weight

    def prepare(self, design: Design):
        f_gen = expand_model_matrix(design, self.gen_spec)
        f_fit = f_gen[:, self.fit_idx]
        uts = unique_treatments(design)
        p_fit = len(self.fit_idx)
        return {
            "design": design, "uts": uts, "f_gen": f_gen, "f_fit": f_fit,
            "p_fit": p_fit,
            "bounds": (np.full(p_fit, -MODE_BOX), np.full(p_fit, MODE_BOX)),
        }

    def sample_value(self, ctx, rng) -> float:
        sc = sample_scenario(self.designer, ctx["design"], self.gen_spec,
                             ctx["uts"], rng, f=ctx["f_gen"])
        target = sc.draw.beta[self.fit_idx]
        f_fit = ctx["f_fit"]

        def loss(t):
            return pl_loss(t, sc.y, sc.c, f_fit)

        w = 1.0 if self.weight.kind == "unit" else float(self.weight.value)
        seed = int(rng.integers(2 ** 31))
        mode, on_boundary = posterior_mode(loss, w, init=np.zeros(ctx["p_fit"]),
                                           bounds=ctx["bounds"], restart_seed=seed)
        if self.utility == "nse":
            d = target - mode
            return float(-(d @ d))
        cov, _ = laplace_covariance(loss, w, mode)
        post = GibbsPosteriorApprox(kind="normal", mode=mode,
                                    covariance_or_scale=cov, boundary=on_boundary)
        return sh_utility(target, post)


def weibull_nll(t: np.ndarray, y: np.ndarray, c: np.ndarray, f: np.ndarray) -> LossEvaluation:
    """Negative log-likelihood of the Weibull proportional-hazards model.

    Parameters are (beta, shape): t[:-1] multiplies the regression columns,
    t[-1] > 0 is the baseline shape.  Events contribute the log hazard, all
    runs contribute the cumulative hazard exp(eta) * y^shape.
    """
    t = np.asarray(t, dtype=float)
    beta, shape = t[:-1], t[-1]
    y = np.asarray(y, dtype=float)
    ev = np.asarray(c) == 1
    eta = f @ beta
    logy = np.log(y)
    arg = eta + shape * logy
    if np.max(np.abs(arg)) > ETA_GUARD:
        raise OverflowGuardError("cumulative hazard overflow")
    s = np.exp(arg)  # exp(eta) * y^shape
    value = float(np.sum(s) - np.sum(eta[ev]) - np.sum(ev) * math.log(shape)
                  - (shape - 1.0) * np.sum(logy[ev]))
    grad_beta = f.T @ (s - ev)
    grad_shape = float(np.sum(s * logy) - np.sum(ev) / shape - np.sum(logy[ev]))
    grad = np.concatenate([grad_beta, [grad_shape]])
    p = len(beta)
    hess = np.empty((p + 1, p + 1))
    hess[:p, :p] = (f * s[:, None]).T @ f
    cross = f.T @ (s * logy)
    hess[:p, p] = cross
    hess[p, :p] = cross
    hess[p, p] = float(np.sum(s * logy ** 2) + np.sum(ev) / shape ** 2)
    return LossEvaluation(value=value, gradient=grad, hessian=hess)


class WeibullBayesPipeline:
    """Bayesian baseline for event times: Weibull proportional hazards.

    The baseline shape is a bounded nuisance with a uniform prior; the
    utility is evaluated on the regression block only.
    """

    def __init__(self, gen_spec: RegressionSpec, designer: DesignerConfig,
                 utility: str = "nse", shape_range: tuple[float, float] = (0.5, 1.5)):
        if designer.family != "tte":
            raise ValueError("WeibullBayesPipeline needs a tte designer")
        self.gen_spec = gen_spec
        self.designer = designer
        self.utility = utility
        self.shape_range = shape_range

    def prepare(self, design: Design):
        f = expand_model_matrix(design, self.gen_spec)
        p = self.gen_spec.p
        var = self.designer.beta_sd ** 2
        beta_prior = gaussian_prior(np.zeros(p), var)

        def prior(t):
            pe = beta_prior(t[:-1])
            grad = np.concatenate([pe.gradient, [0.0]])
            hess = np.zeros((p + 1, p + 1))
            hess[:p, :p] = pe.hessian
            return LossEvaluation(value=pe.value, gradient=grad, hessian=hess)

        lo = np.concatenate([np.full(p, -MODE_BOX), [self.shape_range[0]]])
        hi = np.concatenate([np.full(p, MODE_BOX), [self.shape_range[1]]])
        return {"f": f, "p": p, "prior": prior, "bounds": (lo, hi)}

    def sample_value(self, ctx, rng) -> float:
        f, p = ctx["f"], ctx["p"]
        beta_true = self.designer.beta_sd * rng.standard_normal(p)
        shape_true = rng.uniform(*self.shape_range)
        eta = f @ beta_true
        # survival inversion: S(y) = exp(-exp(eta) y^shape)
        y = (rng.exponential(size=len(eta)) * np.exp(-eta)) ** (1.0 / shape_true)
        c = (rng.random(len(eta)) < self.designer.rho).astype(int)
        if not np.any(c == 1):
            from .errors import DegenerateLossError

            raise DegenerateLossError("all runs censored")

        def loss(t):
            return weibull_nll(t, y, c, f)

        init = np.concatenate([np.zeros(p), [1.0]])
        seed = int(rng.integers(2 ** 31))
        mode, on_boundary = posterior_mode(loss, 1.0, init=init,
                                           log_prior=ctx["prior"],
                                           bounds=ctx["bounds"], restart_seed=seed)
        if self.utility == "nse":
            d = beta_true - mode[:p]
            return float(-(d @ d))
        cov, _ = laplace_covariance(loss, 1.0, mode, log_prior=ctx["prior"])
        post = GibbsPosteriorApprox(kind="normal", mode=mode[:p],
                                    covariance_or_scale=cov[:p, :p],
                                    boundary=on_boundary)
        return sh_utility(beta_true, post)


# ---------------------------------------------------------------------------
# objective wrapper for the optimizer
# ---------------------------------------------------------------------------

@dataclass
class Objective:
    """Uniform evaluate() interface over closed forms and MC pipelines.

    Closed forms return (value, 0.0).  Structural failures (singular Gram,
    no replication, rejected estimates) surface as (-inf, 0.0) so that
    exchange searches simply avoid those designs.
    """

    kind: str
    spec: Optional[RegressionSpec] = None
    pipeline: object = None
    b: int = 500
    designer: Optional[DesignerConfig] = None
    name: str = ""

    @property
    def stochastic(self) -> bool:
        return self.pipeline is not None or self.kind == "sh_random_mc"

    def evaluate(self, design: Design, seed_block: int = 0) -> tuple[float, float]:
        try:
            if self.pipeline is not None:
                est = mc_expected_utility(design, self.pipeline, self.b, seed_block)
                return est.mean, est.std_error
            if self.kind == "sh_random_mc":
                est = sh_random_objective(design, self.spec, self.designer,
                                          self.b, seed_block)
                return est.mean, est.std_error
            return closed_objective(design, self.kind, self.spec), 0.0
        except GibbsDesignError:
            return -math.inf, 0.0

    def estimate(self, design: Design, seed_block: int = 0, b: Optional[int] = None) -> UtilityEstimate:
        """Full estimate (raising on failure) for reports and evaluation."""
        if self.pipeline is not None:
            return mc_expected_utility(design, self.pipeline, b or self.b, seed_block)
        if self.kind == "sh_random_mc":
            return sh_random_objective(design, self.spec, self.designer,
                                       b or self.b, seed_block)
        return UtilityEstimate(mean=closed_objective(design, self.kind, self.spec),
                               std_error=0.0, b=0)
