"""Utility functions, Monte Carlo expected-utility estimation, closed forms.

Two utilities are supported throughout: negative squared error (``nse``) and
Shannon information (``sh``, the log posterior density at the target values).
The Monte Carlo engine runs any *pipeline* object exposing

    prepare(design) -> ctx
    sample_value(ctx, rng) -> float

with per-index RNG substreams, a drop-and-count policy for failed samples
and rejection when more than 10% of samples fail.

Closed-form objectives for the linear model (A-/D-optimality and their
pure-error modifications) live in :func:`closed_objective`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import digamma, gammaln

from .designs import Design, RegressionSpec, expand_model_matrix, unique_treatments
from .errors import EstimateRejectedError, GibbsDesignError
from .posterior import GibbsPosteriorApprox

MC_KINDS = ("mc_gibbs", "sh_random_mc", "mc_bayes")
CLOSED_KINDS = ("closed_nse_fixed", "closed_sh_fixed", "closed_a_optimal", "closed_d_optimal")
FAILURE_FRACTION = 0.10


def substream(*keys: int) -> np.random.Generator:
    """Deterministic RNG substream addressed by a tuple of integer keys."""
    ent = tuple(int(k) & 0xFFFFFFFFFFFFFFFF for k in keys)
    return np.random.default_rng(np.random.SeedSequence(ent))


@dataclass(frozen=True)
class UtilityEstimate:
    """Monte Carlo mean with its standard error and failure bookkeeping."""

    mean: float
    std_error: float
    b: int
    n_failures: int = 0

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error,
                "b": self.b, "n_failures": self.n_failures}


@dataclass(frozen=True)
class ObjectiveSpec:
    """Descriptor of an objective: estimator kind, utility, MC sample size."""

    kind: str
    utility: str = "sh"
    b: int = 500

    def __post_init__(self):
        if self.kind not in MC_KINDS + CLOSED_KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.utility not in ("nse", "sh"):
            raise ValueError(f"utility must be 'nse' or 'sh', got {self.utility!r}")
        if self.kind in MC_KINDS and self.b < 1:
            raise ValueError("Monte Carlo objectives need b >= 1")

    @property
    def stochastic(self) -> bool:
        return self.kind in MC_KINDS


# ---------------------------------------------------------------------------
# utilities
# ---------------------------------------------------------------------------

def nse_utility(t: np.ndarray, post: GibbsPosteriorApprox) -> float:
    """Negative squared error -||t - posterior center||^2."""
    d = np.asarray(t, dtype=float) - post.mode
    return float(-(d @ d))


def sh_utility(t: np.ndarray, post: GibbsPosteriorApprox) -> float:
    """Log posterior density at t (normal or multivariate-t)."""
    if post.kind == "normal":
        return normal_logpdf(t, post.mode, post.covariance_or_scale)
    return mvt_logpdf(t, post.mode, post.covariance_or_scale, post.dof)


def normal_logpdf(t: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    d = np.asarray(t, dtype=float) - np.asarray(mean, dtype=float)
    p = len(d)
    cf = cho_factor((cov + cov.T) / 2.0, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    maha = float(d @ cho_solve(cf, d))
    return -0.5 * (p * math.log(2.0 * math.pi) + logdet + maha)


def mvt_logpdf(t: np.ndarray, mean: np.ndarray, scale: np.ndarray, dof: float) -> float:
    d = np.asarray(t, dtype=float) - np.asarray(mean, dtype=float)
    p = len(d)
    cf = cho_factor((scale + scale.T) / 2.0, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    maha = float(d @ cho_solve(cf, d))
    return float(
        gammaln((dof + p) / 2.0) - gammaln(dof / 2.0)
        - 0.5 * p * math.log(dof * math.pi) - 0.5 * logdet
        - 0.5 * (dof + p) * math.log1p(maha / dof)
    )


def mvt_entropy(scale_logdet: float, p: int, dof: float) -> float:
    """Differential entropy of a multivariate t with given scale log-det."""
    half = (dof + p) / 2.0
    return float(
        -gammaln(half) + gammaln(dof / 2.0) + 0.5 * p * math.log(dof * math.pi)
        + 0.5 * scale_logdet + half * (digamma(half) - digamma(dof / 2.0))
    )


# ---------------------------------------------------------------------------
# Monte Carlo engine
# ---------------------------------------------------------------------------

def mc_expected_utility(design: Design, pipeline, b: int, seed_block: int) -> UtilityEstimate:
    """Estimate the expected utility of one design by Monte Carlo.

    Sample i uses the substream (seed_block, i), so estimates are
    deterministic in ``seed_block`` and independent of evaluation order or
    worker count.  Samples raising a package error are dropped and counted.

    Raises
    ------
    EstimateRejectedError
        If more than 10% of samples fail (the estimate would silently lean
        on a censored sample set).
    """
    ctx = pipeline.prepare(design)
    values = []
    failures = 0
    examples: list[str] = []
    for i in range(b):
        rng = substream(seed_block, i)
        try:
            values.append(float(pipeline.sample_value(ctx, rng)))
        except GibbsDesignError as exc:
            failures += 1
            if len(examples) < 3:
                examples.append(f"sample {i}: {type(exc).__name__}: {exc}")
    if failures > FAILURE_FRACTION * b or not values:
        raise EstimateRejectedError(
            f"{failures}/{b} Monte Carlo samples failed", n_failures=failures,
            b=b, examples=examples,
        )
    arr = np.asarray(values)
    se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return UtilityEstimate(mean=float(arr.mean()), std_error=se,
                           b=b, n_failures=failures)


# ---------------------------------------------------------------------------
# closed-form linear-model objectives
# ---------------------------------------------------------------------------

def pure_error_sh_penalty(d: int) -> float:
    """Per-parameter Shannon penalty of estimating the noise scale from d
    pure-error degrees of freedom: psi(d/2) - log d + d/(d-2).

    Returns +inf for d <= 2: the underlying inverse-chi-square moment
    diverges there, so the expected utility is -inf.
    """
    if d <= 2:
        return math.inf
    return float(digamma(d / 2.0) - math.log(d) + d / (d - 2.0))


def gram_logdet(f: np.ndarray) -> float:
    """log|F'F|, or -inf when the Gram matrix is singular."""
    sign, logdet = np.linalg.slogdet(f.T @ f)
    return float(logdet) if sign > 0 else -math.inf


def closed_objective(design: Design, kind: str, spec: RegressionSpec,
                     tol: float = 1e-9) -> float:
    """Closed-form objectives for the sum-of-squares linear model.

    - ``closed_a_optimal``:   -tr[(F'F)^{-1}]
    - ``closed_d_optimal``:   log|F'F|
    - ``closed_nse_fixed``:   -tr[(F'F)^{-1}] for d > 0, else -inf
    - ``closed_sh_fixed``:    -p * penalty(d) + log|F'F| (-inf for d <= 2)

    Singular F'F always yields -inf.
    """
    f = expand_model_matrix(design, spec)
    logdet = gram_logdet(f)
    if not math.isfinite(logdet):
        return -math.inf
    if kind == "closed_d_optimal":
        return logdet
    if kind in ("closed_a_optimal", "closed_nse_fixed"):
        gram_inv = np.linalg.inv(f.T @ f)
        value = -float(np.trace(gram_inv))
        if kind == "closed_nse_fixed" and unique_treatments(design, tol).d == 0:
            return -math.inf
        return value
    if kind == "closed_sh_fixed":
        d = unique_treatments(design, tol).d
        pen = pure_error_sh_penalty(d)
        if math.isinf(pen):
            return -math.inf
        return -spec.p * pen + logdet
    raise ValueError(f"unknown closed objective {kind!r}")


# ---------------------------------------------------------------------------
# random-calibration-weight Shannon objective (Monte Carlo)
# ---------------------------------------------------------------------------

def sh_random_entropy_constant(n: int, p: int) -> float:
    """Design-independent constant of the random-weight Shannon objective."""
    nu = n - p
    return float(
        2.0 * gammaln(n / 2.0) - 2.0 * gammaln(nu / 2.0) - p * math.log(nu * math.pi)
        - n * (digamma(n / 2.0) - digamma(nu / 2.0)) + p * math.log(4.0 * math.pi)
    )


def sh_random_sample_value(logdet: float, s2: float, kappa: float, n: int, p: int) -> float:
    """Per-sample value of the random-weight Shannon objective.

    Equals -2 * entropy(multivariate-t posterior) + p*log(4 pi kappa): the
    Shannon information carried by the posterior, placed on the same scale
    as the fixed-weight closed form (which evaluates the log density at the
    target).  The kappa term removes the designer noise scale so that, for
    replication-saturated designs, the expectation is the analogue of the
    fixed-weight objective.  Only differences matter for ranking; the scale
    convention is echoed in run reports.
    """
    return logdet - p * math.log(s2 / kappa) + sh_random_entropy_constant(n, p)


class _ShRandomPipeline:
    """Internal pipeline for :func:`sh_random_objective`."""

    def __init__(self, spec: RegressionSpec, designer_config):
        self.spec = spec
        self.config = designer_config

    def prepare(self, design: Design):
        from .designer import linear_mean_chol  # local import to avoid a cycle

        f = expand_model_matrix(design, self.spec)
        n, p = f.shape
        if n <= p:
            from .errors import DofError

            raise DofError("random-weight objective needs n > p")
        logdet = gram_logdet(f)
        if not math.isfinite(logdet):
            from .errors import RankError

            raise RankError("F'F singular")
        uts = unique_treatments(design)
        q_mat, r_mat = np.linalg.qr(f)
        return {
            "f": f, "uts": uts, "logdet": logdet, "q": q_mat, "r": r_mat,
            "chol": linear_mean_chol(uts, self.config), "n": n, "p": p,
        }

    def sample_value(self, ctx, rng) -> float:
        from .designer import sample_hyper

        uts = ctx["uts"]
        draw = sample_hyper(self.config, uts, rng, chol=ctx["chol"])
        mu = uts.z @ draw.mu_bar
        n, p = ctx["n"], ctx["p"]
        y = mu + math.sqrt(draw.kappa) * rng.standard_normal(n)
        coef = ctx["q"].T @ y
        resid = y - ctx["q"] @ coef
        s2 = float(resid @ resid) / (n - p)
        if s2 <= 1e-300:
            from .errors import DegenerateDataError

            raise DegenerateDataError("zero residual variance")
        return sh_random_sample_value(ctx["logdet"], s2, draw.kappa, n, p)


def sh_random_objective(design: Design, spec: RegressionSpec, designer_config,
                        b: int, seed_block: int) -> UtilityEstimate:
    """Monte Carlo estimate of the random-calibration-weight SH objective.

    Uses the multivariate-t posterior machinery (mode = least squares, scale
    from the regression variance estimate, n - p degrees of freedom); see
    :func:`sh_random_sample_value` for the scale convention.
    """
    return mc_expected_utility(design, _ShRandomPipeline(spec, designer_config),
                               b, seed_block)


# ---------------------------------------------------------------------------
# efficiency
# ---------------------------------------------------------------------------

def efficiency(value_x: float, value_opt: float, utility: str, p: int) -> float:
    """Relative efficiency of a design scoring ``value_x`` against the best.

    nse-type objectives (negative, variance-like): ratio value_opt/value_x.
    sh-type objectives (log scale): exp[(value_x - value_opt)/p].
    A -inf value has zero efficiency.
    """
    if value_opt < value_x:
        raise ValueError("value_opt must be >= value_x")
    if not math.isfinite(value_x):
        return 0.0
    if utility == "nse":
        if value_x >= 0 or value_opt > 0:
            raise ValueError("nse efficiency expects negative objective values")
        return float(value_opt / value_x)
    if utility == "sh":
        return float(math.exp((value_x - value_opt) / p))
    raise ValueError(f"unknown utility {utility!r}")
