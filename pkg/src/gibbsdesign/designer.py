"""Designer distributions: flexible design-time models of the response process.

Three families are provided, mirroring the three inference settings:

- ``linear``: unique-treatment means drawn from a Matern Gaussian process,
  responses mean + N(0, kappa) noise with a random noise scale kappa;
- ``count``: negative-binomial responses whose log-mean is the regression
  surface plus a per-treatment discrepancy, with overdispersion factor kappa;
- ``tte``: exponential proportional-hazards event times with independent
  Bernoulli censoring.

These models are only used to take expectations at design time; they are
never fitted to data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .designs import Design, RegressionSpec, UniqueTreatmentStructure, expand_model_matrix
from .errors import GibbsDesignError, RankError, TargetSolveError

JITTER_LADDER = (1e-10, 1e-8, 1e-6)


@dataclass(frozen=True)
class DesignerConfig:
    """Parameters of a designer distribution and its hyper-variable laws.

    Only the fields of the chosen family are read.

    linear: ``matern_rho``, ``tau2`` (GP scale), ``sigma2`` (mean of the
    exponential noise-scale kappa).
    count: ``beta_sd`` (elementwise normal sd of the regression draw),
    ``tau_range`` (uniform range of treatment discrepancies),
    ``kappa_range`` (uniform overdispersion range, lower end > 1).
    tte: ``beta_sd`` and the fixed event probability ``rho`` (probability a
    run is observed rather than right-censored).
    """

    family: str
    matern_rho: float = 1.0
    tau2: float = 1.0
    sigma2: float = 1.0
    beta_sd: float = 1.0
    tau_range: tuple[float, float] = (-2.0, 2.0)
    kappa_range: tuple[float, float] = (1.0, 5.0)
    rho: float = 1.0

    def __post_init__(self):
        if self.family not in ("linear", "count", "tte"):
            raise ValueError(f"unknown designer family {self.family!r}")
        for name in ("matern_rho", "tau2", "sigma2", "beta_sd"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "matern_rho": self.matern_rho,
            "tau2": self.tau2,
            "sigma2": self.sigma2,
            "beta_sd": self.beta_sd,
            "tau_range": list(self.tau_range),
            "kappa_range": list(self.kappa_range),
            "rho": self.rho,
        }

    @staticmethod
    def from_dict(d: dict) -> "DesignerConfig":
        d = dict(d)
        if "tau_range" in d:
            d["tau_range"] = tuple(d["tau_range"])
        if "kappa_range" in d:
            d["kappa_range"] = tuple(d["kappa_range"])
        return DesignerConfig(**d)


@dataclass(frozen=True)
class HyperDraw:
    """One realization of the hyper-variables, tagged by family."""

    family: str
    mu_bar: Optional[np.ndarray] = None   # linear: (q,) unique-treatment means
    kappa: Optional[float] = None         # linear noise scale / count overdispersion
    sigma2: Optional[float] = None        # linear: mean of the kappa law
    beta: Optional[np.ndarray] = None     # count/tte regression coefficients
    tau: Optional[np.ndarray] = None      # count per-treatment discrepancies
    rho: Optional[float] = None           # tte event probability


@dataclass(frozen=True)
class ScenarioSample:
    """A hyper-draw together with responses generated from it."""

    draw: HyperDraw
    y: np.ndarray
    c: Optional[np.ndarray] = None        # tte only: 1 = event, 0 = censored
    mu: Optional[np.ndarray] = None       # linear/count designer means


def matern_corr(xi: np.ndarray, xj: np.ndarray, rho: float) -> float:
    """Separable Matern (nu = 3/2 shape) correlation between two points.

    prod_z (1 + rho |xi_z - xj_z|) exp(-rho |xi_z - xj_z|); equals 1 iff
    the points coincide.
    """
    d = rho * np.abs(np.asarray(xi, dtype=float) - np.asarray(xj, dtype=float))
    return float(np.prod((1.0 + d) * np.exp(-d)))


def matern_matrix(points: np.ndarray, rho: float) -> np.ndarray:
    """Matern correlation matrix between rows of ``points``."""
    d = rho * np.abs(points[:, None, :] - points[None, :, :])
    return np.prod((1.0 + d) * np.exp(-d), axis=2)


def chol_with_jitter(a: np.ndarray) -> np.ndarray:
    """Cholesky factor, retrying with an escalating diagonal jitter.

    Raises
    ------
    GibbsDesignError
        If the ladder (1e-10, 1e-8, 1e-6 times the mean diagonal) is
        exhausted.
    """
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(a)))
    for jit in JITTER_LADDER:
        try:
            return np.linalg.cholesky(a + jit * scale * np.eye(a.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise GibbsDesignError("correlation matrix is not positive definite after jitter")


def linear_mean_chol(uts: UniqueTreatmentStructure, config: DesignerConfig) -> np.ndarray:
    """Cholesky of tau^2 * Matern gram at the unique treatments."""
    a = config.tau2 * matern_matrix(uts.representative_rows, config.matern_rho)
    return chol_with_jitter(a)


def sample_hyper(config: DesignerConfig, uts: UniqueTreatmentStructure,
                 rng: np.random.Generator, chol: Optional[np.ndarray] = None,
                 p: Optional[int] = None) -> HyperDraw:
    """Draw hyper-variables for one scenario.

    Parameters
    ----------
    chol : optional
        Precomputed :func:`linear_mean_chol` (linear family only); callers in
        Monte Carlo loops pass it to avoid refactorizing per sample.
    p : optional
        Regression dimension for the count/tte beta draw.
    """
    if config.family == "linear":
        if chol is None:
            chol = linear_mean_chol(uts, config)
        mu_bar = chol @ rng.standard_normal(uts.q)
        kappa = float(rng.exponential(config.sigma2))
        return HyperDraw(family="linear", mu_bar=mu_bar, kappa=kappa, sigma2=config.sigma2)
    if config.family == "count":
        if p is None:
            raise ValueError("count family needs the regression dimension p")
        beta = config.beta_sd * rng.standard_normal(p)
        tau = rng.uniform(*config.tau_range, size=uts.q)
        kappa = float(rng.uniform(*config.kappa_range))
        return HyperDraw(family="count", beta=beta, tau=tau, kappa=kappa)
    # tte
    if p is None:
        raise ValueError("tte family needs the regression dimension p")
    beta = config.beta_sd * rng.standard_normal(p)
    return HyperDraw(family="tte", beta=beta, rho=config.rho)


def sample_scenario(config: DesignerConfig, design: Design, spec: RegressionSpec,
                    uts: UniqueTreatmentStructure, rng: np.random.Generator,
                    chol: Optional[np.ndarray] = None,
                    f: Optional[np.ndarray] = None) -> ScenarioSample:
    """Draw hyper-variables and responses for one Monte Carlo scenario.

    ``f`` may carry a precomputed model matrix (count/tte families).
    """
    draw = sample_hyper(config, uts, rng, chol=chol, p=spec.p)
    n = design.n
    if config.family == "linear":
        mu = uts.z @ draw.mu_bar
        y = mu + np.sqrt(draw.kappa) * rng.standard_normal(n)
        return ScenarioSample(draw=draw, y=y, mu=mu)
    if f is None:
        f = expand_model_matrix(design, spec)
    if config.family == "count":
        if draw.kappa <= 1.0:
            raise GibbsDesignError("count overdispersion kappa must exceed 1")
        mu = np.exp(f @ draw.beta + uts.z @ draw.tau)
        y = negbin_sample(mu, draw.kappa, rng)
        return ScenarioSample(draw=draw, y=y, mu=mu)
    # tte: unit baseline hazard, so event times are exponential with rate exp(eta)
    eta = f @ draw.beta
    y = rng.exponential(scale=np.exp(-eta))
    c = (rng.random(n) < draw.rho).astype(int)
    return ScenarioSample(draw=draw, y=y, c=c)


def negbin_sample(mu: np.ndarray, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """Negative-binomial draws with mean mu and variance kappa * mu.

    Uses the gamma-Poisson mixture with shape mu^2 / (kappa*mu - mu), which
    targets the requested mean and variance exactly for any real shape.
    """
    mu = np.asarray(mu, dtype=float)
    shape = mu / (kappa - 1.0)
    lam = rng.gamma(shape=shape, scale=kappa - 1.0)
    return rng.poisson(lam).astype(float)


def fisher_scoring_poisson(f: np.ndarray, target_mean: np.ndarray,
                           max_iter: int = 50, tol: float = 1e-8) -> np.ndarray:
    """Solve the Poisson score equations F'(exp(F t) - target_mean) = 0.

    Starts at the weighted least squares fit to log(mean + 0.5) and applies
    Newton steps with step halving.

    Raises
    ------
    TargetSolveError
        If the score max-norm has not reached ``tol`` after ``max_iter``
        iterations.
    RankError
        If the weighted normal equations are singular.
    """
    mu = np.asarray(target_mean, dtype=float)
    z0 = np.log(mu + 0.5)
    w0 = mu + 0.5
    try:
        t = np.linalg.solve((f * w0[:, None]).T @ f, (f * w0[:, None]).T @ z0)
    except np.linalg.LinAlgError as exc:
        raise RankError("singular weighted least squares start") from exc

    def score(tv):
        return f.T @ (np.exp(f @ tv) - mu)

    s = score(t)
    for _ in range(max_iter):
        if np.max(np.abs(s)) < tol:
            return t
        w = np.exp(f @ t)
        h = (f * w[:, None]).T @ f
        try:
            step = np.linalg.solve(h, s)
        except np.linalg.LinAlgError as exc:
            raise RankError("singular Fisher information") from exc
        # step halving on increase of the score norm
        base = np.max(np.abs(s))
        scale = 1.0
        for _ in range(30):
            cand = t - scale * step
            s_c = score(cand)
            if np.max(np.abs(s_c)) < base:
                t, s = cand, s_c
                break
            scale *= 0.5
        else:
            raise TargetSolveError("Fisher scoring step halving exhausted")
    if np.max(np.abs(score(t))) < tol:
        return t
    raise TargetSolveError("Fisher scoring did not converge")


def target_params(family: str, draw: HyperDraw, design: Design, spec: RegressionSpec,
                  uts: UniqueTreatmentStructure, f: Optional[np.ndarray] = None,
                  l2_core: Optional[np.ndarray] = None) -> np.ndarray:
    """Target parameter values: minimizers of the expected loss under the draw.

    - ``ss``: least-squares projection of the designer mean, (F'F)^{-1} F' mu.
    - ``l2``: the L2 operator applied to the designer mean (pass ``l2_core``).
    - ``ql``: Poisson score solved with the designer mean in place of data —
      independent of the overdispersion kappa.
    - ``pl``: the drawn regression coefficients (baseline-hazard free).
    """
    if f is None:
        f = expand_model_matrix(design, spec)
    if family == "ss":
        mu = uts.z @ draw.mu_bar
        sol, res, rank, _ = np.linalg.lstsq(f, mu, rcond=None)
        if rank < spec.p:
            raise RankError("F'F singular; SS target undefined")
        return sol
    if family == "l2":
        if l2_core is None:
            raise ValueError("l2 target needs the precomputed operator core")
        mu = uts.z @ draw.mu_bar
        return l2_core @ mu
    if family == "ql":
        mu = np.exp(f @ draw.beta + uts.z @ draw.tau)
        return fisher_scoring_poisson(f, mu)
    if family == "pl":
        return np.array(draw.beta, dtype=float)
    raise ValueError(f"unknown target family {family!r}")
