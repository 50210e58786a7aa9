"""Coordinate-exchange maximization over the design space.

The exchange cycles over all n*k design coordinates.  For a coordinate whose
run belongs to a replicate group, two move types are proposed: moving the
single run (which splits the group) and moving the whole group together.
Group moves are what let pure-error objectives relocate replicated support
points; an improvement-only exchange with single-run moves would freeze them,
because any solo move first destroys the replicate.  On all-distinct designs
the exchange reduces to the textbook row-wise algorithm.

Stochastic objectives are compared under common random numbers (one frozen
seed block per pass) and a candidate is accepted only when it beats the
incumbent by more than one pooled standard error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .designs import Design
from .errors import StuckError

GROUP_TOL = 1e-9


@dataclass(frozen=True)
class OptimizerConfig:
    """Exchange-search settings.

    ``emulator_points`` = 0 disables the 1-d emulator; a positive value is
    the number of probe evaluations per coordinate for stochastic
    objectives.  ``init`` is ``uniform`` or ``replicated_grid``; the latter
    starts from ``init_q`` unique grid points with replicates spread as
    evenly as possible (required by objectives that are -inf without
    replication).
    """

    grid_size: int = 21
    passes: int = 4
    restarts: int = 1
    emulator_points: int = 0
    comparison_b: int = 200
    seed: int = 0
    init: str = "uniform"
    init_q: Optional[int] = None

    def __post_init__(self):
        if self.grid_size < 2 or self.passes < 1 or self.restarts < 1:
            raise ValueError("grid_size >= 2, passes >= 1, restarts >= 1 required")
        if self.init not in ("uniform", "replicated_grid"):
            raise ValueError(f"unknown init policy {self.init!r}")
        if self.init == "replicated_grid" and not self.init_q:
            raise ValueError("replicated_grid init needs init_q")


@dataclass
class TraceRecord:
    pass_index: int
    coordinate: int      # flat index row * k + col
    candidate: float
    estimate: float
    std_error: float
    accepted: bool


@dataclass
class OptimizationTrace:
    """Per-candidate evaluation log plus the winning design."""

    records: list[TraceRecord] = field(default_factory=list)
    best_design: Optional[Design] = None
    best_value: float = -math.inf
    best_std_error: float = 0.0

    def add(self, pass_index, coordinate, candidate, estimate, std_error, accepted):
        self.records.append(TraceRecord(pass_index, coordinate, float(candidate),
                                        float(estimate), float(std_error), accepted))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pass", "coordinate", "candidate", "estimate",
                             "std_error", "accepted"])
            for r in self.records:
                writer.writerow([r.pass_index, r.coordinate, f"{r.candidate:.10g}",
                                 f"{r.estimate:.10g}", f"{r.std_error:.10g}",
                                 int(r.accepted)])


def candidate_grid(grid_size: int) -> np.ndarray:
    return np.round(np.linspace(-1.0, 1.0, grid_size), 12)


def pass_seed(seed: int, restart: int, pass_index: int) -> int:
    """Frozen seed block shared by all evaluations of one exchange pass."""
    return int(np.random.SeedSequence((seed, restart, pass_index)).generate_state(1)[0])


def _group_rows(points: np.ndarray, i: int) -> np.ndarray:
    return np.where(np.max(np.abs(points - points[i]), axis=1) <= GROUP_TOL)[0]


def coordinate_exchange(objective, initial: Design, cfg: OptimizerConfig,
                        restart_index: int = 0) -> tuple[Design, OptimizationTrace]:
    """Cyclic exchange from one starting design.

    Raises
    ------
    StuckError
        If the incumbent and every candidate of every coordinate score -inf
        over a full pass (nothing to rank).
    """
    design = initial
    grid = candidate_grid(cfg.grid_size)
    trace = OptimizationTrace()
    inc_val, inc_se = -math.inf, 0.0

    for pass_index in range(cfg.passes):
        block = pass_seed(cfg.seed, restart_index, pass_index)
        inc_val, inc_se = objective.evaluate(design, block)
        changed = False
        any_finite = math.isfinite(inc_val)
        n, k = design.n, design.k
        for i in range(n):
            for j in range(k):
                coord = i * k + j
                current = design.points[i, j]
                group = _group_rows(design.points, i)
                moves: list[np.ndarray] = [np.array([i])]
                if len(group) > 1:
                    moves.append(group)
                best = None  # (value, se, design, candidate)
                for rows in moves:
                    values = grid
                    if cfg.emulator_points > 0 and objective.stochastic:
                        values = emulator_smooth_search(
                            objective, design, rows, j, cfg, block, trace, pass_index, coord)
                        # emulator already recorded probe evaluations
                        for v, val, se in values:
                            if not math.isfinite(val):
                                continue
                            any_finite = True
                            if best is None or val > best[0]:
                                best = (val, se, design.with_point(list(rows), j, v), v)
                        continue
                    for v in values:
                        if abs(v - current) <= GROUP_TOL:
                            continue  # identical to the incumbent design
                        cand = design.with_point(list(rows), j, v)
                        val, se = objective.evaluate(cand, block)
                        trace.add(pass_index, coord, v, val, se, False)
                        if math.isfinite(val):
                            any_finite = True
                            if best is None or val > best[0]:
                                best = (val, se, cand, v)
                if best is None:
                    continue
                val, se, cand, v = best
                threshold = math.sqrt(se ** 2 + inc_se ** 2) if objective.stochastic else 0.0
                if val > inc_val + threshold:
                    design, inc_val, inc_se = cand, val, se
                    changed = True
                    trace.add(pass_index, coord, v, val, se, True)
        if not any_finite:
            trace.best_design = design
            raise StuckError("objective is -inf for the incumbent and every candidate",
                             trace=trace)
        if not changed:
            break

    trace.best_design = design
    trace.best_value = inc_val
    trace.best_std_error = inc_se
    return design, trace


def emulator_smooth_search(objective, design: Design, rows, j: int,
                           cfg: OptimizerConfig, block: int,
                           trace: OptimizationTrace, pass_index: int,
                           coord: int) -> list[tuple[float, float, float]]:
    """Probe a few coordinate values, fit a 1-d GP, evaluate its maximizer.

    Returns the evaluated (value, estimate, std_error) triples: the probes
    plus the GP-mean maximizer.  The caller applies the usual
    common-random-number acceptance, so the emulator only chooses where to
    spend evaluations.  On a degenerate fit the probes alone are returned
    (raw grid argmax fallback).
    """
    m = max(cfg.emulator_points, 3)
    probes = np.linspace(-1.0, 1.0, m)
    current = design.points[rows[0], j]
    if np.min(np.abs(probes - current)) > 1e-12:
        probes = np.sort(np.append(probes, current))
    evaluated: list[tuple[float, float, float]] = []
    for v in probes:
        cand = design if abs(v - current) <= GROUP_TOL else design.with_point(list(rows), j, v)
        val, se = objective.evaluate(cand, block)
        trace.add(pass_index, coord, v, val, se, False)
        evaluated.append((float(v), val, se))
    finite = [(v, val, se) for v, val, se in evaluated if math.isfinite(val)]
    if len(finite) < 3:
        return evaluated
    xs = np.array([v for v, _, _ in finite])
    zs = np.array([val for _, val, _ in finite])
    ses = np.array([se for _, _, se in finite])
    proposal = _gp_argmax(xs, zs, ses)
    if proposal is None:
        return evaluated
    if np.min(np.abs(xs - proposal)) > 1e-9:
        cand = design.with_point(list(rows), j, proposal)
        val, se = objective.evaluate(cand, block)
        trace.add(pass_index, coord, proposal, val, se, False)
        evaluated.append((float(proposal), val, se))
    return evaluated


def _gp_argmax(xs: np.ndarray, zs: np.ndarray, ses: np.ndarray,
               length_scale: float = 0.7) -> Optional[float]:
    """Maximizer of a squared-exponential GP mean through (xs, zs)."""
    zbar = zs.mean()
    zc = zs - zbar
    sf2 = float(np.var(zc))
    if sf2 <= 0:
        return None
    gram = sf2 * np.exp(-0.5 * ((xs[:, None] - xs[None, :]) / length_scale) ** 2)
    nug = np.maximum(ses ** 2, 1e-10 * max(sf2, 1.0))
    try:
        alpha = np.linalg.solve(gram + np.diag(nug), zc)
    except np.linalg.LinAlgError:
        return None
    fine = np.linspace(-1.0, 1.0, 401)
    kstar = sf2 * np.exp(-0.5 * ((fine[:, None] - xs[None, :]) / length_scale) ** 2)
    mean = kstar @ alpha + zbar
    return float(fine[int(np.argmax(mean))])


def uniform_init(n: int, k: int, rng: np.random.Generator) -> Design:
    return Design(rng.uniform(-1.0, 1.0, size=(n, k)))


def replicated_grid_init(n: int, k: int, q: int, grid: np.ndarray,
                         rng: np.random.Generator) -> Design:
    """q distinct grid points with n - q replicate slots spread evenly."""
    if not 1 <= q <= n:
        raise ValueError("need 1 <= q <= n")
    while True:
        pts = grid[rng.integers(0, len(grid), size=(q, k))]
        if len(np.unique(pts, axis=0)) == q:
            break
    counts = np.ones(q, dtype=int)
    order = rng.permutation(q)
    for t in range(n - q):
        counts[order[t % q]] += 1
    return Design(np.repeat(pts, counts, axis=0))


def multistart(objective, cfg: OptimizerConfig, n: int, k: int) -> tuple[Design, OptimizationTrace]:
    """Best coordinate-exchange result over ``cfg.restarts`` random starts.

    For stochastic objectives the per-restart winners are re-ranked with a
    fresh seed block and 4x ``comparison_b`` samples, so the reported winner
    is not the restart that got the luckiest search noise.

    Raises
    ------
    StuckError
        Only if every restart got stuck.
    """
    grid = candidate_grid(cfg.grid_size)
    finalists: list[tuple[Design, OptimizationTrace]] = []
    last_stuck: Optional[StuckError] = None
    for r in range(cfg.restarts):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 9000 + r)))
        if cfg.init == "replicated_grid":
            start = replicated_grid_init(n, k, cfg.init_q, grid, rng)
        else:
            start = uniform_init(n, k, rng)
        try:
            design, trace = coordinate_exchange(objective, start, cfg, restart_index=r)
        except StuckError as exc:
            last_stuck = exc
            continue
        finalists.append((design, trace))
    if not finalists:
        raise last_stuck if last_stuck is not None else StuckError("no restarts ran")

    if not objective.stochastic:
        best = max(finalists, key=lambda dt: dt[1].best_value)
        return best

    from .errors import GibbsDesignError

    rerank_block = pass_seed(cfg.seed, 888888, 0)
    best, best_val, best_se = None, -math.inf, 0.0
    for design, trace in finalists:
        try:
            est = objective.estimate(design, rerank_block, b=4 * cfg.comparison_b)
            val, se = est.mean, est.std_error
        except GibbsDesignError:
            val, se = -math.inf, 0.0
        if val > best_val or best is None:
            best, best_val, best_se = (design, trace), val, se
    best[1].best_value = best_val
    best[1].best_std_error = best_se
    return best
