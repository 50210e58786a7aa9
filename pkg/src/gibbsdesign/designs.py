"""Designs, regression term expansions and unique-treatment structure.

Conventions
-----------
- A design is an (n, k) array of controllable-variable settings, every entry
  in [-1, 1].  Rows are runs.
- A regression term is a tuple of (variable_index, exponent) pairs; the empty
  tuple is the intercept.  The model matrix has one column per term.
- The unique-treatment structure groups runs whose settings coincide (up to a
  tolerance); it carries the indicator matrix Z, the number of unique
  treatments q and the pure-error degrees of freedom d = n - q.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DesignValidationError, SpecMismatchError

DEFAULT_TREATMENT_TOL = 1e-9

Term = tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class Design:
    """An n-run design on [-1, 1]^k.

    Parameters
    ----------
    points : (n, k) ndarray
        One row per run.  Validated on construction.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        validate_design(self)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def k(self) -> int:
        return self.points.shape[1]

    def with_point(self, rows, col, value) -> "Design":
        """Return a copy with ``points[rows, col] = value`` (rows may be a list)."""
        pts = np.array(self.points)
        pts[rows, col] = value
        return Design(pts)


def validate_design(design: Design) -> None:
    """Check the design invariants, raising on the first violation.

    Raises
    ------
    DesignValidationError
        With the offending row/column for out-of-bounds entries, or a
        data error for non-finite entries.
    """
    pts = design.points
    if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
        raise DesignValidationError(
            f"design must be a 2-d array with n >= 1, k >= 1, got shape {pts.shape}"
        )
    bad = ~np.isfinite(pts)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise DesignValidationError(
            f"non-finite design entry at row {i}, col {j}", row=int(i), col=int(j)
        )
    out = np.abs(pts) > 1.0
    if out.any():
        i, j = np.argwhere(out)[0]
        raise DesignValidationError(
            f"design entry {pts[i, j]!r} at row {i}, col {j} outside [-1, 1]",
            row=int(i),
            col=int(j),
        )


@dataclass(frozen=True)
class RegressionSpec:
    """An ordered list of monomial terms x -> f(x).

    ``terms[j]`` is a tuple of (variable index, exponent) pairs; the empty
    tuple is the intercept.  Term order is fixed, so p = len(terms) and
    column j of the model matrix always corresponds to terms[j].
    """

    terms: tuple[Term, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(tuple(t) for t in self.terms))
        if len(self.terms) == 0:
            raise SpecMismatchError("regression spec needs at least one term")

    @property
    def p(self) -> int:
        return len(self.terms)

    def max_variable(self) -> int:
        """Largest variable index referenced, or -1 for intercept-only."""
        idx = [v for term in self.terms for (v, _) in term]
        return max(idx) if idx else -1

    def term_names(self) -> list[str]:
        names = []
        for term in self.terms:
            if not term:
                names.append("1")
            else:
                names.append("*".join(
                    f"x{v + 1}" if e == 1 else f"x{v + 1}^{e}" for v, e in term
                ))
        return names

    @staticmethod
    def from_strings(terms: list[str]) -> "RegressionSpec":
        """Parse terms like ``"1"``, ``"x2"``, ``"x1^2"``, ``"x1*x3"``."""
        return RegressionSpec(tuple(parse_term(s) for s in terms))

    @staticmethod
    def main_effects(k: int, intercept: bool = True) -> "RegressionSpec":
        terms: list[Term] = [()] if intercept else []
        terms += [((i, 1),) for i in range(k)]
        return RegressionSpec(tuple(terms))

    @staticmethod
    def full_quadratic(k: int) -> "RegressionSpec":
        """Intercept, mains, pure quadratics, then two-way interactions."""
        terms: list[Term] = [()]
        terms += [((i, 1),) for i in range(k)]
        terms += [((i, 2),) for i in range(k)]
        terms += [((i, 1), (j, 1)) for i in range(k) for j in range(i + 1, k)]
        return RegressionSpec(tuple(terms))


def parse_term(s: str) -> Term:
    """Parse a single monomial string into a term tuple."""
    s = s.strip()
    if s in ("1", ""):
        return ()
    factors = []
    for fac in s.split("*"):
        fac = fac.strip()
        if "^" in fac:
            base, exp = fac.split("^")
            e = int(exp)
        else:
            base, e = fac, 1
        if not base.startswith("x"):
            raise SpecMismatchError(f"cannot parse term factor {fac!r}")
        v = int(base[1:]) - 1
        if v < 0 or e < 1:
            raise SpecMismatchError(f"cannot parse term factor {fac!r}")
        factors.append((v, e))
    return tuple(factors)


def expand_model_matrix(design: Design, spec: RegressionSpec) -> np.ndarray:
    """Evaluate the regression function at every run.

    Parameters
    ----------
    design : Design
    spec : RegressionSpec

    Returns
    -------
    (n, p) ndarray
        Row i holds f(x_i); column order follows ``spec.terms``.

    Raises
    ------
    SpecMismatchError
        If a term references a variable index >= design.k.
    """
    if spec.max_variable() >= design.k:
        raise SpecMismatchError(
            f"regression term uses variable x{spec.max_variable() + 1} "
            f"but the design has k={design.k}"
        )
    pts = design.points
    n = design.n
    f = np.ones((n, spec.p))
    for j, term in enumerate(spec.terms):
        col = np.ones(n)
        for v, e in term:
            col = col * pts[:, v] ** e
        f[:, j] = col
    return f


@dataclass(frozen=True)
class UniqueTreatmentStructure:
    """Grouping of runs into unique treatments.

    Attributes
    ----------
    z : (n, q) ndarray
        Binary indicators, one 1 per row.
    q : int
        Number of unique treatments.
    d : int
        Pure error degrees of freedom, n - q.
    representative_rows : (q, k) ndarray
        One treatment per row (first-seen member of each group).
    counts : (q,) ndarray
        Replicate count per treatment; diag(Z'Z).
    """

    z: np.ndarray
    q: int
    d: int
    representative_rows: np.ndarray
    counts: np.ndarray

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def projector(self) -> np.ndarray:
        """H_Z = Z (Z'Z)^{-1} Z', the within-treatment averaging projector."""
        zn = self.z / self.counts  # column j divided by its count
        return zn @ self.z.T


def unique_treatments(design: Design, tol: float = DEFAULT_TREATMENT_TOL) -> UniqueTreatmentStructure:
    """Group runs whose settings agree within ``tol`` in max norm.

    Grouping is canonicalized by lexicographic row order, so it does not
    depend on the run order of the design.

    Parameters
    ----------
    design : Design
    tol : float
        Max-coordinate distance at which two rows count as one treatment.
    """
    if tol < 0:
        raise ValueError("tol must be >= 0")
    pts = design.points
    n = design.n
    order = np.lexsort(pts.T[::-1])
    group_of = np.empty(n, dtype=int)
    reps: list[np.ndarray] = []
    rep_first: list[int] = []
    for i in order:
        if reps and np.max(np.abs(pts[i] - reps[-1])) <= tol:
            group_of[i] = len(reps) - 1
        else:
            reps.append(pts[i])
            rep_first.append(i)
            group_of[i] = len(reps) - 1
    q = len(reps)
    z = np.zeros((n, q))
    z[np.arange(n), group_of] = 1.0
    counts = z.sum(axis=0)
    return UniqueTreatmentStructure(
        z=z,
        q=q,
        d=n - q,
        representative_rows=np.array(reps),
        counts=counts,
    )


def design_to_csv(design: Design, path) -> None:
    """Write ``x1,...,xk`` CSV, round-trippable at full double precision."""
    header = ",".join(f"x{j + 1}" for j in range(design.k))
    np.savetxt(path, design.points, delimiter=",", header=header, comments="", fmt="%.17g")


def design_from_csv(path) -> Design:
    """Read a design written by :func:`design_to_csv`."""
    pts = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Design(pts)
