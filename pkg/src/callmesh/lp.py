"""Dense linear-program solver.

Primal simplex on the standard form, two-phase (artificial variables for
equality and >= rows, no big-M).  Pivoting is deterministic: entering
variable is the most negative reduced cost with ties broken by lowest
column index; after a run of degenerate pivots the rule falls back to
Bland's rule (lowest-index negative reduced cost) until the objective
moves again, which guarantees termination.  Identical inputs therefore
produce bit-identical outcomes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

EPS_FEAS = 1e-7     # feasibility tolerance for outcomes and check_solution
EPS_OPT = 1e-9      # reduced-cost optimality tolerance
_EPS_PIVOT = 1e-10  # entries below this are treated as zero in ratio tests
_DEGEN_LIMIT = 12   # consecutive degenerate pivots before Bland kicks in

Relation = str  # "<=", "=" or ">="
_RELATIONS = ("<=", "=", ">=")


class LpError(ValueError):
    """Malformed problem or misuse of the solver API."""


@dataclass(frozen=True)
class Constraint:
    coeffs: Mapping[str, float]
    relation: Relation
    rhs: float
    name: str = ""


@dataclass(frozen=True)
class LinearProgram:
    """Immutable LP instance over named variables.

    Variables default to a lower bound of 0 and no upper bound.  The
    objective maps variable names to coefficients; missing names mean 0.
    """

    variables: Tuple[str, ...]
    objective: Mapping[str, float]
    constraints: Tuple[Constraint, ...]
    sense: str = "maximize"
    lower: Mapping[str, float] = field(default_factory=dict)
    upper: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.sense not in ("maximize", "minimize"):
            raise LpError(f"unknown sense {self.sense!r}")
        if len(set(self.variables)) != len(self.variables):
            raise LpError("duplicate variable names")
        declared = set(self.variables)
        for mapping, what in ((self.objective, "objective"),
                              (self.lower, "lower bounds"),
                              (self.upper, "upper bounds")):
            for name, value in mapping.items():
                if name not in declared:
                    raise LpError(f"{what} references undeclared variable {name!r}")
                if not np.isfinite(value):
                    raise LpError(f"non-finite coefficient in {what} for {name!r}")
        for idx, con in enumerate(self.constraints):
            if con.relation not in _RELATIONS:
                raise LpError(f"constraint {idx}: bad relation {con.relation!r}")
            if not np.isfinite(con.rhs):
                raise LpError(f"constraint {idx}: non-finite right-hand side")
            for name, value in con.coeffs.items():
                if name not in declared:
                    raise LpError(f"constraint {idx} references undeclared variable {name!r}")
                if not np.isfinite(value):
                    raise LpError(f"constraint {idx}: non-finite coefficient for {name!r}")
        for name in self.upper:
            lo = self.lower.get(name, 0.0)
            if self.upper[name] < lo - EPS_FEAS:
                raise LpError(f"variable {name!r}: upper bound below lower bound")


@dataclass(frozen=True)
class LpOutcome:
    status: str                                  # "Optimal" | "Infeasible" | "Unbounded"
    assignment: Optional[Dict[str, float]] = None
    objective: Optional[float] = None

    @property
    def is_optimal(self) -> bool:
        return self.status == "Optimal"


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    factors = T[:, col].copy()
    factors[row] = 0.0
    T -= np.outer(factors, T[row])


def _run_simplex(T: np.ndarray, basis: List[int], ncols: int,
                 allowed: Optional[np.ndarray] = None) -> str:
    """Iterate pivots on tableau T (last row = -z row, last col = rhs)."""
    degenerate_run = 0
    max_iter = 200 * (T.shape[0] + ncols)
    for _ in range(max_iter):
        red = T[-1, :ncols]
        if allowed is not None:
            candidates = np.where((red < -EPS_OPT) & allowed)[0]
        else:
            candidates = np.where(red < -EPS_OPT)[0]
        if candidates.size == 0:
            return "optimal"
        if degenerate_run >= _DEGEN_LIMIT:
            col = int(candidates[0])                    # Bland
        else:
            col = int(candidates[np.argmin(red[candidates])])
        ratios = np.full(T.shape[0] - 1, np.inf)
        positive = T[:-1, col] > _EPS_PIVOT
        ratios[positive] = T[:-1, -1][positive] / T[:-1, col][positive]
        best = ratios.min()
        if not np.isfinite(best):
            return "unbounded"
        tied = np.where(ratios <= best + _EPS_PIVOT)[0]
        row = int(min(tied, key=lambda r: basis[r]))    # lowest-index leaving var
        degenerate_run = degenerate_run + 1 if best <= _EPS_PIVOT else 0
        _pivot(T, row, col)
        basis[row] = col
    raise LpError("simplex iteration limit exceeded")


def solve(problem: LinearProgram) -> LpOutcome:
    """Solve the LP, classifying the outcome as Optimal/Infeasible/Unbounded."""
    names = problem.variables
    n = len(names)
    index = {v: i for i, v in enumerate(names)}
    lower = np.array([problem.lower.get(v, 0.0) for v in names])
    if not np.all(np.isfinite(lower)):
        raise LpError("non-finite lower bound")

    # Work in shifted coordinates y = x - lower >= 0.
    rows: List[np.ndarray] = []
    rels: List[str] = []
    rhs: List[float] = []
    for con in problem.constraints:
        row = np.zeros(n)
        for name, coef in con.coeffs.items():
            row[index[name]] = coef
        rows.append(row)
        rels.append(con.relation)
        rhs.append(con.rhs - float(row @ lower))
    for name, ub in problem.upper.items():
        row = np.zeros(n)
        row[index[name]] = 1.0
        rows.append(row)
        rels.append("<=")
        rhs.append(ub - problem.lower.get(name, 0.0))

    m = len(rows)
    A = np.array(rows) if rows else np.zeros((0, n))
    b = np.array(rhs)
    rels_arr = np.array(rels)
    flip = b < 0
    A[flip] *= -1.0
    b[flip] *= -1.0
    rels_arr[flip] = ["=" if r == "=" else ("<=" if r == ">=" else ">=") for r in rels_arr[flip]]

    n_slack = int(np.sum(rels_arr == "<=")) + int(np.sum(rels_arr == ">="))
    n_art = int(np.sum(rels_arr == "=")) + int(np.sum(rels_arr == ">="))
    total = n + n_slack + n_art
    T = np.zeros((m + 1, total + 1))
    T[:m, :n] = A
    T[:m, -1] = b
    basis: List[int] = []
    s_at, a_at = n, n + n_slack
    art_cols: List[int] = []
    for i in range(m):
        rel = rels_arr[i]
        if rel == "<=":
            T[i, s_at] = 1.0
            basis.append(s_at)
            s_at += 1
        elif rel == ">=":
            T[i, s_at] = -1.0
            s_at += 1
            T[i, a_at] = 1.0
            basis.append(a_at)
            art_cols.append(a_at)
            a_at += 1
        else:
            T[i, a_at] = 1.0
            basis.append(a_at)
            art_cols.append(a_at)
            a_at += 1

    if art_cols:
        # Phase 1: minimise sum of artificials.
        z = np.zeros(total + 1)
        for r, bc in enumerate(basis):
            if bc in set(art_cols):
                z -= T[r]
        T[-1] = z
        status = _run_simplex(T, basis, total)
        if status != "optimal" or T[-1, -1] < -1e-6:
            return LpOutcome("Infeasible")
        art_set = set(art_cols)
        for r, bc in enumerate(basis):
            if bc in art_set:
                # Degenerate artificial still basic: pivot it out if possible.
                for j in range(total):
                    if j not in art_set and abs(T[r, j]) > _EPS_PIVOT:
                        _pivot(T, r, j)
                        basis[r] = j
                        break
        allowed = np.ones(total, dtype=bool)
        allowed[art_cols] = False
    else:
        allowed = None

    # Phase 2 objective (internally always maximise).
    c = np.zeros(total)
    sign = 1.0 if problem.sense == "maximize" else -1.0
    for name, coef in problem.objective.items():
        c[index[name]] = sign * coef
    T[-1] = 0.0
    T[-1, :total] = -c
    for r, bc in enumerate(basis):
        if abs(c[bc]) > 0.0:
            T[-1] += c[bc] * T[r]
    status = _run_simplex(T, basis, total, allowed=allowed)
    if status == "unbounded":
        return LpOutcome("Unbounded")

    y = np.zeros(total)
    for r, bc in enumerate(basis):
        y[bc] = T[r, -1]
    x = y[:n] + lower
    x[np.abs(x) < 1e-12] = 0.0
    assignment = {v: float(x[i]) for i, v in enumerate(names)}
    shifted = float(c[:n] @ y[:n])
    objective = sign * shifted + float(
        sum(problem.objective.get(v, 0.0) * problem.lower.get(v, 0.0) for v in problem.objective)
    )
    return LpOutcome("Optimal", assignment, objective)


def check_solution(problem: LinearProgram, assignment: Mapping[str, float],
                   tolerance: float = EPS_FEAS) -> bool:
    """True iff the assignment satisfies every constraint and bound."""
    missing = [v for v in problem.variables if v not in assignment]
    if missing:
        raise LpError(f"assignment missing variables: {missing[:5]}")
    x = {v: float(assignment[v]) for v in problem.variables}
    for v in problem.variables:
        if x[v] < problem.lower.get(v, 0.0) - tolerance:
            return False
        if v in problem.upper and x[v] > problem.upper[v] + tolerance:
            return False
    for con in problem.constraints:
        lhs = sum(coef * x[name] for name, coef in con.coeffs.items())
        if con.relation == "<=" and lhs > con.rhs + tolerance:
            return False
        if con.relation == ">=" and lhs < con.rhs - tolerance:
            return False
        if con.relation == "=" and abs(lhs - con.rhs) > tolerance:
            return False
    return True


def objective_value(problem: LinearProgram, assignment: Mapping[str, float]) -> float:
    return float(sum(coef * assignment[name] for name, coef in problem.objective.items()))


def dump(problem: LinearProgram, path) -> None:
    """Write a human-readable LP listing for offline inspection (not a round-trip format)."""
    with open(path, "w", encoding="utf-8") as fh:
        terms = " + ".join(f"{c:g} {v}" for v, c in sorted(problem.objective.items()) if c)
        fh.write(f"{problem.sense}: {terms or '0'}\n")
        fh.write("subject to:\n")
        for i, con in enumerate(problem.constraints):
            terms = " + ".join(f"{c:g} {v}" for v, c in sorted(con.coeffs.items()) if c)
            label = con.name or f"c{i}"
            fh.write(f"  {label}: {terms or '0'} {con.relation} {con.rhs:g}\n")
        fh.write("bounds:\n")
        for v in problem.variables:
            lo = problem.lower.get(v, 0.0)
            hi = problem.upper.get(v, None)
            fh.write(f"  {lo:g} <= {v}" + (f" <= {hi:g}\n" if hi is not None else "\n"))
