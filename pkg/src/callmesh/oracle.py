"""Brute-force exact admission optimum on tiny instances.

Routing decisions become explicit binaries: B[i,j|k,l] = 1 means commodity
(i, j) may use trunk k->l.  For a fixed assignment the products linearize
and what remains is an LP in the admissions and flows, so the exact optimum
is the best LP value over all assignments.  Enabling an extra trunk can
only enlarge the feasible region (a flow never has to use it), so the
optimum is attained at the all-enabled assignment; small instances are
still enumerated exhaustively so the monotonicity shortcut is checked
rather than assumed.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import lp
from .admission import _cname, _commodities, _rname, build_admission_lp, compute_usage
from .model import (ResourceProfile, RoutingPlan, Topology, Weights,
                    validate_offered)


class SizeLimitError(ValueError):
    def __init__(self, count: int, limit: int):
        self.count, self.limit = count, limit
        super().__init__(f"{count} free binary routing variables exceed the limit of {limit}")


@dataclass(frozen=True)
class OracleLimits:
    free_limit: int = 20        # refuse instances with more binaries than this
    hard_limit: int = 24        # never raise free_limit beyond this
    exhaustive_limit: int = 10  # full enumeration below, shortcut above

    def effective(self) -> int:
        return min(self.free_limit, self.hard_limit)


@dataclass(frozen=True)
class OracleResult:
    total: float
    plan: RoutingPlan
    binary_count: int
    assignments_evaluated: int
    exhaustive: bool


def binary_keys(topology: Topology, offered) -> List[Tuple[int, int, int, int]]:
    """Free routing binaries after pruning: trunk k->l for commodity (i, j)
    only matters if k is reachable from the origin and the destination is
    reachable from l; anything else can never carry useful flow."""
    offered = validate_offered(offered)
    keys = []
    for i, j in _commodities(topology, offered):
        for k in range(topology.n):
            for l in range(topology.n):
                if topology.links[k, l] and l != i \
                        and topology.reachable(i, k) and topology.reachable(l, j):
                    keys.append((i, j, k, l))
    return keys


def _restricted_lp(topology: Topology, offered: np.ndarray,
                   resources: ResourceProfile,
                   enabled: Sequence[Tuple[int, int, int, int]]) -> lp.LinearProgram:
    """Max-admission LP once the binaries are fixed: flows exist only on
    enabled trunks and resource rows cap usage directly."""
    n = topology.n
    coeffs = resources.coeffs
    enabled_set = set(enabled)
    pairs = _commodities(topology, offered)
    locals_ = [i for i in range(n) if offered[i, i] > 0]

    variables = [_cname(i, i) for i in locals_]
    variables += [_cname(i, j) for i, j in pairs]
    variables += [_rname(*key) for key in enabled_set]
    upper = {_cname(i, i): float(offered[i, i]) for i in locals_}
    upper.update({_cname(i, j): float(offered[i, j]) for i, j in pairs})

    cons: List[lp.Constraint] = []
    for i, j in pairs:
        for l in range(n):
            if l in (i, j):
                continue
            row: Dict[str, float] = {}
            for k in range(n):
                if (i, j, k, l) in enabled_set:
                    row[_rname(i, j, k, l)] = row.get(_rname(i, j, k, l), 0.0) + 1.0
            for e in range(n):
                if (i, j, l, e) in enabled_set:
                    row[_rname(i, j, l, e)] = row.get(_rname(i, j, l, e), 0.0) - 1.0
            if row:
                cons.append(lp.Constraint(row, "=", 0.0))
        sink = {_cname(i, j): -1.0}
        for k in range(n):
            if (i, j, k, j) in enabled_set:
                sink[_rname(i, j, k, j)] = 1.0
        cons.append(lp.Constraint(sink, "=", 0.0))
        src = {_cname(i, j): -1.0}
        for e in range(n):
            if (i, j, i, e) in enabled_set:
                src[_rname(i, j, i, e)] = src.get(_rname(i, j, i, e), 0.0) + 1.0
        cons.append(lp.Constraint(src, "=", 0.0))

    for l in range(n):
        prow: Dict[str, float] = {}
        mrow: Dict[str, float] = {}
        for key in enabled_set:
            _, _, k, kk = key
            if k == l or kk == l:
                name = _rname(*key)
                prow[name] = prow.get(name, 0.0) + coeffs.alpha1
                mrow[name] = mrow.get(name, 0.0) + coeffs.beta1
        if l in locals_:
            prow[_cname(l, l)] = coeffs.alpha1
            mrow[_cname(l, l)] = coeffs.beta1
        if prow:
            cons.append(lp.Constraint(prow, "<=", float(resources.cpu[l])))
        if mrow:
            cons.append(lp.Constraint(mrow, "<=", float(resources.memory[l])))

    objective = {_cname(i, i): 1.0 for i in locals_}
    objective.update({_cname(i, j): 1.0 for i, j in pairs})
    return lp.LinearProgram(tuple(variables), objective, tuple(cons),
                            sense="maximize", upper=upper)


def solve_exact(topology: Topology, offered, resources: ResourceProfile,
                limits: OracleLimits = OracleLimits()) -> OracleResult:
    """Exact maximum total admission, with a deterministic witness plan."""
    offered = validate_offered(offered)
    keys = binary_keys(topology, offered)
    limit = limits.effective()
    if len(keys) > limit:
        raise SizeLimitError(len(keys), limit)
    n = topology.n
    exhaustive = len(keys) <= limits.exhaustive_limit
    if exhaustive:
        assignments = itertools.product((0, 1), repeat=len(keys))
    else:
        assignments = [(1,) * len(keys)]   # monotone in B: all-enabled attains the max

    best_total = -1.0
    best_assignment: Optional[Dict[str, float]] = None
    evaluated = 0
    for bits in assignments:
        enabled = [key for key, bit in zip(keys, bits) if bit]
        outcome = lp.solve(_restricted_lp(topology, offered, resources, enabled))
        evaluated += 1
        if not outcome.is_optimal:
            continue
        total = sum(v for name, v in outcome.assignment.items() if name.startswith("C["))
        if total > best_total + 1e-9:
            best_total = total
            best_assignment = outcome.assignment
    if best_assignment is None:
        best_total = 0.0
        plan = RoutingPlan(np.zeros((n, n)), {}, np.zeros(n), np.zeros(n))
    else:
        admitted = np.zeros((n, n))
        relay: Dict[Tuple[int, int, int, int], float] = {}
        for name, v in best_assignment.items():
            if name.startswith("C[") and v > 0:
                i, j = (int(x) for x in name[2:-1].split(","))
                admitted[i - 1, j - 1] = v
            elif name.startswith("R[") and v > 1e-9:
                pair, edge = name[2:-1].split("|")
                i, j = (int(x) for x in pair.split(","))
                k, l = (int(x) for x in edge.split(","))
                relay[(i - 1, j - 1, k - 1, l - 1)] = v
        cpu, mem = compute_usage(n, resources.coeffs, admitted, relay)
        plan = RoutingPlan(admitted, relay, cpu, mem)
        best_total = max(best_total, 0.0)
    return OracleResult(best_total, plan, len(keys), evaluated, exhaustive)


def compare_with_heuristic(topology: Topology, offered,
                           resources: ResourceProfile,
                           limits: OracleLimits = OracleLimits()) -> dict:
    """Exact optimum vs the admission LP driven to pure admission (phi -> 0)."""
    offered = validate_offered(offered)
    exact = solve_exact(topology, offered, resources, limits)
    if float(offered.sum()) <= 0:
        heuristic = 0.0
    else:
        outcome = lp.solve(build_admission_lp(topology, offered, resources,
                                              Weights(1.0, 0.0)))
        if not outcome.is_optimal:
            raise RuntimeError(f"heuristic LP came back {outcome.status}")
        heuristic = sum(v for name, v in outcome.assignment.items()
                        if name.startswith("C["))
    digest = hashlib.sha256()
    digest.update(topology.links.tobytes())
    digest.update(np.asarray(offered, dtype=float).tobytes())
    digest.update(resources.cpu.tobytes())
    digest.update(resources.memory.tobytes())
    return {
        "instance": digest.hexdigest()[:16],
        "oracle": exact.total,
        "heuristic": heuristic,
        "gap": heuristic - exact.total,
        "binaries": exact.binary_count,
        "exhaustive": exact.exhaustive,
    }
