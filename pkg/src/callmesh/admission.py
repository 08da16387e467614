"""Admission planning and the controller duty cycle.

The planner builds a multi-commodity flow LP over the trunk topology:
variables are per-pair admissions C[i,j], per-trunk relay flows
R[i,j|k,l], and per-server usage bounds p[l], m[l].  Relay flows conserve
at intermediate servers, couple to the admission at origin and
destination, never re-enter the origin, and never exist for local calls.
Each server's CPU row charges ``alpha1`` per local call and per relay leg
(a unit of flow entering or leaving it); the memory row does the same with
``beta1``.  The objective trades total admission against resource use:

    maximize  gamma * sum(C)/sum(offered)
              - phi * (sum(p)/sum(P) + sum(m)/sum(M))

``plan_admission`` then refines the raw optimum in two deterministic
steps that keep the plan feasible:

1. guaranteed share: every routable pair is re-planned with a floor of
   ``guarantee_fraction`` times the network-wide optimal admission ratio,
   so heavily-relayed pairs are not starved by cheaper traffic;
2. balanced routing: with admissions fixed, flows are re-routed to spread
   each pair's traffic across its origin trunks, without ever paying for a
   longer detour.

Directives are floored to integers in path space (per-path flooring keeps
flow conservation exact), and the duty cycle assembles per-server stats
into a plan each slot, holding everything when reports go stale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import lp
from .model import (CASES, CostCoefficients, ResourceProfile, RoutingPlan,
                    SMALL_COEFFS, Topology, ValidationError, Weights,
                    validate_offered)
from .protocol import Directive, StatsReport

DEFAULT_GUARANTEE = 0.5    # fraction of the optimal admission ratio floored per pair
_TOL = 1e-6


class LoopDetected(Exception):
    """Residual circulation survived path stripping: flow is going in circles."""

    def __init__(self, origin: int, dest: int, residual: float):
        self.origin, self.dest, self.residual = origin, dest, residual
        super().__init__(
            f"commodity ({origin + 1},{dest + 1}) leaves {residual:.3g} circulating flow")


class PlanningError(RuntimeError):
    """The admission LP came back Infeasible/Unbounded, which the model forbids."""


def _cname(i: int, j: int) -> str:
    return f"C[{i + 1},{j + 1}]"


def _rname(i: int, j: int, k: int, l: int) -> str:
    return f"R[{i + 1},{j + 1}|{k + 1},{l + 1}]"


def _commodities(topology: Topology, offered: np.ndarray) -> List[Tuple[int, int]]:
    n = topology.n
    return [(i, j) for i in range(n) for j in range(n) if i != j and offered[i, j] > 0]


def _relay_keys(topology: Topology, pairs: Sequence[Tuple[int, int]]):
    n = topology.n
    keys = []
    for i, j in pairs:
        for k in range(n):
            for l in range(n):
                if topology.links[k, l] and l != i:
                    keys.append((i, j, k, l))
    return keys


def build_admission_lp(topology: Topology, offered, resources: ResourceProfile,
                       weights: Weights, floors: Optional[Mapping[Tuple[int, int], float]] = None
                       ) -> lp.LinearProgram:
    """Construct the admission LP for one slot.

    ``floors`` optionally sets per-pair admission lower bounds (used by the
    guaranteed-share stage of the planner).
    """
    offered = validate_offered(offered)
    n = topology.n
    if offered.shape != (n, n):
        raise ValidationError([f"offered load is {offered.shape}, topology has {n} servers"])
    if resources.n != n:
        raise ValidationError([f"resources cover {resources.n} servers, topology has {n}"])
    total_offered = float(offered.sum())
    if total_offered <= 0:
        raise ValidationError(["offered load is all zero; nothing to plan"])
    coeffs = resources.coeffs
    pairs = _commodities(topology, offered)
    locals_ = [i for i in range(n) if offered[i, i] > 0]
    rkeys = _relay_keys(topology, pairs)

    variables: List[str] = []
    variables += [_cname(i, i) for i in locals_]
    variables += [_cname(i, j) for i, j in pairs]
    variables += [_rname(*key) for key in rkeys]
    variables += [f"p[{l + 1}]" for l in range(n)]
    variables += [f"m[{l + 1}]" for l in range(n)]

    upper: Dict[str, float] = {}
    lower: Dict[str, float] = {}
    for i in locals_:
        upper[_cname(i, i)] = float(offered[i, i])
    for i, j in pairs:
        upper[_cname(i, j)] = float(offered[i, j])
    for l in range(n):
        upper[f"p[{l + 1}]"] = float(resources.cpu[l])
        upper[f"m[{l + 1}]"] = float(resources.memory[l])
    if floors:
        for (i, j), g in floors.items():
            name = _cname(i, j)
            if name in upper:
                lower[name] = min(float(g), upper[name])

    cons: List[lp.Constraint] = []
    # flow conservation at intermediate servers
    for i, j in pairs:
        for l in range(n):
            if l in (i, j):
                continue
            coeffs_row: Dict[str, float] = {}
            for k in range(n):
                if topology.links[k, l] and l != i:
                    coeffs_row[_rname(i, j, k, l)] = coeffs_row.get(_rname(i, j, k, l), 0.0) + 1.0
            for e in range(n):
                if topology.links[l, e] and e != i:
                    coeffs_row[_rname(i, j, l, e)] = coeffs_row.get(_rname(i, j, l, e), 0.0) - 1.0
            if coeffs_row:
                cons.append(lp.Constraint(coeffs_row, "=", 0.0,
                                          name=f"cons[{i+1},{j+1}]@{l+1}"))
    # destination: inbound relay flow equals the admitted count
    for i, j in pairs:
        row = {_cname(i, j): -1.0}
        for k in range(n):
            if topology.links[k, j]:
                row[_rname(i, j, k, j)] = 1.0
        cons.append(lp.Constraint(row, "=", 0.0, name=f"sink[{i+1},{j+1}]"))
    # origin: outbound relay flow equals the admitted count
    for i, j in pairs:
        row = {_cname(i, j): -1.0}
        for e in range(n):
            if topology.links[i, e] and e != i:
                row[_rname(i, j, i, e)] = row.get(_rname(i, j, i, e), 0.0) + 1.0
        cons.append(lp.Constraint(row, "=", 0.0, name=f"src[{i+1},{j+1}]"))
    # per-server usage definitions: alpha1/beta1 per local call and relay leg
    legs_at: List[Dict[str, float]] = [dict() for _ in range(n)]
    for key in rkeys:
        _, _, k, l = key
        name = _rname(*key)
        legs_at[k][name] = legs_at[k].get(name, 0.0) + 1.0
        legs_at[l][name] = legs_at[l].get(name, 0.0) + 1.0
    for l in range(n):
        prow = {name: coeffs.alpha1 * w for name, w in legs_at[l].items()}
        mrow = {name: coeffs.beta1 * w for name, w in legs_at[l].items()}
        if l in locals_:
            prow[_cname(l, l)] = coeffs.alpha1
            mrow[_cname(l, l)] = coeffs.beta1
        prow[f"p[{l + 1}]"] = -1.0
        mrow[f"m[{l + 1}]"] = -1.0
        cons.append(lp.Constraint(prow, "<=", 0.0, name=f"cpu[{l+1}]"))
        cons.append(lp.Constraint(mrow, "<=", 0.0, name=f"mem[{l+1}]"))

    total_cpu = max(float(resources.cpu.sum()), 1e-12)
    total_mem = max(float(resources.memory.sum()), 1e-12)
    objective: Dict[str, float] = {}
    for i in locals_:
        objective[_cname(i, i)] = weights.gamma / total_offered
    for i, j in pairs:
        objective[_cname(i, j)] = weights.gamma / total_offered
    for l in range(n):
        objective[f"p[{l + 1}]"] = -weights.phi / total_cpu
        objective[f"m[{l + 1}]"] = -weights.phi / total_mem
    return lp.LinearProgram(tuple(variables), objective, tuple(cons),
                            sense="maximize", lower=lower, upper=upper)


def _zero_plan(n: int) -> RoutingPlan:
    return RoutingPlan(np.zeros((n, n)), {}, np.zeros(n), np.zeros(n))


def _extract_plan(topology: Topology, offered: np.ndarray,
                  assignment: Mapping[str, float]) -> RoutingPlan:
    n = topology.n
    admitted = np.zeros((n, n))
    relay: Dict[Tuple[int, int, int, int], float] = {}
    for i in range(n):
        for j in range(n):
            name = _cname(i, j)
            if name in assignment:
                admitted[i, j] = max(0.0, assignment[name])
    for key in _relay_keys(topology, _commodities(topology, offered)):
        q = assignment.get(_rname(*key), 0.0)
        if q > 1e-9:
            relay[key] = q
    p = np.array([assignment.get(f"p[{l + 1}]", 0.0) for l in range(n)])
    m = np.array([assignment.get(f"m[{l + 1}]", 0.0) for l in range(n)])
    return RoutingPlan(admitted, relay, p, m)


def compute_usage(n: int, coeffs: CostCoefficients, admitted: np.ndarray,
                  relay: Mapping[Tuple[int, int, int, int], float]
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Per-server (cpu, memory) usage implied by a plan."""
    legs = np.zeros(n)
    for (i, j, k, l), q in relay.items():
        legs[k] += q
        legs[l] += q
    local = np.diag(admitted).astype(float)
    return coeffs.alpha1 * (local + legs), coeffs.beta1 * (local + legs)


@dataclass(frozen=True)
class AdmissionResult:
    """Planner output: real-valued plan, integer directive plan, and totals."""

    plan: RoutingPlan              # real-valued, feasible for the admission LP
    directive: RoutingPlan         # floored to integers in path space
    objective: float               # stage-1 optimal objective value
    optimal_total: float           # stage-1 total admission (pure LP optimum)
    problem: lp.LinearProgram


def plan_admission(topology: Topology, offered, resources: ResourceProfile,
                   weights: Weights = CASES["f4"], *,
                   guarantee_fraction: float = DEFAULT_GUARANTEE,
                   balance: bool = True) -> AdmissionResult:
    """Plan one slot: solve, apply the guaranteed-share floor, balance routing.

    Returns both the real-valued plan and the floored directive plan.  An
    all-zero offered load short-circuits to an empty plan.
    """
    offered = validate_offered(offered)
    n = topology.n
    if float(offered.sum()) <= 0 or float(resources.cpu.sum()) <= 0 \
            or float(resources.memory.sum()) <= 0:
        empty = _zero_plan(n)
        problem = lp.LinearProgram(("z",), {"z": 1.0}, (), upper={"z": 0.0})
        return AdmissionResult(empty, empty, 0.0, 0.0, problem)

    base = build_admission_lp(topology, offered, resources, weights)
    outcome = lp.solve(base)
    if outcome.status == "Infeasible":
        raise PlanningError("admission LP infeasible although the zero plan is valid")
    if outcome.status == "Unbounded":
        raise PlanningError("admission LP unbounded although admissions are capped")
    stage1 = _extract_plan(topology, offered, outcome.assignment)
    optimal_total = stage1.total_admitted
    ratio = optimal_total / float(offered.sum())

    chosen = outcome.assignment
    if guarantee_fraction > 0 and ratio > 0:
        g = guarantee_fraction
        for _ in range(3):
            floors = {}
            for i in range(n):
                for j in range(n):
                    if offered[i, j] > 0 and (i == j or topology.reachable(i, j)):
                        floors[(i, j)] = g * ratio * float(offered[i, j])
            guarded = lp.solve(build_admission_lp(topology, offered, resources,
                                                  weights, floors=floors))
            if guarded.is_optimal:
                chosen = guarded.assignment
                break
            g *= 0.5   # floors too aggressive for this instance: relax and retry
    plan = _extract_plan(topology, offered, chosen)

    if balance:
        balanced = _balance_routing(topology, offered, resources, plan)
        if balanced is not None:
            plan = balanced

    if not lp.check_solution(base, {v: plan_value(plan, v) for v in base.variables},
                             tolerance=1e-5):
        raise PlanningError("refined plan lost feasibility")  # should never happen
    directive = floor_plan(plan, topology, resources.coeffs)
    return AdmissionResult(plan, directive, outcome.objective, optimal_total, base)


def plan_value(plan: RoutingPlan, variable: str) -> float:
    """Value of a named LP variable under a plan (test/check support)."""
    if variable.startswith("C["):
        i, j = (int(x) for x in variable[2:-1].split(","))
        return float(plan.admitted[i - 1, j - 1])
    if variable.startswith("R["):
        pair, edge = variable[2:-1].split("|")
        i, j = (int(x) for x in pair.split(","))
        k, l = (int(x) for x in edge.split(","))
        return float(plan.relay.get((i - 1, j - 1, k - 1, l - 1), 0.0))
    if variable.startswith("p["):
        return float(plan.cpu_use[int(variable[2:-1]) - 1])
    if variable.startswith("m["):
        return float(plan.mem_use[int(variable[2:-1]) - 1])
    raise KeyError(variable)


def _balance_routing(topology: Topology, offered: np.ndarray,
                     resources: ResourceProfile, plan: RoutingPlan
                     ) -> Optional[RoutingPlan]:
    """Re-route with admissions fixed, spreading each pair's flow across its
    origin trunks.  Detours are priced so that only cost-neutral spreading
    (routes of equal length) ever happens."""
    n = topology.n
    coeffs = resources.coeffs
    pairs = _commodities(topology, offered)
    multi = [(i, j) for i, j in pairs
             if plan.admitted[i, j] > _TOL and topology.degree(i) >= 2]
    if not multi:
        return None
    problem = build_admission_lp(topology, offered, resources, Weights(1.0, 0.0))
    variables = list(problem.variables) + [f"d[{i + 1},{j + 1}]" for i, j in multi]
    lower = dict(problem.lower)
    upper = dict(problem.upper)
    for i in range(n):
        for j in range(n):
            name = _cname(i, j)
            if name in upper:
                lower[name] = upper[name] = float(plan.admitted[i, j])
    cons = list(problem.constraints)
    for i, j in multi:
        dname = f"d[{i + 1},{j + 1}]"
        for e in range(n):
            if topology.links[i, e] and e != i:
                cons.append(lp.Constraint({dname: 1.0, _rname(i, j, i, e): -1.0},
                                          "<=", 0.0, name=f"bal[{i+1},{j+1}]@{e+1}"))
    weight = 1.5 / max(coeffs.alpha1 + coeffs.beta1, 1e-9)
    objective: Dict[str, float] = {f"d[{i + 1},{j + 1}]": 1.0 for i, j in multi}
    for l in range(n):
        objective[f"p[{l + 1}]"] = -weight
        objective[f"m[{l + 1}]"] = -weight
    balanced = lp.solve(lp.LinearProgram(tuple(variables), objective, tuple(cons),
                                         sense="maximize", lower=lower, upper=upper))
    if not balanced.is_optimal:
        return None
    return _extract_plan(topology, offered, balanced.assignment)


# --------------------------------------------------------------------------
# path decomposition and flooring

@dataclass(frozen=True)
class PathDecomposition:
    """Per-commodity path flows: entries are (origin, dest, node tuple, flow)."""

    entries: Tuple[Tuple[int, int, Tuple[int, ...], float], ...]

    def for_pair(self, i: int, j: int) -> List[Tuple[Tuple[int, ...], float]]:
        return [(nodes, flow) for (a, b, nodes, flow) in self.entries
                if a == i and b == j]

    def total(self, i: int, j: int) -> float:
        return sum(flow for _, flow in self.for_pair(i, j))

    def __len__(self):
        return len(self.entries)


def decompose_paths(plan: RoutingPlan, topology: Topology,
                    tol: float = _TOL) -> PathDecomposition:
    """Greedy flow decomposition: strip origin-to-destination paths until the
    residual is negligible.  Anything left circulating is a loop, which the
    planner's resource pricing is supposed to prevent."""
    n = plan.n
    entries = []
    by_pair: Dict[Tuple[int, int], Dict[Tuple[int, int], float]] = {}
    for (i, j, k, l), q in plan.relay.items():
        if q > tol:
            by_pair.setdefault((i, j), {})[(k, l)] = q
    for (i, j), residual in sorted(by_pair.items()):
        guard = 4 * (len(residual) + 1)
        for _ in range(guard):
            path = _trace_path(residual, i, j, n, tol)
            if path is None:
                break
            flow = min(residual[(u, v)] for u, v in zip(path, path[1:]))
            for u, v in zip(path, path[1:]):
                residual[(u, v)] -= flow
                if residual[(u, v)] <= tol:
                    del residual[(u, v)]
            entries.append((i, j, tuple(path), flow))
        leftover = sum(residual.values())
        if leftover > max(tol * 10, 1e-9 * plan.admitted[i, j]):
            raise LoopDetected(i, j, leftover)
    return PathDecomposition(tuple(entries))


def _trace_path(residual: Mapping[Tuple[int, int], float], origin: int,
                dest: int, n: int, tol: float) -> Optional[List[int]]:
    stack: List[Tuple[int, List[int]]] = [(origin, [origin])]
    while stack:
        node, path = stack.pop()
        if node == dest:
            return path
        nxt = sorted((v for (u, v) in residual if u == node and v not in path),
                     reverse=True)   # reversed so lowest index pops first
        for v in nxt:
            stack.append((v, path + [v]))
    return None


def floor_plan(plan: RoutingPlan, topology: Topology,
               coeffs: CostCoefficients = SMALL_COEFFS) -> RoutingPlan:
    """Round the plan down to integers, per path, so that conservation and
    resource rows all stay satisfied (flooring only removes flow)."""
    n = plan.n
    admitted = np.zeros((n, n))
    relay: Dict[Tuple[int, int, int, int], float] = {}
    for i in range(n):
        admitted[i, i] = math.floor(plan.admitted[i, i] + 1e-9)
    for (i, j, nodes, flow) in decompose_paths(plan, topology).entries:
        q = math.floor(flow + 1e-9)
        if q < 1:
            continue
        admitted[i, j] += q
        for u, v in zip(nodes, nodes[1:]):
            relay[(i, j, u, v)] = relay.get((i, j, u, v), 0.0) + q
    cpu, mem = compute_usage(n, coeffs, admitted, relay)
    return RoutingPlan(admitted, relay, cpu, mem)


# --------------------------------------------------------------------------
# duty cycle

@dataclass(frozen=True)
class DutyCycleConfig:
    """Slot timing: gather stats, compute, notify, then idle out the slot."""

    tau: float = 3.0
    t_gather: float = 0.2
    t_compute: float = 0.95
    t_notify: float = 0.1

    def __post_init__(self):
        if min(self.tau, self.t_gather, self.t_compute, self.t_notify) < 0:
            raise ValidationError(["duty-cycle durations must be >= 0"])
        if self.t_gather + self.t_compute + self.t_notify > self.tau + 1e-12:
            raise ValidationError(["gather + compute + notify exceeds the slot length"])

    @property
    def t_idle(self) -> float:
        return self.tau - (self.t_gather + self.t_compute + self.t_notify)


@dataclass
class DutyCycleState:
    slot: int = 0
    stats: Dict[int, StatsReport] = field(default_factory=dict)      # 1-based id
    received_at: Dict[int, int] = field(default_factory=dict)        # controller slot


class Controller:
    """Slot-stepped admission controller.

    Each ``step`` ingests the slot's stats reports, rebuilds the offered load
    and resource view (using last-known values for briefly-silent servers,
    and dropping servers silent beyond ``stale_limit`` slots), plans, and
    emits one directive per live server.  With an autoscaler attached, the
    autoscaling pipeline supplies the plan and flavor choices instead.
    """

    def __init__(self, topology: Topology, weights: Weights = CASES["f4"],
                 coeffs: CostCoefficients = SMALL_COEFFS,
                 config: DutyCycleConfig = DutyCycleConfig(),
                 stale_limit: int = 2, autoscaler=None,
                 guarantee_fraction: float = DEFAULT_GUARANTEE,
                 balance: bool = True):
        self.topology = topology
        self.weights = weights
        self.coeffs = coeffs
        self.config = config
        self.stale_limit = stale_limit
        self.autoscaler = autoscaler
        self.guarantee_fraction = guarantee_fraction
        self.balance = balance
        self.state = DutyCycleState()
        self._cache: Dict[bytes, AdmissionResult] = {}
        self.last_result: Optional[AdmissionResult] = None

    def step(self, reports: Sequence[StatsReport]) -> List[Directive]:
        directives, self.state = run_duty_cycle(self.state, self.config, reports, self)
        return directives

    # planning helpers -----------------------------------------------------

    def plan(self, topology_view: Topology, offered: np.ndarray,
             resources: ResourceProfile) -> AdmissionResult:
        key = b"|".join((topology_view.links.tobytes(), offered.tobytes(),
                         resources.cpu.tobytes(), resources.memory.tobytes(),
                         repr((self.weights, self.coeffs, self.guarantee_fraction,
                               self.balance)).encode()))
        hit = self._cache.get(key)
        if hit is None:
            hit = plan_admission(topology_view, offered, resources, self.weights,
                                 guarantee_fraction=self.guarantee_fraction,
                                 balance=self.balance)
            self._cache[key] = hit
        return hit


def run_duty_cycle(state: DutyCycleState, config: DutyCycleConfig,
                   reports: Sequence[StatsReport], controller: Controller
                   ) -> Tuple[List[Directive], DutyCycleState]:
    """One controller slot: ingest reports, plan, emit directives."""
    topology = controller.topology
    n = topology.n
    new_state = DutyCycleState(slot=state.slot + 1, stats=dict(state.stats),
                               received_at=dict(state.received_at))
    for report in reports:       # duplicates: last write wins
        if 1 <= report.server <= n:
            new_state.stats[report.server] = report
            new_state.received_at[report.server] = new_state.slot

    if not new_state.stats:
        warnings.warn("no server reports ever received; emitting no directives",
                      stacklevel=2)
        return [], new_state

    age = {srv: new_state.slot - new_state.received_at[srv] for srv in new_state.stats}
    live = [srv for srv in new_state.stats if age[srv] <= controller.stale_limit]
    if not live:
        warnings.warn("all server reports stale; holding all admissions", stacklevel=2)
        hold = [Directive(server=srv, slot=new_state.slot, admit=(0,) * n)
                for srv in sorted(new_state.stats)]
        return hold, new_state

    down = [srv for srv in range(1, n + 1) if srv not in live]
    view = topology
    for srv in down:
        view = view.without_server(srv - 1)

    offered = np.zeros((n, n))
    cpu = np.zeros(n)
    mem = np.zeros(n)
    for srv in live:
        rep = new_state.stats[srv]
        i = srv - 1
        offered[i, i] = rep.local
        for dest, count in rep.outbound.items():
            if 1 <= dest <= n:
                offered[i, dest - 1] = count
        cpu[i] = rep.cpu
        mem[i] = rep.memory
    for srv in down:
        offered[srv - 1, :] = 0.0
        offered[:, srv - 1] = 0.0

    resources = ResourceProfile(cpu, mem, controller.coeffs)
    flavors: Dict[int, Optional[str]] = {srv: None for srv in live}
    if float(offered.sum()) <= 0:
        directive_plan = _zero_plan(n)
        controller.last_result = None
    elif controller.autoscaler is not None:
        decision = controller.autoscaler.decide(view, offered, resources)
        directive_plan = decision.directive_plan
        for srv in live:
            flavors[srv] = decision.flavors[srv - 1].name
        controller.last_result = None
    else:
        result = controller.plan(view, offered, resources)
        directive_plan = result.directive
        controller.last_result = result

    directives = []
    for srv in sorted(live):
        i = srv - 1
        admit = tuple(int(directive_plan.admitted[i, j]) for j in range(n))
        relays = tuple(sorted((a + 1, b + 1, k + 1, l + 1, int(q))
                              for (a, b, k, l), q in directive_plan.relay.items()
                              if k == i and q >= 1))
        directives.append(Directive(server=srv, slot=new_state.slot, admit=admit,
                                    relays=relays, flavor=flavors[srv]))
    return directives, new_state
