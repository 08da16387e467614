"""Proactive autoscaling pipeline.

Per slot: forecast next-slot demand (NLMS), compute the minimum per-server
resources that would admit the whole forecast, pick the smallest VM flavor
covering that requirement, then plan an admission headroom on top of the
forecast plan up to the selected flavors' capacities.  The combined
(forecast + headroom) plan becomes the directive, which makes the
controller tolerant of forecast error in both directions.  Flavor
transitions follow a rule table: same flavor NOP, bigger UP, smaller DOWN,
with an optional one-slot guard that blocks DOWN while the currently
observed load still needs the bigger box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import lp
from .admission import (PlanningError, _cname, _commodities, _relay_keys,
                        _rname, compute_usage, floor_plan)
from .model import (CostCoefficients, Flavor, FlavorCatalog, ResourceProfile,
                    RoutingPlan, SMALL_COEFFS, Topology, ValidationError,
                    validate_offered)
from .predict import MatrixPredictor

UP, DOWN, NOP = "UP", "DOWN", "NOP"


class InfeasibleForecast(ValueError):
    """Forecast demands traffic between disconnected servers."""

    def __init__(self, pairs: Sequence[Tuple[int, int]]):
        self.pairs = list(pairs)
        shown = ", ".join(f"({i + 1},{j + 1})" for i, j in self.pairs[:5])
        super().__init__(f"no route for forecast demand on pairs {shown}")


def required_resources(topology: Topology, forecast, coeffs: CostCoefficients,
                       normalization: Optional[ResourceProfile] = None
                       ) -> Tuple[np.ndarray, np.ndarray, RoutingPlan]:
    """Minimum per-server (cpu, memory) that admits the entire forecast.

    Resource caps are deliberately absent: the point is to learn how big the
    servers would have to be.  Returns the requirement vectors and the
    routing plan realizing them.
    """
    forecast = validate_offered(forecast)
    n = topology.n
    if forecast.shape != (n, n):
        raise ValidationError([f"forecast is {forecast.shape}, topology has {n} servers"])
    bad = [(i, j) for i, j in _commodities(topology, forecast)
           if not topology.reachable(i, j)]
    if bad:
        raise InfeasibleForecast(bad)
    if float(forecast.sum()) <= 0:
        return np.zeros(n), np.zeros(n), RoutingPlan(forecast.copy(), {},
                                                     np.zeros(n), np.zeros(n))

    pairs = _commodities(topology, forecast)
    rkeys = _relay_keys(topology, pairs)
    variables = [_rname(*key) for key in rkeys]
    variables += [f"p[{l + 1}]" for l in range(n)]
    variables += [f"m[{l + 1}]" for l in range(n)]

    cons: List[lp.Constraint] = []
    for i, j in pairs:
        for l in range(n):
            if l in (i, j):
                continue
            row: Dict[str, float] = {}
            for k in range(n):
                if topology.links[k, l] and l != i:
                    row[_rname(i, j, k, l)] = row.get(_rname(i, j, k, l), 0.0) + 1.0
            for e in range(n):
                if topology.links[l, e] and e != i:
                    row[_rname(i, j, l, e)] = row.get(_rname(i, j, l, e), 0.0) - 1.0
            if row:
                cons.append(lp.Constraint(row, "=", 0.0, name=f"cons[{i+1},{j+1}]@{l+1}"))
        sink = {_rname(i, j, k, j): 1.0 for k in range(n) if topology.links[k, j]}
        cons.append(lp.Constraint(sink, "=", float(forecast[i, j]), name=f"sink[{i+1},{j+1}]"))
        src = {_rname(i, j, i, e): 1.0 for e in range(n)
               if topology.links[i, e] and e != i}
        cons.append(lp.Constraint(src, "=", float(forecast[i, j]), name=f"src[{i+1},{j+1}]"))

    legs_at: List[Dict[str, float]] = [dict() for _ in range(n)]
    for key in rkeys:
        _, _, k, l = key
        name = _rname(*key)
        legs_at[k][name] = legs_at[k].get(name, 0.0) + 1.0
        legs_at[l][name] = legs_at[l].get(name, 0.0) + 1.0
    for l in range(n):
        prow = {name: coeffs.alpha1 * w for name, w in legs_at[l].items()}
        mrow = {name: coeffs.beta1 * w for name, w in legs_at[l].items()}
        prow[f"p[{l + 1}]"] = -1.0
        mrow[f"m[{l + 1}]"] = -1.0
        rhs_p = -coeffs.alpha1 * float(forecast[l, l])
        rhs_m = -coeffs.beta1 * float(forecast[l, l])
        cons.append(lp.Constraint(prow, "<=", rhs_p, name=f"cpu[{l+1}]"))
        cons.append(lp.Constraint(mrow, "<=", rhs_m, name=f"mem[{l+1}]"))

    if normalization is not None:
        total_cpu = max(float(normalization.cpu.sum()), 1e-12)
        total_mem = max(float(normalization.memory.sum()), 1e-12)
    else:
        total_cpu = total_mem = 1.0
    objective = {f"p[{l + 1}]": 1.0 / total_cpu for l in range(n)}
    objective.update({f"m[{l + 1}]": 1.0 / total_mem for l in range(n)})
    outcome = lp.solve(lp.LinearProgram(tuple(variables), objective, tuple(cons),
                                        sense="minimize"))
    if not outcome.is_optimal:
        raise PlanningError(f"requirement LP came back {outcome.status}")
    relay = {key: outcome.assignment[_rname(*key)] for key in rkeys
             if outcome.assignment[_rname(*key)] > 1e-9}
    p_star = np.array([outcome.assignment[f"p[{l + 1}]"] for l in range(n)])
    m_star = np.array([outcome.assignment[f"m[{l + 1}]"] for l in range(n)])
    plan = RoutingPlan(forecast.copy(), relay, p_star, m_star)
    return p_star, m_star, plan


@dataclass(frozen=True)
class FlavorChoice:
    flavor: Flavor
    shortfall: bool    # even the largest flavor cannot cover the requirement


def select_flavors(catalog: FlavorCatalog, p_star, m_star) -> List[FlavorChoice]:
    """Smallest flavor covering each server's requirement, catalog order."""
    choices = []
    for p, m in zip(np.asarray(p_star, dtype=float), np.asarray(m_star, dtype=float)):
        picked = None
        for flavor in catalog:
            cap_p, cap_m = flavor.capacity_units()
            if cap_p >= p and cap_m >= m:
                picked = FlavorChoice(flavor, False)
                break
        if picked is None:
            picked = FlavorChoice(catalog.largest, True)
        choices.append(picked)
    return choices


def headroom_plan(topology: Topology, base: RoutingPlan,
                  flavors: Sequence[Flavor], coeffs: CostCoefficients
                  ) -> RoutingPlan:
    """Extra admissions the selected flavors can still carry on top of the
    base plan.  Maximizes the total headroom subject to flow conservation
    and the flavors' capacities; pairs with no route simply get none."""
    n = topology.n
    caps = np.array([f.capacity_units() for f in flavors])
    base_cpu, base_mem = compute_usage(n, coeffs, base.admitted, base.relay)
    slack_cpu = caps[:, 0] - base_cpu
    slack_mem = caps[:, 1] - base_mem
    if (slack_cpu < -1e-6).any() or (slack_mem < -1e-6).any():
        raise PlanningError("base plan does not fit the selected flavors")
    slack_cpu = np.maximum(slack_cpu, 0.0)
    slack_mem = np.maximum(slack_mem, 0.0)

    demand = np.ones((n, n))     # headroom is demand-blind: any pair may grow
    pairs = _commodities(topology, demand)
    pairs = [(i, j) for i, j in pairs if topology.reachable(i, j)]
    rkeys = _relay_keys(topology, pairs)
    variables = [_cname(i, i) for i in range(n)]
    variables += [_cname(i, j) for i, j in pairs]
    variables += [_rname(*key) for key in rkeys]

    cons: List[lp.Constraint] = []
    for i, j in pairs:
        for l in range(n):
            if l in (i, j):
                continue
            row: Dict[str, float] = {}
            for k in range(n):
                if topology.links[k, l] and l != i:
                    row[_rname(i, j, k, l)] = row.get(_rname(i, j, k, l), 0.0) + 1.0
            for e in range(n):
                if topology.links[l, e] and e != i:
                    row[_rname(i, j, l, e)] = row.get(_rname(i, j, l, e), 0.0) - 1.0
            if row:
                cons.append(lp.Constraint(row, "=", 0.0, name=f"cons[{i+1},{j+1}]@{l+1}"))
        sink = {_cname(i, j): -1.0}
        for k in range(n):
            if topology.links[k, j]:
                sink[_rname(i, j, k, j)] = 1.0
        cons.append(lp.Constraint(sink, "=", 0.0, name=f"sink[{i+1},{j+1}]"))
        src = {_cname(i, j): -1.0}
        for e in range(n):
            if topology.links[i, e] and e != i:
                src[_rname(i, j, i, e)] = src.get(_rname(i, j, i, e), 0.0) + 1.0
        cons.append(lp.Constraint(src, "=", 0.0, name=f"src[{i+1},{j+1}]"))

    legs_at: List[Dict[str, float]] = [dict() for _ in range(n)]
    for key in rkeys:
        _, _, k, l = key
        name = _rname(*key)
        legs_at[k][name] = legs_at[k].get(name, 0.0) + 1.0
        legs_at[l][name] = legs_at[l].get(name, 0.0) + 1.0
    for l in range(n):
        prow = {name: coeffs.alpha1 * w for name, w in legs_at[l].items()}
        mrow = {name: coeffs.beta1 * w for name, w in legs_at[l].items()}
        prow[_cname(l, l)] = coeffs.alpha1
        mrow[_cname(l, l)] = coeffs.beta1
        cons.append(lp.Constraint(prow, "<=", float(slack_cpu[l]), name=f"cpu[{l+1}]"))
        cons.append(lp.Constraint(mrow, "<=", float(slack_mem[l]), name=f"mem[{l+1}]"))

    objective = {_cname(i, i): 1.0 for i in range(n)}
    objective.update({_cname(i, j): 1.0 for i, j in pairs})
    outcome = lp.solve(lp.LinearProgram(tuple(variables), objective, tuple(cons),
                                        sense="maximize"))
    if not outcome.is_optimal:
        raise PlanningError(f"headroom LP came back {outcome.status}")
    admitted = np.zeros((n, n))
    for i in range(n):
        admitted[i, i] = max(0.0, outcome.assignment[_cname(i, i)])
    for i, j in pairs:
        admitted[i, j] = max(0.0, outcome.assignment[_cname(i, j)])
    relay = {key: outcome.assignment[_rname(*key)] for key in rkeys
             if outcome.assignment[_rname(*key)] > 1e-9}
    cpu, mem = compute_usage(n, coeffs, admitted, relay)
    return RoutingPlan(admitted, relay, cpu, mem)


def scaling_actions(catalog: FlavorCatalog, previous: Sequence[Flavor],
                    selected: Sequence[Flavor]) -> List[str]:
    """Rule table: same flavor NOP, larger UP, smaller DOWN (catalog order)."""
    actions = []
    for before, after in zip(previous, selected):
        a, b = catalog.index(before.name), catalog.index(after.name)
        actions.append(NOP if a == b else (UP if b > a else DOWN))
    return actions


def combine_plans(base: RoutingPlan, extra: RoutingPlan,
                  coeffs: CostCoefficients) -> RoutingPlan:
    admitted = base.admitted + extra.admitted
    relay = dict(base.relay)
    for key, q in extra.relay.items():
        relay[key] = relay.get(key, 0.0) + q
    cpu, mem = compute_usage(base.n, coeffs, admitted, relay)
    return RoutingPlan(admitted, relay, cpu, mem)


@dataclass(frozen=True)
class AutoscaleDecision:
    flavors: List[Flavor]            # selected flavor per server (0-based index)
    actions: List[str]               # UP/DOWN/NOP per server
    shortfall: List[bool]
    p_star: np.ndarray
    m_star: np.ndarray
    base_plan: RoutingPlan           # admits exactly the forecast
    headroom: RoutingPlan            # extra admissions under selected flavors
    combined: RoutingPlan            # base + headroom, real-valued
    directive_plan: RoutingPlan      # combined, floored in path space
    forecast: np.ndarray


class AutoscalePipeline:
    """Stateful per-controller pipeline; ``decide`` is the slot hook.

    ``scale_down_guard`` keeps a server on its current flavor if the load
    observed this slot would not fit the smaller one, preventing thrash on
    noisy forecasts.  ``resize_latency`` of one slot makes a selection take
    effect on the following slot instead of immediately.
    """

    def __init__(self, topology: Topology, catalog: FlavorCatalog,
                 coeffs: CostCoefficients = SMALL_COEFFS,
                 initial_flavor: Optional[str] = None,
                 order: int = 30, step: float = 0.8,
                 scale_down_guard: bool = True, resize_latency: int = 0):
        self.topology = topology
        self.catalog = catalog
        self.coeffs = coeffs
        self.predictor = MatrixPredictor(topology.n, order, step)
        first = catalog.by_name(initial_flavor) if initial_flavor else catalog.smallest
        self.current: List[Flavor] = [first] * topology.n
        self.scale_down_guard = scale_down_guard
        self.resize_latency = resize_latency
        self._pending: Optional[List[Flavor]] = None
        self.log: List[dict] = []
        self.slot = 0
        self._cache: Dict[bytes, AutoscaleDecision] = {}
        self._req_cache: Dict[bytes, Tuple[np.ndarray, np.ndarray]] = {}

    def decide(self, view: Topology, observed: np.ndarray,
               resources: ResourceProfile) -> AutoscaleDecision:
        self.slot += 1
        if self._pending is not None:
            self.current = self._pending
            self._pending = None
        forecast = self.predictor.forecast_matrix(observed)
        # demand toward unroutable pairs cannot be admitted; drop it from the plan
        for i, j in _commodities(view, forecast):
            if not view.reachable(i, j):
                forecast[i, j] = 0.0
        key = b"|".join((view.links.tobytes(), np.round(forecast, 6).tobytes(),
                         np.round(observed, 6).tobytes(),
                         repr([f.name for f in self.current]).encode()))
        cached = self._cache.get(key)
        decision = cached if cached is not None else self._decide(view, observed,
                                                                  resources, forecast)
        if cached is None:
            self._cache[key] = decision
        self.current = decision.flavors if self.resize_latency == 0 else self.current
        if self.resize_latency > 0:
            self._pending = decision.flavors
        for srv in range(view.n):
            self.log.append({
                "slot": self.slot, "server": srv + 1,
                "flavor": decision.flavors[srv].name,
                "action": decision.actions[srv],
                "p_star": round(float(decision.p_star[srv]), 4),
                "m_star": round(float(decision.m_star[srv]), 4),
                "admitted": round(float(decision.directive_plan.admitted[srv].sum()), 4),
            })
        return decision

    def _decide(self, view, observed, resources, forecast) -> AutoscaleDecision:
        p_star, m_star, base = required_resources(view, forecast, self.coeffs,
                                                  normalization=resources)
        choices = select_flavors(self.catalog, p_star, m_star)
        selected = [c.flavor for c in choices]
        shortfall = [c.shortfall for c in choices]
        if self.scale_down_guard:
            p_obs, m_obs = self._observed_requirement(view, observed)
            for srv in range(view.n):
                if self.catalog.index(selected[srv].name) \
                        < self.catalog.index(self.current[srv].name):
                    cap_p, cap_m = selected[srv].capacity_units()
                    if p_obs[srv] > cap_p + 1e-9 or m_obs[srv] > cap_m + 1e-9:
                        selected[srv] = self.current[srv]
        extra = headroom_plan(view, base, selected, self.coeffs)
        combined = combine_plans(base, extra, self.coeffs)
        directive = floor_plan(combined, view, self.coeffs)
        actions = scaling_actions(self.catalog, self.current, selected)
        return AutoscaleDecision(selected, actions, shortfall, p_star, m_star,
                                 base, extra, combined, directive, forecast)

    def _observed_requirement(self, view, observed):
        key = b"|".join((view.links.tobytes(), np.round(observed, 6).tobytes()))
        hit = self._req_cache.get(key)
        if hit is None:
            if float(observed.sum()) <= 0:
                hit = (np.zeros(view.n), np.zeros(view.n))
            else:
                trimmed = observed.copy()
                for i, j in _commodities(view, trimmed):
                    if not view.reachable(i, j):
                        trimmed[i, j] = 0.0
                p, m, _ = required_resources(view, trimmed, self.coeffs)
                hit = (p, m)
            self._req_cache[key] = hit
        return hit

    def log_csv(self) -> str:
        lines = ["slot,server,flavor,action,p_star,m_star,admitted"]
        for row in self.log:
            lines.append(",".join(str(row[k]) for k in
                                  ("slot", "server", "flavor", "action",
                                   "p_star", "m_star", "admitted")))
        return "\n".join(lines) + "\n"
