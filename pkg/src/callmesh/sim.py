"""Slot-stepped simulation of a SIP-server mesh under a central admission
controller, with optional autoscaling, a no-controller baseline, scheduled
load phases, and server failures.

Time advances in controller slots of ``tau`` seconds.  Scenario matrices
give the offered load per reference slot (3 s); other slot lengths scale
the per-slot arrivals proportionally, while each server's per-slot
processing budget stays at its flavor capacity - that is what makes long
slots hurt.  In controlled modes the per-slot loop is: servers report
remaining capacity and fresh demand, the controller plans (re-planning
around servers whose reports have gone stale), directives come back, and
calls are established along the granted relay quotas.  Established calls
persist for an exponential holding time and are lost if a server on their
path dies.  The baseline mode has no controller: servers admit greedily
until saturation, rejections still burn CPU, unanswered setups retransmit
on a doubling timer, and abandoned callers redial - the classic overload
collapse.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .admission import Controller, DutyCycleConfig, compute_usage, decompose_paths
from .autoscale import AutoscalePipeline
from .model import (CASES, CostCoefficients, DEFAULT_FLAVORS, Flavor,
                    FlavorCatalog, ResourceProfile, RoutingPlan, SMALL_COEFFS,
                    Topology, ValidationError, Weights, validate_offered)
from .protocol import StatsReport

MODES = ("controlled", "autoscale", "baseline")


@dataclass(frozen=True)
class FailureEvent:
    server: int          # 1-based
    t_down: float
    t_up: float

    def __post_init__(self):
        if not (0 <= self.t_down < self.t_up):
            raise ValidationError([f"bad failure interval [{self.t_down}, {self.t_up})"])
        if self.server < 1:
            raise ValidationError([f"bad server id {self.server}"])

    def covers(self, t: float) -> bool:
        return self.t_down <= t < self.t_up


@dataclass(frozen=True)
class BaselineKnobs:
    """Overload dynamics of uncontrolled servers."""

    reject_cost: float = 1.0      # CPU per rejected call, in units of alpha1
    retx_cost: float = 0.25      # CPU per retransmission processed, x alpha1
    redial_prob: float = 0.75     # chance an abandoned caller tries again
    max_redials: int = 2
    chunk: float = 5.0            # interleaving granularity of call setups


@dataclass(frozen=True)
class SimConfig:
    topology: Topology
    schedule: Tuple[Tuple[float, np.ndarray], ...]   # (start second, offered matrix)
    duration: float
    mode: str = "controlled"
    duty: DutyCycleConfig = DutyCycleConfig()
    weights: Weights = CASES["f4"]
    coeffs: CostCoefficients = SMALL_COEFFS
    catalog: FlavorCatalog = DEFAULT_FLAVORS
    initial_flavor: str = "m1.small"
    failures: Tuple[FailureEvent, ...] = ()
    seed: int = 0
    hold_time: float = 60.0          # mean call duration, seconds (exponential)
    t1: float = 0.5                  # retransmission base timer
    retx_cap_factor: int = 64        # give up after t1 * factor seconds
    reference_tau: float = 3.0       # slot length the scenario matrices assume
    baseline: BaselineKnobs = BaselineKnobs()
    arrival_jitter: float = 0.0      # 0 = deterministic arrivals
    stale_limit: int = 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError([f"unknown mode {self.mode!r}"])
        if self.duration <= 0:
            raise ValidationError(["duration must be positive"])
        starts = [s for s, _ in self.schedule]
        if starts != sorted(starts):
            raise ValidationError(["schedule start times must be increasing"])
        if not self.schedule:
            raise ValidationError(["schedule is empty"])
        n = self.topology.n
        normalized = tuple((float(s), validate_offered(m)) for s, m in self.schedule)
        for _, m in normalized:
            if m.shape != (n, n):
                raise ValidationError([f"schedule matrix shape {m.shape} != ({n},{n})"])
        object.__setattr__(self, "schedule", normalized)

    def offered_at(self, t: float) -> np.ndarray:
        current = self.schedule[0][1]
        for start, matrix in self.schedule:
            if t >= start:
                current = matrix
            else:
                break
        return current


def inject_failure(config: SimConfig, server: int, t_down: float, t_up: float) -> SimConfig:
    event = FailureEvent(server, t_down, t_up)
    if t_up > config.duration:
        raise ValidationError([f"failure window ends after the run ({t_up} > {config.duration})"])
    return replace(config, failures=config.failures + (event,))


CORE_COLUMNS = ("t", "offered", "admitted", "carried", "rejected", "retx",
                "cpu_avg", "mem_avg", "setup_delay_ms")


class MetricsLog:
    """Per-slot metrics with fixed CSV column order and window aggregation."""

    def __init__(self, n: int):
        self.n = n
        self.rows: List[dict] = []

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def columns(self) -> List[str]:
        cols = list(CORE_COLUMNS)
        cols += [f"cpu_s{i + 1}" for i in range(self.n)]
        cols += [f"mem_s{i + 1}" for i in range(self.n)]
        cols += [f"flavor_s{i + 1}" for i in range(self.n)]
        cols.append("dropped")
        return cols

    def window(self, t0: float, t1: float) -> dict:
        rows = [r for r in self.rows if t0 <= r["t"] < t1]
        if not rows:
            return {"offered": 0.0, "admitted": 0.0, "carried": 0.0, "rejected": 0.0,
                    "retx": 0.0, "admission_rate": 0.0, "carried_ratio": 0.0,
                    "cpu_avg": 0.0, "mem_avg": 0.0}
        offered = sum(r["offered"] for r in rows)
        admitted = sum(r["admitted"] for r in rows)
        carried = sum(r["carried"] for r in rows)
        return {
            "offered": offered,
            "admitted": admitted,
            "carried": carried,
            "rejected": sum(r["rejected"] for r in rows),
            "retx": sum(r["retx"] for r in rows),
            "admission_rate": admitted / offered if offered else 0.0,
            "carried_ratio": carried / offered if offered else 0.0,
            "cpu_avg": float(np.mean([r["cpu_avg"] for r in rows])),
            "mem_avg": float(np.mean([r["mem_avg"] for r in rows])),
        }

    def flavors_in(self, t0: float, t1: float, server: int) -> List[str]:
        return [r[f"flavor_s{server}"] for r in self.rows if t0 <= r["t"] < t1]

    def to_csv(self) -> str:
        cols = self.columns()
        lines = [",".join(cols)]
        for r in self.rows:
            parts = []
            for c in cols:
                v = r.get(c, 0)
                parts.append(f"{v:.6g}" if isinstance(v, float) else str(v))
            lines.append(",".join(parts))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"columns": self.columns(), "rows": self.rows}, indent=1)


@dataclass
class _Cohort:
    """Calls established together: same slot, same path, shared expiry."""

    end_time: float
    path: Tuple[int, ...]     # 0-based servers; locals have a 1-tuple
    count: float


class _Servers:
    def __init__(self, config: SimConfig):
        self.catalog = config.catalog
        self.flavors: List[Flavor] = [config.catalog.by_name(config.initial_flavor)
                                      for _ in range(config.topology.n)]

    def caps(self) -> Tuple[np.ndarray, np.ndarray]:
        caps = np.array([f.capacity_units() for f in self.flavors])
        return caps[:, 0].copy(), caps[:, 1].copy()

    def resize(self, server: int, flavor_name: str) -> None:
        self.flavors[server] = self.catalog.by_name(flavor_name)


def run(config: SimConfig) -> MetricsLog:
    """Execute the full schedule; deterministic for a fixed config and seed."""
    rng = np.random.default_rng(config.seed)
    topo = config.topology
    n = topo.n
    tau = config.duty.tau
    slots = int(round(config.duration / tau))
    scale = tau / config.reference_tau
    servers = _Servers(config)
    log = MetricsLog(n)

    controller: Optional[Controller] = None
    if config.mode in ("controlled", "autoscale"):
        pipeline = None
        if config.mode == "autoscale":
            pipeline = AutoscalePipeline(topo, config.catalog, config.coeffs,
                                         initial_flavor=config.initial_flavor)
        controller = Controller(topo, config.weights, config.coeffs,
                                config=config.duty, stale_limit=config.stale_limit,
                                autoscaler=pipeline)

    active: List[_Cohort] = []
    was_up = [True] * n
    retx_backlog: List[dict] = []             # baseline transaction state
    redials: Dict[int, np.ndarray] = {}       # redial generation -> demand matrix

    for k in range(slots):
        t = k * tau
        up = [not any(f.covers(t) and f.server == i + 1 for f in config.failures)
              for i in range(n)]

        dropped = 0.0
        for i in range(n):
            if was_up[i] and not up[i]:
                keep = []
                for cohort in active:
                    if i in cohort.path and len(cohort.path) > 1:
                        dropped += cohort.count
                    else:
                        keep.append(cohort)
                active = keep
        was_up = list(up)

        offered = config.offered_at(t) * scale
        if config.arrival_jitter > 0:
            offered = offered * rng.uniform(1 - config.arrival_jitter,
                                            1 + config.arrival_jitter, offered.shape)
        offered_total = float(offered.sum())

        if config.mode == "baseline":
            row = _baseline_slot(config, rng, servers, up, offered, redials,
                                 retx_backlog, active, t)
        else:
            row = _controlled_slot(config, rng, controller, servers, up, offered,
                                   active, t, k)
        row["t"] = t
        row["offered"] = offered_total
        row["dropped"] = row.get("dropped", 0.0) + dropped
        for i in range(n):
            row[f"flavor_s{i + 1}"] = servers.flavors[i].name
        log.append(row)

        active = [c for c in active if c.end_time > t + tau]
    return log


def _caps_for_slot(servers: _Servers, up: Sequence[bool]) -> Tuple[np.ndarray, np.ndarray]:
    cap_p, cap_m = servers.caps()
    for i, alive in enumerate(up):
        if not alive:
            cap_p[i] = 0.0
            cap_m[i] = 0.0
    return cap_p, cap_m


def _controlled_slot(config: SimConfig, rng, controller: Controller,
                     servers: _Servers, up: Sequence[bool], offered: np.ndarray,
                     active: List[_Cohort], t: float, slot: int) -> dict:
    n = config.topology.n
    cap_p, cap_m = servers.caps()
    reports = []
    for i in range(n):
        if not up[i]:
            continue
        outbound = {j + 1: float(offered[i, j]) for j in range(n)
                    if j != i and offered[i, j] > 0}
        reports.append(StatsReport(server=i + 1, slot=slot, cpu=float(cap_p[i]),
                                   memory=float(cap_m[i]), local=float(offered[i, i]),
                                   outbound=outbound))
    directives = controller.step(reports)

    # rebuild the network-wide plan from the per-server directives
    admitted_quota = np.zeros((n, n))
    relay: Dict[Tuple[int, int, int, int], float] = {}
    for d in directives:
        if d.flavor is not None and up[d.server - 1]:
            if servers.flavors[d.server - 1].name != d.flavor:
                servers.resize(d.server - 1, d.flavor)
        admitted_quota[d.server - 1, :] = d.admit
        for (i, j, kk, ll, q) in d.relays:
            relay[(i - 1, j - 1, kk - 1, ll - 1)] = float(q)
    cap_p, cap_m = servers.caps()     # resizes take effect within the slot

    admitted = 0.0
    carried = 0.0
    legs = np.zeros(n)
    local_counts = np.zeros(n)
    delays: List[Tuple[float, Tuple[int, ...]]] = []

    for i in range(n):
        if not up[i]:
            continue
        take = min(float(offered[i, i]), admitted_quota[i, i])
        if take > 0:
            admitted += take
            carried += take
            local_counts[i] += take
            hold = rng.exponential(config.hold_time)
            active.append(_Cohort(t + hold, (i,), take))
            delays.append((take, (i,)))

    quota_plan = RoutingPlan(admitted_quota, relay, np.zeros(n), np.zeros(n))
    paths = decompose_paths(quota_plan, config.topology, tol=1e-9)
    for i in range(n):
        for j in range(n):
            if i == j or offered[i, j] <= 0 or not up[i]:
                continue
            pair_paths = paths.for_pair(i, j)
            quota = sum(flow for _, flow in pair_paths)
            take = min(float(offered[i, j]), quota)
            if take <= 0:
                continue
            admitted += take
            for nodes, flow in pair_paths:
                share = take * flow / quota
                if share <= 0:
                    continue
                if all(up[u] for u in nodes):
                    carried += share
                    hold = rng.exponential(config.hold_time)
                    active.append(_Cohort(t + hold, nodes, share))
                    for u, v in zip(nodes, nodes[1:]):
                        legs[u] += share
                        legs[v] += share
                    delays.append((share, nodes))
                # shares pointed at a dead server fail setup: admitted, not carried

    coeffs = config.coeffs
    usage_p = coeffs.alpha1 * (local_counts + legs)
    usage_m = coeffs.beta1 * (local_counts + legs)
    slack = cap_p - usage_p
    if (slack < -1e-6).any():
        raise RuntimeError("plan exceeded CPU capacity; controller invariant broken")
    if (cap_m - usage_m < -1e-6).any():
        raise RuntimeError("plan exceeded memory capacity; controller invariant broken")

    budget = np.maximum(cap_p, 1e-12) * (config.duty.tau / config.reference_tau)
    util = usage_p / budget
    mem_util = usage_m / (np.maximum(cap_m, 1e-12) * (config.duty.tau / config.reference_tau))
    delay_ms = _setup_delay(delays, util)

    row = {
        "admitted": admitted,
        "carried": carried,
        "rejected": float(offered.sum()) - carried,
        "retx": 0.0,
        "cpu_avg": float(np.mean(np.where(up, util, 0.0))),
        "mem_avg": float(np.mean(np.where(up, mem_util, 0.0))),
        "setup_delay_ms": delay_ms,
    }
    for i in range(n):
        row[f"cpu_s{i + 1}"] = float(util[i])
        row[f"mem_s{i + 1}"] = float(mem_util[i])
    return row


def _setup_delay(delays: Sequence[Tuple[float, Tuple[int, ...]]],
                 util: np.ndarray) -> float:
    """Coarse queueing proxy: 5 ms per hop plus a utilization-driven term."""
    total = sum(c for c, _ in delays)
    if total <= 0:
        return 0.0
    acc = 0.0
    for count, nodes in delays:
        acc += count * sum(5.0 + 45.0 * min(1.0, util[u]) for u in nodes)
    return acc / total


def _baseline_slot(config: SimConfig, rng, servers: _Servers, up: Sequence[bool],
                   offered: np.ndarray, redials: Dict[int, np.ndarray],
                   retx_backlog: List[dict],
                   active: List[_Cohort], t: float) -> dict:
    n = config.topology.n
    coeffs = config.coeffs
    knobs = config.baseline
    cap_p, cap_m = _caps_for_slot(servers, up)
    budget_p = cap_p.copy()
    budget_m = cap_m.copy()

    # stateful transactions pin memory while they wait for retransmission
    pending_at = np.zeros(n)
    for entry in retx_backlog:
        pending_at[entry["origin"]] += entry["count"]
    budget_m -= coeffs.beta1 * pending_at
    overflow = np.maximum(-budget_m, 0.0)
    if overflow.any():
        # memory exhausted: drop the oldest transaction state first
        for i in np.nonzero(overflow)[0]:
            need = overflow[i] / coeffs.beta1
            for entry in retx_backlog:
                if entry["origin"] == i and need > 0:
                    cut = min(entry["count"], need)
                    entry["count"] -= cut
                    need -= cut
        retx_backlog[:] = [e for e in retx_backlog if e["count"] > 1e-9]
        budget_m = np.maximum(budget_m, 0.0)

    dist = _hop_distances(config.topology, up)
    admitted = carried = retx = 0.0
    legs = np.zeros(n)
    delays: List[Tuple[float, Tuple[int, ...]]] = []

    def establish(i: int, j: int, count: float) -> float:
        """Greedy hop-by-hop setup; returns how many calls got through."""
        nonlocal carried
        if count <= 0:
            return 0.0
        if not up[i] or not up[j] or dist[i][j] == math.inf:
            _burn(budget_p, i if up[i] else j, knobs.reject_cost * coeffs.alpha1 * count)
            return 0.0
        if i == j:
            room = min(budget_p[i] / coeffs.alpha1, budget_m[i] / coeffs.beta1)
            take = min(count, max(room, 0.0))
            budget_p[i] -= coeffs.alpha1 * take
            budget_m[i] -= coeffs.beta1 * take
            if count > take:
                _burn(budget_p, i, knobs.reject_cost * coeffs.alpha1 * (count - take))
            if take > 0:
                carried += take
                hold = rng.exponential(config.hold_time)
                active.append(_Cohort(t + hold, (i,), take))
                delays.append((take, (i,)))
            return take
        flow = count
        node = i
        path = [i]
        while node != j and flow > 0:
            nxts = [v for v in range(n) if config.topology.links[node, v]
                    and up[v] and dist[v][j] < dist[node][j] and v not in path]
            if not nxts:
                break
            v = nxts[int(rng.integers(len(nxts)))] if len(nxts) > 1 else nxts[0]
            room = min(budget_p[node] / coeffs.alpha1, budget_p[v] / coeffs.alpha1,
                       budget_m[node] / coeffs.beta1, budget_m[v] / coeffs.beta1)
            passed = min(flow, max(room, 0.0))
            if passed < flow:
                _burn(budget_p, node, knobs.reject_cost * coeffs.alpha1 * (flow - passed))
            budget_p[node] -= coeffs.alpha1 * passed
            budget_p[v] -= coeffs.alpha1 * passed
            budget_m[node] -= coeffs.beta1 * passed
            budget_m[v] -= coeffs.beta1 * passed
            legs[node] += passed
            legs[v] += passed
            flow = passed
            path.append(v)
            node = v
        made = flow if node == j else 0.0
        if made > 0:
            carried += made
            hold = rng.exponential(config.hold_time)
            active.append(_Cohort(t + hold, tuple(path), made))
            delays.append((made, tuple(path)))
        return made

    # retransmissions due this slot run first: they are what strangles recovery
    give_cap = config.t1 * config.retx_cap_factor
    still_pending: List[dict] = []
    for entry in retx_backlog:
        if entry["next_t"] > t + config.duty.tau:
            still_pending.append(entry)
            continue
        count = entry["count"]
        retx += count
        _burn(budget_p, entry["origin"], knobs.retx_cost * coeffs.alpha1 * count)
        made = establish(entry["origin"], entry["dest"], count)
        remain = count - made
        if remain > 1e-9:
            age = entry["age"] + config.t1 * (2 ** entry["attempt"])
            if age >= give_cap:
                # caller gives up; some fraction redials as a brand-new call
                gen = entry["gen"] + 1
                if gen <= knobs.max_redials:
                    mat = redials.setdefault(gen, np.zeros((n, n)))
                    mat[entry["origin"], entry["dest"]] += remain * knobs.redial_prob
            else:
                still_pending.append({**entry, "count": remain,
                                      "attempt": entry["attempt"] + 1, "age": age,
                                      "next_t": t + config.t1 * (2 ** (entry["attempt"] + 1))})
    retx_backlog[:] = still_pending

    demand: List[Tuple[int, int, float, int]] = []
    admitted = 0.0
    for i in range(n):
        for j in range(n):
            if offered[i, j] > 0:
                demand.append((i, j, float(offered[i, j]), 0))
                if up[i]:
                    admitted += float(offered[i, j])   # uncontrolled: try everything
    for gen, mat in sorted(redials.items()):
        for i in range(n):
            for j in range(n):
                if mat[i, j] > 0:
                    demand.append((i, j, float(mat[i, j]), gen))
    redials.clear()
    # interleave setups in small chunks: servers serve arrivals roughly fairly
    units: List[Tuple[int, int, float, int]] = []
    for i, j, count, gen in demand:
        whole = int(count // knobs.chunk)
        units.extend([(i, j, knobs.chunk, gen)] * whole)
        rest = count - whole * knobs.chunk
        if rest > 1e-9:
            units.append((i, j, rest, gen))
    order = np.arange(len(units))
    rng.shuffle(order)
    failed_by: Dict[Tuple[int, int, int], float] = {}
    for idx in order:
        i, j, count, gen = units[idx]
        made = establish(i, j, count)
        failed = count - made
        if failed > 1e-9 and up[i]:
            key = (i, j, gen)
            failed_by[key] = failed_by.get(key, 0.0) + failed
    for (i, j, gen), failed in sorted(failed_by.items()):
        retx_backlog.append({"origin": i, "dest": j, "count": failed,
                             "attempt": 0, "age": 0.0, "next_t": t + config.t1,
                             "gen": gen})

    usage_p = cap_p - budget_p
    usage_m = cap_m - budget_m
    scale = config.duty.tau / config.reference_tau
    util = usage_p / (np.maximum(cap_p, 1e-12) * scale)
    mem_util = usage_m / (np.maximum(cap_m, 1e-12) * scale)
    row = {
        "admitted": admitted,
        "carried": carried,
        "rejected": float(offered.sum()) - carried,
        "retx": retx,
        "cpu_avg": float(np.mean(np.where(up, util, 0.0))),
        "mem_avg": float(np.mean(np.where(up, mem_util, 0.0))),
        "setup_delay_ms": _setup_delay(delays, util) + 1000.0 * config.t1 *
                          (retx / max(admitted, 1.0)),
    }
    for i in range(n):
        row[f"cpu_s{i + 1}"] = float(util[i])
        row[f"mem_s{i + 1}"] = float(mem_util[i])
    return row


def _burn(budget_p: np.ndarray, server: int, amount: float) -> None:
    budget_p[server] = max(0.0, budget_p[server] - amount)


def _hop_distances(topology: Topology, up: Sequence[bool]) -> List[List[float]]:
    n = topology.n
    dist = [[math.inf] * n for _ in range(n)]
    for s in range(n):
        if not up[s]:
            continue
        dist[s][s] = 0.0
        frontier = [s]
        d = 0
        while frontier:
            d += 1
            nxt = []
            for u in frontier:
                for v in range(n):
                    if topology.links[u, v] and up[v] and dist[s][v] == math.inf:
                        dist[s][v] = d
                        nxt.append(v)
            frontier = nxt
    return dist
