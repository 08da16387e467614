"""Domain types shared across the package: topology, offered load, server
resources, cost coefficients, routing plans and VM flavors, plus the built-in
reference fixtures (six-server ring, three load scenarios, flavor catalog)
and their plain-text/CSV file formats.

Indices in files and reports are 1-based; in-memory arrays are 0-based.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class ValidationError(ValueError):
    """Input data violates a structural invariant; lists every violation."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# --------------------------------------------------------------------------
# topology

@dataclass(frozen=True)
class Topology:
    """Symmetric 0/1 adjacency matrix over n servers with a zero diagonal."""

    links: np.ndarray

    @property
    def n(self) -> int:
        return self.links.shape[0]

    def neighbors(self, i: int) -> List[int]:
        return [j for j in range(self.n) if self.links[i, j]]

    def degree(self, i: int) -> int:
        return int(self.links[i].sum())

    def reachable(self, i: int, j: int) -> bool:
        if i == j:
            return True
        seen = {i}
        stack = [i]
        while stack:
            u = stack.pop()
            for v in range(self.n):
                if self.links[u, v] and v not in seen:
                    if v == j:
                        return True
                    seen.add(v)
                    stack.append(v)
        return False

    def without_server(self, down: int) -> "Topology":
        """Topology as seen when one server is removed (row/column zeroed)."""
        links = self.links.copy()
        links[down, :] = 0
        links[:, down] = 0
        return Topology(links)

    def edges(self) -> List[Tuple[int, int]]:
        return [(i, j) for i in range(self.n) for j in range(i + 1, self.n)
                if self.links[i, j]]


def validate_topology(links) -> Topology:
    """Check adjacency-matrix invariants, reporting every violation at once."""
    arr = np.asarray(links, dtype=float)
    problems = []
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValidationError([f"adjacency matrix must be square, got shape {arr.shape}"])
    if arr.shape[0] < 1:
        problems.append("need at least one server")
    bad = (arr != 0) & (arr != 1)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        problems.append(f"non-binary entry at ({i + 1},{j + 1})")
    if not np.array_equal(arr, arr.T):
        i, j = np.argwhere(arr != arr.T)[0]
        problems.append(f"asymmetric at ({i + 1},{j + 1})")
    if np.any(np.diag(arr) != 0):
        i = int(np.argwhere(np.diag(arr) != 0)[0][0])
        problems.append(f"nonzero diagonal at server {i + 1}")
    if problems:
        raise ValidationError(problems)
    return Topology(arr.astype(np.int8))


def topology_from_edges(n: int, edges: Iterable[Tuple[int, int]]) -> Topology:
    """Build a topology from 1-based undirected edge pairs."""
    links = np.zeros((n, n), dtype=np.int8)
    for a, b in edges:
        links[a - 1, b - 1] = 1
        links[b - 1, a - 1] = 1
    return validate_topology(links)


# --------------------------------------------------------------------------
# offered load

def validate_offered(matrix) -> np.ndarray:
    arr = np.asarray(matrix, dtype=float)
    problems = []
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValidationError([f"offered-load matrix must be square, got shape {arr.shape}"])
    if not np.all(np.isfinite(arr)):
        problems.append("non-finite entry")
    elif (arr < 0).any():
        i, j = np.argwhere(arr < 0)[0]
        problems.append(f"negative offered load at ({i + 1},{j + 1})")
    if problems:
        raise ValidationError(problems)
    return arr


# --------------------------------------------------------------------------
# resources and cost coefficients

@dataclass(frozen=True)
class CostCoefficients:
    """Per-call resource usage: (alpha1, beta1) are CPU/memory units consumed
    for each call leg a server handles (a local call, or one hop of a relayed
    call entering or leaving it); (alpha2, beta2) are the per-outbound-call
    overheads produced by the calibration fit and carried along for reporting.
    """

    alpha1: float = 0.07841
    alpha2: float = 0.02158
    beta1: float = 0.06998
    beta2: float = 0.01997

    def __post_init__(self):
        vals = (self.alpha1, self.alpha2, self.beta1, self.beta2)
        if any(v < 0 or not np.isfinite(v) for v in vals):
            raise ValidationError(["cost coefficients must be finite and >= 0"])
        if self.alpha1 < self.alpha2 or self.beta1 < self.beta2:
            warnings.warn("expected alpha1 >= alpha2 and beta1 >= beta2 for calibrated values",
                          stacklevel=2)


# coefficients measured on the small and medium VM sizes
SMALL_COEFFS = CostCoefficients(0.07841, 0.02158, 0.06998, 0.01997)
MEDIUM_COEFFS = CostCoefficients(0.08012, 0.02329, 0.07169, 0.02168)


@dataclass(frozen=True)
class ResourceProfile:
    """Remaining per-server CPU and memory, in capacity units per slot."""

    cpu: np.ndarray
    memory: np.ndarray
    coeffs: CostCoefficients = SMALL_COEFFS

    def __post_init__(self):
        cpu = np.asarray(self.cpu, dtype=float)
        mem = np.asarray(self.memory, dtype=float)
        object.__setattr__(self, "cpu", cpu)
        object.__setattr__(self, "memory", mem)
        if cpu.shape != mem.shape or cpu.ndim != 1:
            raise ValidationError(["cpu and memory vectors must be 1-d and equal length"])
        if (cpu < 0).any() or (mem < 0).any():
            raise ValidationError(["remaining resources must be >= 0"])

    @property
    def n(self) -> int:
        return self.cpu.shape[0]


def uniform_resources(n: int, cpu: float = 100.0, memory: float = 100.0,
                      coeffs: CostCoefficients = SMALL_COEFFS) -> ResourceProfile:
    return ResourceProfile(np.full(n, float(cpu)), np.full(n, float(memory)), coeffs)


@dataclass(frozen=True)
class Weights:
    """Objective trade-off between admission (gamma) and resource use (phi)."""

    gamma: float = 1.0
    phi: float = 0.05

    def __post_init__(self):
        if self.gamma < 0 or self.phi < 0:
            raise ValidationError(["weights must be >= 0"])
        if self.gamma == 0 and self.phi == 0:
            raise ValidationError(["gamma and phi cannot both be zero"])


# trade-off ladder used in the experiments, from resource-frugal to
# admission-dominant
CASES = {
    "f1": Weights(1.0, 4.0),
    "f2": Weights(1.0, 1.0),
    "f3": Weights(1.0, 0.2),
    "f4": Weights(1.0, 0.05),
}


# --------------------------------------------------------------------------
# routing plan

@dataclass(frozen=True)
class RoutingPlan:
    """Admission matrix plus relay flows.

    ``admitted[i, j]`` is the quota for calls from origin i to destination j
    (diagonal = local calls).  ``relay`` maps (i, j, k, l) to the flow of
    commodity (i, j) carried on the directed trunk k -> l.  ``cpu_use`` and
    ``mem_use`` are the planned per-server usages.
    """

    admitted: np.ndarray
    relay: Dict[Tuple[int, int, int, int], float]
    cpu_use: np.ndarray
    mem_use: np.ndarray

    @property
    def n(self) -> int:
        return self.admitted.shape[0]

    @property
    def total_admitted(self) -> float:
        return float(self.admitted.sum())

    def relay_out(self, server: int) -> Dict[Tuple[int, int, int, int], float]:
        """Relay entries where ``server`` is the sending end of the trunk."""
        return {key: q for key, q in self.relay.items() if key[2] == server}

    def validate(self, topology: Topology, offered: np.ndarray, tol: float = 1e-6) -> None:
        problems = []
        if (self.admitted < -tol).any():
            problems.append("negative admission")
        if (self.admitted > offered + tol).any():
            problems.append("admission exceeds offered load")
        for (i, j, k, l), q in self.relay.items():
            if q < -tol:
                problems.append(f"negative relay flow on ({i+1},{j+1},{k+1},{l+1})")
            if not topology.links[k, l]:
                problems.append(f"relay flow on missing trunk {k+1}->{l+1}")
            if i == j:
                problems.append(f"relay flow for local commodity ({i+1},{i+1})")
            if l == i:
                problems.append(f"relay flow back into origin {i+1}")
        if problems:
            raise ValidationError(problems)


# --------------------------------------------------------------------------
# flavors

@dataclass(frozen=True)
class Flavor:
    name: str
    memory_mb: int
    vcpus: int
    disk_gb: int

    def capacity_units(self) -> Tuple[float, float]:
        """(CPU, memory) capacity in abstract units: 1 vCPU = 100 CPU units,
        2048 MB = 100 memory units, anchoring the smallest flavor at (100, 100)."""
        return 100.0 * self.vcpus, 100.0 * self.memory_mb / 2048.0


@dataclass(frozen=True)
class FlavorCatalog:
    flavors: Tuple[Flavor, ...]

    def __post_init__(self):
        if not self.flavors:
            raise ValidationError(["flavor catalog is empty"])
        caps = [f.capacity_units() for f in self.flavors]
        for a, b in zip(caps, caps[1:]):
            if not (b[0] > a[0] and b[1] > a[1]):
                raise ValidationError(["catalog capacities must be strictly increasing"])

    def __iter__(self):
        return iter(self.flavors)

    def __len__(self):
        return len(self.flavors)

    def by_name(self, name: str) -> Flavor:
        for f in self.flavors:
            if f.name == name:
                return f
        raise KeyError(name)

    def index(self, name: str) -> int:
        for i, f in enumerate(self.flavors):
            if f.name == name:
                return i
        raise KeyError(name)

    @property
    def smallest(self) -> Flavor:
        return self.flavors[0]

    @property
    def largest(self) -> Flavor:
        return self.flavors[-1]


def capacity_units(flavor: Flavor) -> Tuple[float, float]:
    return flavor.capacity_units()


DEFAULT_FLAVORS = FlavorCatalog((
    Flavor("m1.small", 2048, 1, 20),
    Flavor("m1.medium", 4096, 2, 40),
    Flavor("m1.large", 8192, 4, 80),
    Flavor("m1.xlarge", 16384, 8, 160),
))


# --------------------------------------------------------------------------
# reference fixtures: six servers in a ring, with two trunk neighbours each

REFERENCE_EDGES = [(1, 2), (1, 3), (2, 4), (3, 5), (4, 6), (5, 6)]


def reference_topology() -> Topology:
    return topology_from_edges(6, REFERENCE_EDGES)


_SCENARIOS = {
    "scenario1": [
        [10, 20, 48, 30, 60, 8],
        [10, 50, 20, 54, 48, 54],
        [44, 44, 100, 30, 40, 12],
        [10, 20, 30, 46, 50, 14],
        [50, 50, 30, 20, 54, 20],
        [50, 40, 25, 40, 54, 15],
    ],
    "scenario2": [
        [50, 60, 64, 65, 93, 58],
        [60, 95, 70, 70, 42, 40],
        [40, 65, 70, 30, 60, 92],
        [50, 30, 20, 86, 60, 94],
        [90, 76, 60, 50, 70, 80],
        [46, 95, 70, 44, 70, 85],
    ],
    "scenario3": [
        [110, 120, 84, 80, 105, 65],
        [70, 105, 80, 75, 100, 98],
        [78, 75, 125, 90, 120, 98],
        [60, 90, 80, 95, 115, 100],
        [100, 86, 108, 60, 102, 94],
        [66, 105, 94, 104, 78, 85],
    ],
}

SCENARIO_NAMES = tuple(sorted(_SCENARIOS))


def load_scenario(name_or_path) -> np.ndarray:
    """Built-in scenario by name, or a whitespace-separated matrix file."""
    key = str(name_or_path)
    if key in _SCENARIOS:
        return validate_offered(np.array(_SCENARIOS[key], dtype=float))
    try:
        with open(name_or_path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError([f"unknown scenario {key!r} and no such file ({exc})"])
    return parse_offered(text)


# --------------------------------------------------------------------------
# file formats

def parse_topology(text: str) -> Topology:
    """First line n, then n rows of 0/1."""
    lines = [ln for ln in text.strip().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValidationError(["empty topology file"])
    try:
        n = int(lines[0].split()[0])
    except ValueError:
        raise ValidationError(["first line of a topology file must be the server count"])
    rows = [[float(tok) for tok in ln.split()] for ln in lines[1:1 + n]]
    if len(rows) != n or any(len(r) != n for r in rows):
        raise ValidationError([f"expected {n} rows of {n} entries"])
    return validate_topology(np.array(rows))


def format_topology(topology: Topology) -> str:
    lines = [str(topology.n)]
    for row in topology.links:
        lines.append(" ".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def parse_offered(text: str) -> np.ndarray:
    lines = [ln for ln in text.strip().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        return np.zeros((0, 0))
    rows = [[float(tok) for tok in ln.split()] for ln in lines]
    return validate_offered(np.array(rows))


def format_offered(offered: np.ndarray) -> str:
    return "\n".join(" ".join(f"{v:g}" for v in row) for row in offered) + "\n"


def parse_flavors(text: str) -> FlavorCatalog:
    """CSV with header name,memory_mb,vcpus,disk_gb."""
    reader = csv.DictReader(io.StringIO(text))
    flavors = []
    for row in reader:
        try:
            flavors.append(Flavor(row["name"].strip(), int(row["memory_mb"]),
                                  int(row["vcpus"]), int(row["disk_gb"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError([f"bad flavor row {row!r}: {exc}"])
    return FlavorCatalog(tuple(flavors))


def format_flavors(catalog: FlavorCatalog) -> str:
    out = ["name,memory_mb,vcpus,disk_gb"]
    for f in catalog:
        out.append(f"{f.name},{f.memory_mb},{f.vcpus},{f.disk_gb}")
    return "\n".join(out) + "\n"
