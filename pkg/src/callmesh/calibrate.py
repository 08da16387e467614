"""Fit per-call cost coefficients from measurement samples.

Each trial records local calls, outbound flow, and the CPU/memory the server
actually used.  The fit minimizes the summed one-sided residual (only
under-estimation is penalized) subject to a normalization pin: the
coefficients must sum to max(usage)/max(local calls).  The pin fixes the
scale, so exact recovery needs the sample achieving the usage maximum to
carry no outbound flow; ``generate_samples`` constructs its data that way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import lp


class DegenerateDataError(ValueError):
    """No sample with local calls > 0: the normalization pin is undefined."""


@dataclass(frozen=True)
class MeasurementSample:
    c_local: float     # established local calls during the trial
    r_out: float       # outbound/relayed flow units
    cpu: float         # measured CPU usage, capacity units
    mem: float         # measured memory usage, capacity units

    def __post_init__(self):
        if min(self.c_local, self.r_out, self.cpu, self.mem) < 0:
            raise ValueError("measurement fields must be >= 0")


def _fit(samples: Sequence[MeasurementSample], usage_of) -> Tuple[float, float]:
    if not samples:
        raise DegenerateDataError("no samples")
    max_c = max(s.c_local for s in samples)
    if max_c <= 0:
        raise DegenerateDataError("need at least one sample with local calls > 0")
    max_u = max(usage_of(s) for s in samples)
    norm = max_u / max_c

    variables = ["k1", "k2"] + [f"x{q}" for q in range(len(samples))]
    cons = [lp.Constraint({"k1": 1.0, "k2": 1.0}, "=", norm, name="norm")]
    for q, s in enumerate(samples):
        # usage - (k1*C + k2*R) <= x_q   (one-sided slack)
        cons.append(lp.Constraint({"k1": s.c_local, "k2": s.r_out, f"x{q}": 1.0},
                                  ">=", usage_of(s), name=f"fit{q}"))
    objective = {f"x{q}": 1.0 for q in range(len(samples))}
    outcome = lp.solve(lp.LinearProgram(tuple(variables), objective, tuple(cons),
                                        sense="minimize"))
    if not outcome.is_optimal:
        raise DegenerateDataError(f"fit LP came back {outcome.status}")
    return outcome.assignment["k1"], outcome.assignment["k2"]


def fit_alpha(samples: Sequence[MeasurementSample]) -> Tuple[float, float]:
    """CPU coefficients (alpha1, alpha2) from the samples."""
    return _fit(samples, lambda s: s.cpu)


def fit_beta(samples: Sequence[MeasurementSample]) -> Tuple[float, float]:
    """Memory coefficients (beta1, beta2) from the samples."""
    return _fit(samples, lambda s: s.mem)


def generate_samples(alpha: Tuple[float, float], beta: Tuple[float, float],
                     trials: int = 100, noise: float = 0.0, seed: int = 0,
                     c_max: float = 100.0) -> List[MeasurementSample]:
    """Synthetic measurement set with a consistent normalization pin.

    Sample 0 carries the peak local load with zero outbound flow and no
    noise, so it realizes both maxima and the pin lands on the true
    coefficients.  Sample 1 has more outbound than local flow, which makes
    the noiseless fit unique.  Remaining trials are drawn seeded-uniform
    with bounded additive noise, clamped at zero.
    """
    if trials < 2:
        raise ValueError("need at least two trials")
    if noise < 0:
        raise ValueError("noise level must be >= 0")
    a1, a2 = alpha
    b1, b2 = beta
    rng = np.random.default_rng(seed)
    samples = [MeasurementSample(c_max, 0.0, a1 * c_max, b1 * c_max),
               MeasurementSample(0.2 * c_max, 0.5 * c_max,
                                 max(0.0, 0.2 * a1 * c_max + 0.5 * a2 * c_max),
                                 max(0.0, 0.2 * b1 * c_max + 0.5 * b2 * c_max))]
    peak_cpu, peak_mem = a1 * c_max, b1 * c_max
    for _ in range(trials - 2):
        c = rng.uniform(0.2, 0.6) * c_max
        r = rng.uniform(0.0, 1.5) * c
        cpu = a1 * c + a2 * r + (rng.uniform(-noise, noise) if noise else 0.0)
        mem = b1 * c + b2 * r + (rng.uniform(-noise, noise) if noise else 0.0)
        # keep the pin consistent: nothing may exceed sample 0's usage
        cpu = float(np.clip(cpu, 0.0, max(peak_cpu - 1e-12, 0.0)))
        mem = float(np.clip(mem, 0.0, max(peak_mem - 1e-12, 0.0)))
        samples.append(MeasurementSample(float(c), float(r), cpu, mem))
    return samples


def samples_to_csv(samples: Sequence[MeasurementSample]) -> str:
    lines = ["c_local,r_out,cpu,mem"]
    for s in samples:
        lines.append(f"{s.c_local:g},{s.r_out:g},{s.cpu:g},{s.mem:g}")
    return "\n".join(lines) + "\n"


def samples_from_csv(text: str) -> List[MeasurementSample]:
    import csv
    import io
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for row in reader:
        try:
            out.append(MeasurementSample(float(row["c_local"]), float(row["r_out"]),
                                         float(row["cpu"]), float(row["mem"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"bad sample row {row!r}: {exc}")
    return out
