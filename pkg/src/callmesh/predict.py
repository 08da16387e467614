"""One-step-ahead workload prediction with a normalized LMS adaptive filter.

One filter per origin-destination pair.  Coefficients start at zero and
adapt from the prediction error, normalized by the energy of the
observation window, so the step size is dimensionless and stability only
requires 0 < step < 2.  Forecasts are clamped at zero (call counts).
"""

from __future__ import annotations

import csv
import io
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_ORDER = 30
DEFAULT_STEP = 0.8
_NORM_FLOOR = 1e-12   # windows with less energy than this skip the update


class NlmsPredictor:
    """Adaptive one-step predictor for a single scalar series."""

    def __init__(self, order: int = DEFAULT_ORDER, step: float = DEFAULT_STEP):
        if order < 1:
            raise ValueError(f"filter order must be >= 1, got {order}")
        if not 0.0 < step < 2.0:
            raise ValueError(f"step size must sit in (0, 2) for stability, got {step}")
        self.order = order
        self.step = step
        self.coeffs = np.zeros(order)
        self.window = np.zeros(order)        # newest first, zero-padded warm-up
        self._last_forecast = 0.0
        self.last_error = 0.0

    def predict_next(self) -> float:
        """Forecast for the next slot; no state change."""
        return self._last_forecast

    def update(self, observed: float) -> float:
        """Ingest one observation, adapt, and return the next-slot forecast.

        The adaptation uses the window that produced the previous forecast;
        a zero-energy window leaves the coefficients untouched.
        """
        if observed < 0:
            raise ValueError(f"negative observation {observed}")
        error = observed - self._last_forecast
        energy = float(self.window @ self.window)
        if energy > _NORM_FLOOR:
            self.coeffs = self.coeffs + self.step * error * self.window / energy
        self.last_error = error
        self.window = np.concatenate(([observed], self.window[:-1]))
        self._last_forecast = max(0.0, float(self.coeffs @ self.window))
        return self._last_forecast

    def copy(self) -> "NlmsPredictor":
        dup = NlmsPredictor(self.order, self.step)
        dup.coeffs = self.coeffs.copy()
        dup.window = self.window.copy()
        dup._last_forecast = self._last_forecast
        dup.last_error = self.last_error
        return dup


class MatrixPredictor:
    """One NLMS filter per (origin, destination) pair of an n-server mesh."""

    def __init__(self, n: int, order: int = DEFAULT_ORDER, step: float = DEFAULT_STEP):
        self.n = n
        self.filters = [[NlmsPredictor(order, step) for _ in range(n)] for _ in range(n)]

    def forecast_matrix(self, observed) -> np.ndarray:
        """Feed the slot's observed offered-load matrix; returns the forecast
        for the next slot after updating every pair's filter."""
        observed = np.asarray(observed, dtype=float)
        if observed.shape != (self.n, self.n):
            raise ValueError(f"expected {(self.n, self.n)} matrix, got {observed.shape}")
        out = np.zeros_like(observed)
        for i in range(self.n):
            for j in range(self.n):
                out[i, j] = self.filters[i][j].update(observed[i, j])
        return out

    def peek(self) -> np.ndarray:
        return np.array([[f.predict_next() for f in row] for row in self.filters])


def replay_trace_csv(text: str, n: int) -> List[np.ndarray]:
    """Parse a ``slot,i,j,offered`` trace into per-slot matrices (1-based i, j)."""
    reader = csv.DictReader(io.StringIO(text))
    by_slot: Dict[int, np.ndarray] = {}
    for row in reader:
        try:
            slot = int(row["slot"])
            i, j = int(row["i"]) - 1, int(row["j"]) - 1
            value = float(row["offered"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"bad trace row {row!r}: {exc}")
        if not (0 <= i < n and 0 <= j < n) or value < 0:
            raise ValueError(f"trace row out of range: {row!r}")
        by_slot.setdefault(slot, np.zeros((n, n)))[i, j] = value
    if not by_slot:
        return []
    top = max(by_slot)
    return [by_slot.get(s, np.zeros((n, n))) for s in range(top + 1)]


def trace_to_csv(matrices: Sequence[np.ndarray]) -> str:
    lines = ["slot,i,j,offered"]
    for slot, mat in enumerate(matrices):
        n = mat.shape[0]
        for i in range(n):
            for j in range(n):
                if mat[i, j]:
                    lines.append(f"{slot},{i + 1},{j + 1},{mat[i, j]:g}")
    return "\n".join(lines) + "\n"
