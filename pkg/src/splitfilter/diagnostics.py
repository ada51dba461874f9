"""Per-step diagnostics: grid moments, L2 errors and the run-level table."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

DIAGNOSTICS_SCHEMA_VERSION = 1


class DegenerateDensityError(ValueError):
    pass


def trapezoid(values: np.ndarray, spacing: float) -> float:
    values = np.asarray(values, dtype=float)
    return float(spacing * (values.sum() - 0.5 * (values[0] + values[-1])))


def density_moments(values, spacing: float, x0: float = 0.0) -> tuple[float, float, float]:
    """Trapezoid mass, mean and standard deviation of grid values.

    ``values[i]`` is the density at ``x0 + i * spacing``.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("need at least two grid points")
    x = x0 + spacing * np.arange(v.size)
    mass = trapezoid(v, spacing)
    if not mass > 0:
        raise DegenerateDensityError(f"non-positive mass {mass}")
    mean = trapezoid(x * v, spacing) / mass
    var = trapezoid((x - mean) ** 2 * v, spacing) / mass
    return mass, mean, math.sqrt(max(var, 0.0))


def l2_grid_error(u, v, spacing: float) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    return math.sqrt(float(np.sum((u - v) ** 2)) * spacing)


def smooth(values: np.ndarray, spacing: float, bandwidth: float) -> np.ndarray:
    """Gaussian kernel smoothing with standard deviation ``bandwidth``."""
    half = int(math.ceil(4 * bandwidth / spacing))
    k = np.exp(-0.5 * (np.arange(-half, half + 1) * spacing / bandwidth) ** 2)
    k /= k.sum()
    return np.convolve(np.asarray(values, dtype=float), k, mode="same")


def local_maxima(values: np.ndarray, rel_floor: float = 1e-3) -> np.ndarray:
    """Indices of interior local maxima above ``rel_floor * max(values)``.

    Plateaus count once (at their left edge).
    """
    v = np.asarray(values, dtype=float)
    top = v.max()
    idx = []
    i = 1
    while i < v.size - 1:
        if v[i] > v[i - 1]:
            j = i
            while j < v.size - 1 and v[j + 1] == v[i]:
                j += 1
            if j < v.size - 1 and v[j + 1] < v[i] and v[i] >= rel_floor * top:
                idx.append(i)
            i = j + 1
        else:
            i += 1
    return np.array(idx, dtype=int)


@dataclass
class StepDiagnostics:
    step: int
    time: float
    posterior_mass: float
    posterior_mean: float
    posterior_std: float
    exact_mean: Optional[float]
    exact_std: Optional[float]
    abs_mean_error: Optional[float]
    prior_mass: float
    mc_acceptance_rate: float
    normalizer: float
    l2_vs_reference: Optional[float]
    reference_mass: Optional[float]
    observation_increment: float
    signal: float
    flagged: bool

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_diagnostics(path: str | Path, rows: Iterable[StepDiagnostics]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# splitfilter diagnostics schema v{DIAGNOSTICS_SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(StepDiagnostics.columns())
        for row in rows:
            d = asdict(row)
            w.writerow([_fmt(d[c]) for c in StepDiagnostics.columns()])


def read_diagnostics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(lines):
        row = {}
        for k, v in rec.items():
            if v == "":
                row[k] = None
            elif k in ("step", "flagged"):
                row[k] = int(v)
            else:
                row[k] = float(v)
        out.append(row)
    return out
