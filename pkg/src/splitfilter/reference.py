"""Independent oracles for the neural filter.

* Kalman-Bucy recursion (exact Gaussian filter for the linear model).
* Pointwise Feynman-Kac Monte-Carlo estimate of the prediction density.
* Classical grid splitting-up filter: explicit finite differences for the
  prediction PDE, pointwise likelihood multiplication for the correction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .diagnostics import density_moments, trapezoid
from .domain import Box
from .model import FilterModel, LinearModelParams
from .sde import ObservationPath, euler_maruyama_auxiliary, substream


class NumericalError(RuntimeError):
    pass


class CFLError(ValueError):
    pass


# --------------------------------------------------------------------------
# Kalman-Bucy

@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray  # (d,)
    cov: np.ndarray   # (d, d)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def kalman_bucy_step(state: KalmanState, params: LinearModelParams, dY, dt: float,
                     substeps: int = 100) -> KalmanState:
    """Propagate over one observation interval of length ``dt``.

    The interval's observation increment ``dY`` is spread evenly over the
    ``substeps`` Euler steps of the mean equation and the Riccati equation.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    M, eta, S = params.M, params.eta, params.Sigma
    H, gamma = params.H, params.gamma
    Q = S @ S.T
    HtH = H.T @ H
    delta = dt / substeps
    dy = np.asarray(dY, dtype=float).reshape(-1) / substeps
    m = state.mean.astype(float).copy()
    P = state.cov.astype(float).copy()
    for _ in range(substeps):
        innov = dy - (H @ m + gamma) * delta
        m = m + (M @ m + eta) * delta + P @ H.T @ innov
        P = P + (M @ P + P @ M.T + Q - P @ HtH @ P) * delta
        P = 0.5 * (P + P.T)
        if np.any(np.linalg.eigvalsh(P) <= 0):
            raise NumericalError("Kalman covariance lost positive definiteness; increase substeps")
    return KalmanState(m, P)


def kalman_bucy_filter(params: LinearModelParams, obs: ObservationPath, mean0, var0,
                       substeps: int = 100) -> list[KalmanState]:
    d = params.M.shape[0]
    state = KalmanState(np.atleast_1d(np.asarray(mean0, dtype=float)),
                        np.atleast_2d(np.asarray(var0, dtype=float)).reshape(d, d))
    out = [state]
    for n in range(1, obs.times.size):
        state = kalman_bucy_step(state, params, obs.increment(n),
                                 obs.times[n] - obs.times[n - 1], substeps)
        out.append(state)
    return out


# --------------------------------------------------------------------------
# Pointwise Feynman-Kac Monte-Carlo

def reference_points(domain: Box, n: int, mode: str = "uniform") -> np.ndarray:
    """Evaluation points of shape ``(n, d)``: a uniform grid or the first
    ``n`` unscrambled Sobol points mapped onto the box."""
    if mode == "uniform":
        return domain.grid(n)[:, None]
    if mode == "sobol":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            u = qmc.Sobol(domain.dim, scramble=False).random(n)
        return qmc.scale(u, domain.low, domain.high)
    raise ValueError(f"unknown reference sampling mode {mode!r}")


def fk_pointwise_reference(model: FilterModel, psi: Callable[[np.ndarray], np.ndarray],
                           points: np.ndarray, interval: tuple[float, float],
                           paths_per_point: int, seed: int, substeps: int = 10,
                           step: int = 0, chunk_paths: int = 200_000,
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo estimate of ``E[psi(X_t) exp(-int k) | X_0 = x]`` per point.

    Returns ``(values, standard_errors)``.
    """
    if paths_per_point < 100:
        raise ValueError("paths_per_point must be >= 100")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 1 and model.dim_signal == 1 and pts.shape[1] != 1:
        pts = pts.T
    duration = interval[1] - interval[0]
    per_chunk = max(1, chunk_paths // paths_per_point)
    values = np.empty(pts.shape[0])
    errors = np.empty(pts.shape[0])
    for c, lo in enumerate(range(0, pts.shape[0], per_chunk)):
        block = pts[lo : lo + per_chunk]
        starts = np.repeat(block, paths_per_point, axis=0)
        rng = substream(seed, "reference", step, c)
        paths, k_int = euler_maruyama_auxiliary(model, starts, duration, substeps, rng)
        samples = (psi(paths[:, -1]) * np.exp(-k_int)).reshape(block.shape[0], paths_per_point)
        values[lo : lo + block.shape[0]] = samples.mean(axis=1)
        errors[lo : lo + block.shape[0]] = samples.std(axis=1, ddof=1) / math.sqrt(paths_per_point)
    return values, errors


# --------------------------------------------------------------------------
# Grid splitting-up filter

@dataclass(frozen=True)
class GridDensity:
    domain: Box
    nodes: np.ndarray
    values: np.ndarray
    time: float = 0.0

    @property
    def spacing(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    @property
    def mass(self) -> float:
        return trapezoid(self.values, self.spacing)

    def moments(self) -> tuple[float, float, float]:
        return density_moments(self.values, self.spacing, float(self.nodes[0]))

    def on(self, x: np.ndarray) -> np.ndarray:
        """Linear interpolation, zero outside the domain."""
        return np.interp(x, self.nodes, self.values, left=0.0, right=0.0)


def grid_nodes(domain: Box, dx: float) -> np.ndarray:
    n = int(round((domain.high[0] - domain.low[0]) / dx)) + 1
    return np.linspace(domain.low[0], domain.high[0], n)


def stable_substeps(model: FilterModel, nodes: np.ndarray, duration: float,
                    safety: float = 0.9) -> int:
    """Smallest explicit-step count satisfying the diffusion/reaction bound."""
    dx = nodes[1] - nodes[0]
    x = nodes[:, None]
    a = model.a(x)[:, 0, 0]
    r = model.r(x)
    rate = float(np.max(2.0 * a / dx**2 + np.maximum(r, 0.0)))
    return max(1, math.ceil(duration * rate / safety))


def grid_predict(model: FilterModel, density: GridDensity, duration: float,
                 substeps: Optional[int] = None) -> GridDensity:
    """Explicit finite differences for ``q_t = a q'' + b q' + r q`` with zero
    Dirichlet data on the domain boundary (1-d, central differences)."""
    if model.dim_signal != 1:
        raise NotImplementedError("grid solver is 1-d only")
    x = density.nodes
    dx = density.spacing
    xs = x[:, None]
    a = model.a(xs)[:, 0, 0]
    b = model.b(xs)[:, 0]
    r = model.r(xs)
    if np.any(a <= 0):
        raise CFLError("grid solver needs a strictly positive diffusion coefficient")
    peclet = float(np.max(np.abs(b) * dx / (2.0 * a)))
    if peclet > 1.0:
        raise CFLError(f"cell Peclet number {peclet:.3g} > 1; refine the grid spacing")
    needed = stable_substeps(model, x, duration, safety=1.0)
    if substeps is None:
        substeps = stable_substeps(model, x, duration)
    elif substeps < needed:
        raise CFLError(f"{substeps} substeps violate the explicit stability bound; use >= {needed}")
    delta = duration / substeps
    # Interior update coefficients for q[i-1], q[i], q[i+1].
    lo = (a / dx**2 - b / (2 * dx))[1:-1] * delta
    mid = (1.0 - 2.0 * a / dx**2 + r)[1:-1]
    mid = 1.0 + (mid - 1.0) * delta
    hi = (a / dx**2 + b / (2 * dx))[1:-1] * delta
    q = density.values.copy()
    q[0] = q[-1] = 0.0
    for _ in range(substeps):
        inner = lo * q[:-2] + mid * q[1:-1] + hi * q[2:]
        q[1:-1] = inner
    return GridDensity(density.domain, x, q, density.time + duration)


def gaussian_grid(domain: Box, dx: float, mean: float, std: float) -> GridDensity:
    x = grid_nodes(domain, dx)
    v = np.exp(-0.5 * ((x - mean) / std) ** 2)
    v[0] = v[-1] = 0.0
    return GridDensity(domain, x, v / trapezoid(v, x[1] - x[0]))


def grid_splitting_filter(model: FilterModel, domain: Box, obs: ObservationPath,
                          init_mean: float, init_std: float, dx: float,
                          substeps: Optional[int] = None) -> list[GridDensity]:
    """Prediction by finite differences, correction by the exact likelihood.

    Returns the initial density followed by one posterior per observation.
    """
    dens = gaussian_grid(domain, dx, init_mean, init_std)
    out = [dens]
    xs = dens.nodes[:, None]
    for n in range(1, obs.times.size):
        dt = obs.times[n] - obs.times[n - 1]
        prior = grid_predict(model, dens, dt, substeps)
        z = obs.increment(n) / dt
        resid = z[None, :] - model.h(xs)
        lik = np.exp(-0.5 * dt * np.sum(resid * resid, axis=1))
        post = prior.values * lik
        mass = trapezoid(post, prior.spacing)
        if not mass > 0:
            raise NumericalError(f"grid posterior has non-positive mass at step {n}")
        dens = GridDensity(domain, prior.nodes, post / mass, float(obs.times[n]))
        out.append(dens)
    return out
