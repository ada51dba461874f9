"""Euler-Maruyama simulation of the signal/observation pair and of the
auxiliary diffusion, plus the exact Ornstein-Uhlenbeck sampler.

Randomness is drawn from counter-based Philox substreams keyed by
``(root seed, purpose, indices...)`` so every batch can be regenerated
independently of the order in which batches are produced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .domain import Box
from .model import FilterModel, LinearModelParams

# Stable integer tags; changing them changes every generated path.
PURPOSES = {
    "signal": 1,
    "observation": 2,
    "init": 3,
    "train": 4,
    "normalizer": 5,
    "reference": 6,
    "test": 99,
}


def substream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    key = (PURPOSES[purpose],) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray
    substeps: int

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two points")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, dt: float, n_steps: int, substeps: int, t0: float = 0.0) -> "TimeGrid":
        return cls(t0 + dt * np.arange(n_steps + 1), substeps)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def fine(self, n: int) -> np.ndarray:
        """Fine grid inside observation interval ``n`` (1-based)."""
        return np.linspace(self.times[n - 1], self.times[n], self.substeps + 1)


@dataclass(frozen=True)
class ObservationPath:
    times: np.ndarray
    values: np.ndarray          # (N+1, m)
    seed: int
    noise_increments: np.ndarray  # (N, m) accumulated dW per interval

    def increment(self, n: int) -> np.ndarray:
        return self.values[n] - self.values[n - 1]


@dataclass(frozen=True)
class SignalPath:
    times: np.ndarray   # fine times, (N*J+1,)
    values: np.ndarray  # (N*J+1, d)
    substeps: int

    def at_observation_times(self) -> np.ndarray:
        return self.values[:: self.substeps]


@dataclass(frozen=True)
class PathBatch:
    """Auxiliary trajectories started uniformly in the domain.

    ``potential_integrals`` holds the left-endpoint sum of ``k = -r`` along
    each path, so the Feynman-Kac weight is ``exp(-potential_integrals)``.
    """

    starts: np.ndarray         # (N_b, d)
    trajectories: np.ndarray   # (N_b, J+1, d)
    potential_integrals: np.ndarray  # (N_b,)

    @property
    def terminal(self) -> np.ndarray:
        return self.trajectories[:, -1, :]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(-self.potential_integrals)


def _diffusion_increment(model: FilterModel, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
    if model.sigma_const is not None:
        return dw @ model.sigma_const.T
    return np.einsum("nij,nj->ni", model.sigma(x), dw)


def _noise_dim(model: FilterModel, x: np.ndarray) -> int:
    if model.sigma_const is not None:
        return model.sigma_const.shape[1]
    return model.sigma(x[:1]).shape[2]


def simulate_signal_observation(
    model: FilterModel, grid: TimeGrid, x0, seed: int, y0=None,
    substeps: int | None = None,
) -> tuple[SignalPath, ObservationPath]:
    """Euler-Maruyama signal and integrated observations on a fine grid.

    The signal noise V and observation noise W come from separate substreams.
    ``substeps`` overrides the grid's fine resolution for this simulation.
    """
    J = grid.substeps if substeps is None else int(substeps)
    d, m = model.dim_signal, model.dim_obs
    x = np.asarray(x0, dtype=float).reshape(1, d)
    y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float).reshape(m)
    p = _noise_dim(model, x)

    rng_v = substream(seed, "signal")
    rng_w = substream(seed, "observation")

    n_steps = grid.n_steps
    fine_times = [grid.times[:1]]
    xs = [x[0].copy()]
    ys = [y.copy()]
    noise = np.zeros((n_steps, m))
    for n in range(1, n_steps + 1):
        tau = grid.times[n - 1] + (grid.times[n] - grid.times[n - 1]) * np.arange(1, J + 1) / J
        delta = (grid.times[n] - grid.times[n - 1]) / J
        dv = rng_v.standard_normal((J, p)) * np.sqrt(delta)
        dw = rng_w.standard_normal((J, m)) * np.sqrt(delta)
        for j in range(J):
            hx = model.h(x)[0]
            y = y + hx * delta + dw[j]
            x = x + model.f(x) * delta + _diffusion_increment(model, x, dv[j : j + 1])
            xs.append(x[0].copy())
        noise[n - 1] = dw.sum(axis=0)
        ys.append(y.copy())
        fine_times.append(tau)
    signal = SignalPath(np.concatenate(fine_times), np.array(xs), J)
    obs = ObservationPath(grid.times.copy(), np.array(ys), int(seed), noise)
    return signal, obs


def euler_maruyama_auxiliary(
    model: FilterModel, starts: np.ndarray, duration: float, J: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Simulate ``dX = b dt + sigma dW`` from ``starts``; return paths and ``sum k dtau``."""
    n, d = starts.shape
    delta = duration / J
    p = _noise_dim(model, starts)
    dw = rng.standard_normal((J, n, p)) * np.sqrt(delta)
    paths = np.empty((n, J + 1, d))
    paths[:, 0] = starts
    x = starts
    k_int = np.zeros(n)
    for j in range(J):
        k_int -= model.r(x) * delta
        x = x + model.b(x) * delta + _diffusion_increment(model, x, dw[j])
        paths[:, j + 1] = x
    return paths, k_int


def sample_auxiliary_batch(
    model: FilterModel, domain: Box, t_start: float, t_end: float, J: int,
    n_batch: int, seed: int | np.random.Generator,
) -> PathBatch:
    if not t_end > t_start:
        raise ValueError("t_end must exceed t_start")
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "train")
    starts = domain.uniform(rng, n_batch)
    paths, k_int = euler_maruyama_auxiliary(model, starts, t_end - t_start, J, rng)
    return PathBatch(starts, paths, k_int)


def ou_transition(params: LinearModelParams, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact law of the auxiliary OU process ``dX = -(M X + eta) dt + Sigma dW``.

    Returns ``(F, c, Q)`` with ``X_t | X_0 ~ N(F X_0 + c, Q)``. Uses the
    augmented matrix exponential so singular ``M`` is handled.
    """
    M = np.atleast_2d(params.M)
    eta = np.atleast_1d(params.eta)
    S = np.atleast_2d(params.Sigma)
    d = M.shape[0]
    aug = np.zeros((d + 1, d + 1))
    aug[:d, :d] = -M
    aug[:d, d] = -eta
    E = expm(aug * t)
    F, c = E[:d, :d], E[:d, d]
    # Van Loan: Q = int_0^t e^{-M s} S S^T e^{-M^T s} ds
    vl = np.zeros((2 * d, 2 * d))
    vl[:d, :d] = M
    vl[:d, d:] = S @ S.T
    vl[d:, d:] = -M.T
    V = expm(vl * t)
    Q = F @ V[:d, d:]
    Q = 0.5 * (Q + Q.T)
    return F, c, Q


def sample_ou_explicit(
    params: LinearModelParams, starts: np.ndarray, t: float,
    seed: int | np.random.Generator,
) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "test")
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    F, c, Q = ou_transition(params, t)
    mean = starts @ F.T + c
    w, U = np.linalg.eigh(Q)
    root = U * np.sqrt(np.clip(w, 0.0, None))
    return mean + rng.standard_normal(starts.shape) @ root.T
