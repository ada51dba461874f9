"""Sequential splitting-up filter with neural prediction densities.

Each observation interval: train a fresh network on the Feynman-Kac
representation of the prediction PDE (initial condition = previous
posterior), weight it by the Gaussian-shaped likelihood of the scaled
observation increment, and normalise with a Monte-Carlo estimate drawn from
that likelihood.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import ExperimentConfig
from .diagnostics import StepDiagnostics, density_moments, trapezoid
from .domain import Box
from .model import FilterModel
from .nn import NeuralDensity
from .reference import (
    GridDensity, KalmanState, fk_pointwise_reference, grid_splitting_filter,
    kalman_bucy_filter, reference_points,
)
from .sde import ObservationPath, SignalPath, TimeGrid, simulate_signal_observation, substream
from .training import ReferenceGrid, TrainingReport, train_network

log = logging.getLogger(__name__)


class UnsupportedSensorError(ValueError):
    pass


class DegeneratePosteriorError(RuntimeError):
    pass


class FilterAborted(RuntimeError):
    """Raised when a step violates the error policy; carries partial results."""

    def __init__(self, message: str, result: "FilterResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class Likelihood:
    """``xi(z) = exp(-dt/2 * |z_n - h(z)|^2)`` for one observation interval."""

    z: np.ndarray
    dt: float
    h: Callable[[np.ndarray], np.ndarray]
    affine: Optional[tuple[np.ndarray, np.ndarray]] = None

    @classmethod
    def from_increment(cls, model: FilterModel, dY, dt: float) -> "Likelihood":
        z = np.atleast_1d(np.asarray(dY, dtype=float)) / dt
        return cls(z, float(dt), model.h, model.sensor_affine)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        resid = self.z[None, :] - self.h(x)
        return np.exp(-0.5 * self.dt * np.sum(resid * resid, axis=1))


@dataclass(frozen=True)
class GaussianSampler:
    mean: float
    std: float

    @property
    def prefactor(self) -> float:
        """``integral of xi`` over the real line, i.e. ``sqrt(2 pi) * std``."""
        return math.sqrt(2.0 * math.pi) * self.std

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((n, 1))


def likelihood_sampler(lik: Likelihood) -> GaussianSampler:
    """Normal law proportional to the likelihood of an affine 1-d sensor."""
    if lik.affine is None:
        raise UnsupportedSensorError("Monte-Carlo normalisation needs an affine sensor")
    H, gamma = lik.affine
    if H.shape != (1, 1):
        raise UnsupportedSensorError("Monte-Carlo normalisation is implemented for d = m = 1")
    h1, h2 = float(H[0, 0]), float(gamma[0])
    if h1 == 0.0:
        raise UnsupportedSensorError("sensor slope h1 = 0 carries no information")
    return GaussianSampler((float(lik.z[0]) - h2) / h1, 1.0 / math.sqrt(lik.dt * h1 * h1))


def estimate_normalizer(prior: Callable[[np.ndarray], np.ndarray], lik: Likelihood,
                        n_samples: int, seed, domain: Optional[Box] = None,
                        mode: str = "prefactor") -> tuple[float, float]:
    """Monte-Carlo ``C_n = integral xi * prior`` and the in-domain fraction.

    ``mode="paper_literal"`` drops the ``sqrt(2 pi) * std`` factor, giving the
    plain sample mean of the prior.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    sampler = likelihood_sampler(lik)
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "normalizer")
    z = sampler.sample(rng, n_samples)
    if domain is None:
        domain = getattr(prior, "domain", None)
    acceptance = 1.0 if domain is None else float(np.mean(domain.contains(z)))
    mean_val = float(np.mean(prior(z)))
    c = mean_val * (sampler.prefactor if mode == "prefactor" else 1.0)
    if not c > 0:
        raise DegeneratePosteriorError(
            f"normalisation constant {c:.3g} <= 0 (acceptance rate {acceptance:.3f})")
    return c, acceptance


def quadrature_normalizer(prior: Callable[[np.ndarray], np.ndarray], lik: Likelihood,
                          domain: Box, n_points: int = 100_001) -> float:
    x = domain.grid(n_points)
    return trapezoid(lik(x[:, None]) * prior(x[:, None]), x[1] - x[0])


@dataclass(frozen=True)
class Posterior:
    prior: Callable[[np.ndarray], np.ndarray]
    likelihood: Likelihood
    normalizer: float
    domain: Box
    acceptance_rate: float = 1.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return self.likelihood(x) * self.prior(x) / self.normalizer


@dataclass(frozen=True)
class GaussianDensity:
    """Initial condition: Gaussian density truncated to the domain."""

    mean: float
    std: float
    domain: Box

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        v = np.exp(-0.5 * ((x[:, 0] - self.mean) / self.std) ** 2) / (self.std * math.sqrt(2 * math.pi))
        return np.where(self.domain.contains(x), v, 0.0)


@dataclass
class StepResult:
    posterior: Posterior
    diagnostics: StepDiagnostics
    report: TrainingReport
    reference: Optional[ReferenceGrid]
    grid: np.ndarray
    prior_values: np.ndarray
    posterior_values: np.ndarray


@dataclass
class FilterResult:
    config: ExperimentConfig
    signal: SignalPath
    observation: ObservationPath
    steps: list[StepResult] = field(default_factory=list)
    kalman: Optional[list[KalmanState]] = None
    grid_oracle: Optional[list[GridDensity]] = None
    error: Optional[str] = None

    @property
    def diagnostics(self) -> list[StepDiagnostics]:
        return [s.diagnostics for s in self.steps]


def simulate(config: ExperimentConfig) -> tuple[SignalPath, ObservationPath]:
    model = config.build_model()
    grid = TimeGrid.uniform(config.dt, config.steps, config.substeps)
    return simulate_signal_observation(model, grid, [config.x0], config.seed, y0=[config.y0],
                                       substeps=config.obs_substeps)


def exact_solution(config: ExperimentConfig, obs: ObservationPath):
    """Kalman-Bucy states (linear) or grid-filter densities (Benes)."""
    model = config.build_model()
    if config.model == "linear":
        return kalman_bucy_filter(config.linear_params(), obs, config.init_mean,
                                  config.init_std ** 2, config.kalman_substeps), None
    return None, grid_splitting_filter(model, config.domain, obs, config.init_mean,
                                       config.init_std, config.oracle_dx)


def run_filter(config: ExperimentConfig, observation: Optional[ObservationPath] = None,
               signal: Optional[SignalPath] = None,
               on_step: Optional[Callable[[StepResult], None]] = None) -> FilterResult:
    """Run every observation step; raise :class:`FilterAborted` per the error policy."""
    model = config.build_model()
    domain = config.domain
    hyper = config.training()
    if observation is None:
        signal, observation = simulate(config)
    kalman, grid_oracle = exact_solution(config, observation)
    result = FilterResult(config, signal, observation, kalman=kalman, grid_oracle=grid_oracle)

    export_x = domain.grid(config.export_points)
    spacing = float(export_x[1] - export_x[0])
    ref_x = reference_points(domain, config.reference_points, config.reference_sampling)
    signal_at_obs = signal.at_observation_times()[:, 0] if signal is not None else None

    psi: Callable[[np.ndarray], np.ndarray] = GaussianDensity(config.init_mean, config.init_std, domain)
    for n in range(1, observation.times.size):
        t0, t1 = float(observation.times[n - 1]), float(observation.times[n])
        reference = None
        ref_mass = None
        if config.reference_paths > 0:
            vals, _ = fk_pointwise_reference(model, psi, ref_x, (t0, t1), config.reference_paths,
                                             config.seed, config.substeps, step=n)
            if config.reference_sampling == "uniform":
                reference = ReferenceGrid(ref_x[:, 0], vals)
                ref_mass = trapezoid(vals, reference.spacing)
        prior, report = train_network(model, domain, (t0, t1), psi, hyper, config.seed, n, reference)

        dY = observation.increment(n)
        lik = Likelihood.from_increment(model, dY, t1 - t0)
        try:
            if model.sensor_affine is not None and model.dim_signal == 1:
                c_n, acc = estimate_normalizer(prior, lik, config.normalizer_samples,
                                               substream(config.seed, "normalizer", n), domain,
                                               config.normalizer_mode)
            else:
                log.warning("non-affine sensor: normalising by quadrature")
                c_n, acc = quadrature_normalizer(prior, lik, domain), 1.0
                if not c_n > 0:
                    raise DegeneratePosteriorError(f"normalisation constant {c_n:.3g} <= 0")
        except DegeneratePosteriorError as exc:
            result.error = f"step {n}: {exc}"
            raise FilterAborted(result.error, result) from exc

        post = Posterior(prior, lik, c_n, domain, acc)
        prior_vals = prior(export_x[:, None])
        post_vals = post(export_x[:, None])
        prior_mass = trapezoid(prior_vals, spacing)
        try:
            mass, mean, std = density_moments(post_vals, spacing, float(export_x[0]))
        except ValueError:
            mass, mean, std = trapezoid(post_vals, spacing), math.nan, math.nan

        exact_mean = exact_std = None
        if kalman is not None:
            exact_mean, exact_std = float(kalman[n].mean[0]), float(kalman[n].std[0])
        elif grid_oracle is not None:
            _, exact_mean, exact_std = grid_oracle[n].moments()
        diag = StepDiagnostics(
            step=n, time=t1, posterior_mass=mass, posterior_mean=mean, posterior_std=std,
            exact_mean=exact_mean, exact_std=exact_std,
            abs_mean_error=None if exact_mean is None else abs(mean - exact_mean),
            prior_mass=prior_mass, mc_acceptance_rate=acc, normalizer=c_n,
            l2_vs_reference=report.final_l2, reference_mass=ref_mass,
            observation_increment=float(dY[0]),
            signal=math.nan if signal_at_obs is None else float(signal_at_obs[n]),
            flagged=acc < config.flag_acceptance,
        )
        step = StepResult(post, diag, report, reference, export_x, prior_vals, post_vals)
        result.steps.append(step)
        if on_step is not None:
            on_step(step)
        log.info("step %d t=%.3f mean=%.4f exact=%s acc=%.3f prior_mass=%.3f",
                 n, t1, mean, exact_mean, acc, prior_mass)

        if acc < config.min_acceptance:
            msg = f"step {n}: acceptance rate {acc:.3f} below {config.min_acceptance}"
            if config.on_error == "abort":
                result.error = msg
                raise FilterAborted(msg, result)
            log.warning("%s; continuing (on_error=continue)", msg)
        psi = post
    return result
