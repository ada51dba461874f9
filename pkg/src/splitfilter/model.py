"""Filtering problems: signal/observation coefficients and the derived
auxiliary-diffusion drift and potential.

All coefficient callables are vectorised over a leading batch axis: ``x`` has
shape ``(n, d)`` and e.g. ``f(x)`` returns ``(n, d)``, ``sigma(x)`` returns
``(n, d, p)``, ``h(x)`` returns ``(n, m)`` and ``r(x)`` returns ``(n,)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray


class ConfigurationError(ValueError):
    """Raised for inconsistent model or experiment settings."""


@dataclass(frozen=True)
class LinearModelParams:
    """Linear signal ``dX = (M X + eta) dt + Sigma dV``, sensor ``h = H x + gamma``."""

    M: Array
    eta: Array
    Sigma: Array
    H: Array
    gamma: Array

    @classmethod
    def scalar(cls, M, eta, Sigma, H, gamma) -> "LinearModelParams":
        return cls(
            M=np.array([[M]], dtype=float),
            eta=np.array([eta], dtype=float),
            Sigma=np.array([[Sigma]], dtype=float),
            H=np.array([[H]], dtype=float),
            gamma=np.array([gamma], dtype=float),
        )


@dataclass(frozen=True)
class BenesModelParams:
    alpha: float
    beta: float
    sigma: float
    h1: float
    h2: float


@dataclass(frozen=True)
class FilterModel:
    """Coefficient bundle of one filtering problem.

    ``b`` and ``r`` are the drift and zero-order potential of the auxiliary
    diffusion whose Feynman-Kac average solves the prediction PDE:
    ``b = 2 vecdiv(a) - f`` and ``r = div(vecdiv(a) - f)``.
    """

    dim_signal: int
    dim_obs: int
    f: Callable[[Array], Array]
    sigma: Callable[[Array], Array]
    a: Callable[[Array], Array]
    h: Callable[[Array], Array]
    b: Callable[[Array], Array]
    r: Callable[[Array], Array]
    # Constant dispersion matrix, when the family has one (fast paths).
    sigma_const: Optional[Array] = None
    # (H, gamma) when the sensor is affine.
    sensor_affine: Optional[tuple[Array, Array]] = None
    linear_params: Optional[LinearModelParams] = field(default=None, compare=False)
    benes_params: Optional[BenesModelParams] = field(default=None, compare=False)

    @property
    def kind(self) -> str:
        if self.linear_params is not None:
            return "linear"
        if self.benes_params is not None:
            return "benes"
        return "generic"


def _const_sigma_fns(Sigma: Array):
    Sigma = np.array(Sigma, dtype=float)
    a_mat = 0.5 * Sigma @ Sigma.T

    def sigma(x):
        return np.broadcast_to(Sigma, (x.shape[0],) + Sigma.shape)

    def a(x):
        return np.broadcast_to(a_mat, (x.shape[0],) + a_mat.shape)

    return sigma, a


def make_linear_model(params: LinearModelParams) -> FilterModel:
    M = np.atleast_2d(np.asarray(params.M, dtype=float))
    eta = np.atleast_1d(np.asarray(params.eta, dtype=float))
    Sigma = np.atleast_2d(np.asarray(params.Sigma, dtype=float))
    H = np.atleast_2d(np.asarray(params.H, dtype=float))
    gamma = np.atleast_1d(np.asarray(params.gamma, dtype=float))

    d = M.shape[0]
    if M.shape != (d, d):
        raise ConfigurationError(f"M must be square, got shape {M.shape}")
    if eta.shape != (d,):
        raise ConfigurationError(f"eta must have shape ({d},), got {eta.shape}")
    if Sigma.shape[0] != d:
        raise ConfigurationError(f"Sigma must have {d} rows, got shape {Sigma.shape}")
    m = H.shape[0]
    if H.shape != (m, d):
        raise ConfigurationError(f"H must have shape (m, {d}), got {H.shape}")
    if gamma.shape != (m,):
        raise ConfigurationError(f"gamma must have shape ({m},), got {gamma.shape}")

    trace_m = float(np.trace(M))
    sigma, a = _const_sigma_fns(Sigma)

    def f(x):
        return x @ M.T + eta

    def b(x):
        return -(x @ M.T + eta)

    def r(x):
        return np.full(x.shape[0], -trace_m)

    def h(x):
        return x @ H.T + gamma

    clean = LinearModelParams(M=M, eta=eta, Sigma=Sigma, H=H, gamma=gamma)
    return FilterModel(
        dim_signal=d, dim_obs=m, f=f, sigma=sigma, a=a, h=h, b=b, r=r,
        sigma_const=Sigma, sensor_affine=(H, gamma), linear_params=clean,
    )


def make_benes_model(params: BenesModelParams) -> FilterModel:
    alpha, beta, s = float(params.alpha), float(params.beta), float(params.sigma)
    h1, h2 = float(params.h1), float(params.h2)
    if s == 0.0:
        raise ConfigurationError("Benes model requires sigma != 0")

    sigma, a = _const_sigma_fns(np.array([[s]]))

    def f(x):
        return alpha * s * np.tanh(beta + alpha * x / s)

    def b(x):
        return -f(x)

    def r(x):
        return -(alpha / np.cosh(beta + alpha * x[:, 0] / s)) ** 2

    def h(x):
        return h1 * x + h2

    return FilterModel(
        dim_signal=1, dim_obs=1, f=f, sigma=sigma, a=a, h=h, b=b, r=r,
        sigma_const=np.array([[s]]),
        sensor_affine=(np.array([[h1]]), np.array([h2])),
        benes_params=params,
    )
