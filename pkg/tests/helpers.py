"""Test-only utilities shared by several test modules."""

from __future__ import annotations

import numpy as np

from splitfilter.model import FilterModel


def finite_difference_model(f, sigma, h, dim_signal: int, dim_obs: int, step: float = 1e-5) -> FilterModel:
    """Generic model whose ``b`` and ``r`` come from central differences.

    ``b = 2 vecdiv(a) - f`` and ``r = div(vecdiv(a) - f)`` with
    ``a = sigma sigma^T / 2`` and ``vecdiv(a)_i = sum_j d a_ij / d x_j``.
    """
    d = dim_signal

    def a(x):
        s = sigma(x)
        return 0.5 * np.einsum("nik,njk->nij", s, s)

    def vecdiv_a(x):
        out = np.zeros((x.shape[0], d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = step
            out += (a(x + e)[:, :, j] - a(x - e)[:, :, j]) / (2 * step)
        return out

    def b(x):
        return 2.0 * vecdiv_a(x) - f(x)

    def r(x):
        g = lambda z: vecdiv_a(z) - f(z)
        out = np.zeros(x.shape[0])
        for j in range(d):
            e = np.zeros(d)
            e[j] = step
            out += (g(x + e)[:, j] - g(x - e)[:, j]) / (2 * step)
        return out

    return FilterModel(dim_signal=d, dim_obs=dim_obs, f=f, sigma=sigma, a=a, h=h, b=b, r=r)


def fd_divergence(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    d = x.shape[1]
    out = np.zeros(x.shape[0])
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        out += (f(x + e)[:, j] - f(x - e)[:, j]) / (2 * step)
    return out


def gradient_check(arch, params, x, G, step: float = 1e-5, five_point: bool = False):
    """Max relative error between ``backward`` and central differences of
    ``sum(forward(x) * G)`` over every trainable entry.

    The relative error uses ``max(|analytic|, |fd|, tau)`` in the denominator
    with ``tau = 1e-6 * max(1, max |analytic|)``, so entries whose true
    gradient is structurally zero (biases feeding a batch norm) compare on an
    absolute scale instead of dividing round-off by round-off.
    """
    from splitfilter.nn import backward, forward

    def loss(p):
        return float(np.sum(forward(p, arch, x, "train")[0] * G))

    out, cache = forward(params, arch, x, "train")
    grads = backward(params, arch, cache, G)
    analytic, numeric, names = [], [], []
    for key, value in params.weights.items():
        for idx in np.ndindex(value.shape):
            def shifted(k):
                q = params.copy()
                q.weights[key][idx] += k * step
                return loss(q)

            if five_point:
                fd = (-shifted(2) + 8 * shifted(1) - 8 * shifted(-1) + shifted(-2)) / (12 * step)
            else:
                fd = (shifted(1) - shifted(-1)) / (2 * step)
            analytic.append(grads[key][idx])
            numeric.append(fd)
            names.append(f"{key}{list(idx)}")
    analytic = np.array(analytic)
    numeric = np.array(numeric)
    tau = 1e-6 * max(1.0, float(np.abs(analytic).max()))
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), tau)
    worst = int(np.argmax(rel))
    return float(rel[worst]), names[worst]
