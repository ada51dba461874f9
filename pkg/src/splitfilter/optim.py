"""ADAM and the piecewise-constant learning-rate schedule."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LrSchedule:
    """``lr(n) = rates[i]`` for ``cutoffs[i] <= n < cutoffs[i+1]``.

    The first cutoff must be 0; the last interval extends to infinity.
    """

    cutoffs: tuple[int, ...] = (0, 2000, 4000)
    rates: tuple[float, ...] = (1e-2, 1e-3, 1e-4)

    def __post_init__(self):
        cut = tuple(int(c) for c in self.cutoffs)
        rates = tuple(float(r) for r in self.rates)
        object.__setattr__(self, "cutoffs", cut)
        object.__setattr__(self, "rates", rates)
        if len(cut) != len(rates) or not cut:
            raise ValueError("cutoffs and rates must have equal, non-zero length")
        if cut[0] != 0:
            raise ValueError("first cutoff must be 0")
        if any(b <= a for a, b in zip(cut, cut[1:])):
            raise ValueError("cutoffs must be strictly increasing")
        if any(r <= 0 for r in rates):
            raise ValueError("learning rates must be positive")

    @classmethod
    def constant(cls, rate: float) -> "LrSchedule":
        return cls((0,), (rate,))


def lr_at(schedule: LrSchedule, n: int) -> float:
    return schedule.rates[bisect.bisect_right(schedule.cutoffs, n) - 1]


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              lr: float) -> tuple[AdamState, dict[str, np.ndarray]]:
    """One bias-corrected ADAM update; returns new state and new parameters."""
    if set(grads) != set(params):
        raise ValueError(f"gradient blocks {sorted(grads)} do not match parameters {sorted(params)}")
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    m_new, v_new, p_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        m_new[name], v_new[name] = m, v
        p_new[name] = p - lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return AdamState(m_new, v_new, t, b1, b2, state.eps), p_new
