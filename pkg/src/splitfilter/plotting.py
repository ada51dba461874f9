"""Figure helpers for run directories.

matplotlib is imported lazily (Agg backend) so the numerical core never
depends on it.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def figure_size(width: float = 7.0, height: Optional[float] = None) -> tuple[float, float]:
    """Width in inches, height from the golden ratio unless given."""
    if height is None:
        height = width * (math.sqrt(5) - 1.0) / 2.0
    return width, height


def _tidy(ax):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)


def evolution_heatstrip(times: np.ndarray, x: np.ndarray, densities: np.ndarray,
                        path: str | Path, signal: Optional[np.ndarray] = None,
                        exact_mean: Optional[np.ndarray] = None,
                        exact_std: Optional[np.ndarray] = None, title: str = "") -> Path:
    """Posterior densities as a time-space colour map.

    Parameters
    ----------
    times : (n,) observation times of the rows of ``densities``.
    x : (m,) spatial grid.
    densities : (n, m) posterior values.
    signal, exact_mean, exact_std : optional (n,) overlays.
    """
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=figure_size(8.0, 4.0))
    dt = times[1] - times[0] if times.size > 1 else 1.0
    t_edges = np.concatenate([times - dt / 2, [times[-1] + dt / 2]])
    dx = x[1] - x[0]
    x_edges = np.concatenate([x - dx / 2, [x[-1] + dx / 2]])
    mesh = ax.pcolormesh(t_edges, x_edges, np.asarray(densities).T, shading="flat", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="density")
    if signal is not None:
        ax.plot(times, signal, "w.", ms=3, label="signal")
    if exact_mean is not None:
        ax.plot(times, exact_mean, "r-", lw=1, label="exact mean")
        if exact_std is not None:
            ax.plot(times, exact_mean + exact_std, "r--", lw=0.8)
            ax.plot(times, exact_mean - exact_std, "r--", lw=0.8, label="exact mean ± std")
    ax.set_xlabel("t")
    ax.set_ylabel("x")
    if title:
        ax.set_title(title)
    if signal is not None or exact_mean is not None:
        ax.legend(loc="upper right", fontsize=7)
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def step_snapshot(x: np.ndarray, prior: np.ndarray, posterior: np.ndarray,
                  path: str | Path, reference: Optional[tuple[np.ndarray, np.ndarray]] = None,
                  exact: Optional[np.ndarray] = None, signal: Optional[float] = None,
                  title: str = "") -> Path:
    """Prior network, posterior and (optionally) reference curves for one step."""
    plt = _pyplot()
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=figure_size(9.0, 3.5))
    ax0.plot(x, prior, label="network prior")
    if reference is not None:
        ax0.plot(reference[0], reference[1], ".", ms=3, label="Monte-Carlo prior")
    ax0.set_title("prediction")
    ax1.plot(x, posterior, label="posterior")
    if exact is not None:
        ax1.plot(x, exact, "--", label="exact")
    if signal is not None and np.isfinite(signal):
        for ax in (ax0, ax1):
            ax.axvline(signal, color="k", lw=0.7, ls=":")
    ax1.set_title("correction")
    for ax in (ax0, ax1):
        ax.set_xlabel("x")
        ax.legend(fontsize=7)
        _tidy(ax)
    if title:
        fig.suptitle(title)
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def diagnostics_panel(rows: Sequence, path: str | Path, title: str = "") -> Path:
    """Four panels: mean error, L2 error of the prior, prior mass, acceptance rate."""
    plt = _pyplot()
    t = np.array([r.time for r in rows])

    def col(name):
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in rows],
                        dtype=float)

    fig, axes = plt.subplots(2, 2, figsize=figure_size(9.0, 6.0), sharex=True)
    panels = [
        ("abs_mean_error", "(a) absolute error in mean"),
        ("l2_vs_reference", "(b) $L_2$ error of prior"),
        ("prior_mass", "(c) prior mass"),
        ("mc_acceptance_rate", "(d) acceptance rate"),
    ]
    for ax, (name, label) in zip(axes.flat, panels):
        ax.plot(t, col(name), "o-", ms=3)
        ax.set_title(label, fontsize=9)
        _tidy(ax)
    axes[1, 0].axhline(1.0, color="k", lw=0.6, ls=":")
    for ax in axes[1]:
        ax.set_xlabel("t")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path
