"""Feynman-Kac regression loss and the per-interval training loop.

The network is fitted to ``psi(X_T) * exp(-sum_j k(X_tau_j) dtau)`` where
``X`` is the auxiliary diffusion started uniformly in the domain and ``psi``
is the previous posterior. The minimiser of the mean squared residual is the
prediction-step density.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .diagnostics import l2_grid_error
from .domain import Box
from .model import FilterModel
from .nn import (
    ForwardCache, NetworkArchitecture, NetworkParams, NeuralDensity, backward,
    commit_running, forward, initialize,
)
from .optim import AdamState, LrSchedule, adam_step, lr_at
from .sde import PathBatch, sample_auxiliary_batch, substream

Density = Callable[[np.ndarray], np.ndarray]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    arch: NetworkArchitecture = NetworkArchitecture()
    epochs: int = 6002
    batch_size: int = 600
    substeps: int = 10
    penalty: float = 1.0
    # "intent" penalises negative outputs; "paper_literal" is lambda * sum max(0, NN).
    penalty_sign: str = "intent"
    schedule: LrSchedule = LrSchedule()
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 200

    def __post_init__(self):
        if self.penalty_sign not in ("intent", "paper_literal"):
            raise ValueError(f"unknown penalty_sign {self.penalty_sign!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


@dataclass
class LossResult:
    value: float
    grads: dict[str, np.ndarray]
    outputs: np.ndarray
    targets: np.ndarray
    cache: ForwardCache


def regression_targets(batch: PathBatch, psi: Density) -> np.ndarray:
    y = psi(batch.terminal) * batch.weights
    bad = np.flatnonzero(~np.isfinite(y))
    if bad.size:
        raise TrainingError(f"non-finite regression target at sample {int(bad[0])}")
    return y


def batch_loss(params: NetworkParams, arch: NetworkArchitecture, batch: PathBatch,
               psi: Density, lam: float = 0.0, penalty_sign: str = "intent",
               targets: Optional[np.ndarray] = None) -> LossResult:
    """Mean squared Feynman-Kac residual plus the positivity penalty."""
    y = regression_targets(batch, psi) if targets is None else targets
    out, cache = forward(params, arch, batch.starts, "train")
    nn_out = out[:, 0]
    n = nn_out.size
    res = nn_out - y
    value = float(np.mean(res * res))
    dout = (2.0 / n) * res
    if lam:
        if penalty_sign == "intent":
            neg = nn_out < 0
            value += lam * float(np.mean(np.where(neg, -nn_out, 0.0)))
            dout = dout - (lam / n) * neg
        else:
            pos = nn_out > 0
            value += lam * float(np.sum(np.where(pos, nn_out, 0.0)))
            dout = dout + lam * pos
    grads = backward(params, arch, cache, dout[:, None])
    return LossResult(value, grads, nn_out, y, cache)


@dataclass
class TrainingReport:
    losses: np.ndarray
    lrs: np.ndarray
    checkpoint_epochs: list[int] = field(default_factory=list)
    checkpoint_l2: list[float] = field(default_factory=list)
    final_params: Optional[NetworkParams] = None
    wall_clock: float = 0.0
    seed: int = 0

    @property
    def final_l2(self) -> Optional[float]:
        return self.checkpoint_l2[-1] if self.checkpoint_l2 else None

    def to_csv(self, path: str | Path) -> None:
        l2 = dict(zip(self.checkpoint_epochs, self.checkpoint_l2))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "lr", "l2_ref"])
            for e, (loss, lr) in enumerate(zip(self.losses, self.lrs), start=1):
                w.writerow([e, repr(float(loss)), repr(float(lr)),
                            repr(l2[e]) if e in l2 else ""])


@dataclass(frozen=True)
class ReferenceGrid:
    """Reference prior values on a uniform grid, for L2 monitoring."""

    points: np.ndarray
    values: np.ndarray

    @property
    def spacing(self) -> float:
        return float(self.points[1] - self.points[0])


def train_network(model: FilterModel, domain: Box, interval: tuple[float, float],
                  psi: Density, hyper: TrainingConfig, seed: int, step: int = 1,
                  reference: Optional[ReferenceGrid] = None) -> tuple[NeuralDensity, TrainingReport]:
    """Fit a fresh network to the prediction density on ``interval``.

    A new batch of auxiliary paths is drawn every epoch from the substream
    ``(seed, "train", step, epoch)``; initialisation uses ``(seed, "init", step)``.
    """
    arch = hyper.arch
    t0, t1 = interval
    params = initialize(arch, substream(seed, "init", step))
    # One flat parameter vector: the optimiser then costs a handful of array ops.
    keys = list(params.weights)
    shapes = [params.weights[k].shape for k in keys]
    splits = np.cumsum([int(np.prod(s)) for s in shapes])[:-1]
    theta = np.concatenate([params.weights[k].ravel() for k in keys])

    def unflatten(vec):
        return {k: part.reshape(shp) for k, part, shp in zip(keys, np.split(vec, splits), shapes)}

    params = NetworkParams(unflatten(theta), params.running)
    state = AdamState(beta1=hyper.adam_beta1, beta2=hyper.adam_beta2, eps=hyper.adam_eps)
    losses = np.empty(hyper.epochs)
    lrs = np.empty(hyper.epochs)
    report = TrainingReport(losses, lrs, seed=seed)
    started = time.perf_counter()

    for epoch in range(1, hyper.epochs + 1):
        rng = substream(seed, "train", step, epoch)
        batch = sample_auxiliary_batch(model, domain, t0, t1, hyper.substeps, hyper.batch_size, rng)
        try:
            res = batch_loss(params, arch, batch, psi, hyper.penalty, hyper.penalty_sign)
        except TrainingError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}") from exc
        if not np.isfinite(res.value):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        lr = lr_at(hyper.schedule, epoch)
        try:
            state, new = adam_step(state, {"theta": theta},
                                   {"theta": np.concatenate([res.grads[k].ravel() for k in keys])}, lr)
        except FloatingPointError as exc:
            bad = [k for k in keys if not np.all(np.isfinite(res.grads[k]))]
            raise TrainingError(f"epoch {epoch}: non-finite gradient in {bad}") from exc
        theta = new["theta"]
        params = NetworkParams(unflatten(theta), dict(params.running))
        commit_running(params, res.cache)
        losses[epoch - 1] = res.value
        lrs[epoch - 1] = lr

        if reference is not None and (epoch % hyper.checkpoint_every == 0 or epoch == hyper.epochs):
            nd = NeuralDensity(params, arch, domain)
            report.checkpoint_epochs.append(epoch)
            report.checkpoint_l2.append(
                l2_grid_error(nd(reference.points[:, None]), reference.values, reference.spacing))

    report.final_params = params
    report.wall_clock = time.perf_counter() - started
    return NeuralDensity(params, arch, domain), report
