"""Fully connected tanh network with batch normalisation and hand-written
reverse-mode gradients.

Layer stack (default ``1-51-51-1``)::

    BN -> [Dense -> BN -> tanh] * len(hidden_widths) -> Dense -> BN

The leading and trailing batch-norm layers can be switched off through
:class:`NetworkArchitecture`. Inputs and outputs are ``(batch, features)``;
the layers work on the transposed, feature-major layout internally.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Literal

import numpy as np

from .domain import Box

Mode = Literal["train", "inference"]


@dataclass(frozen=True)
class NetworkArchitecture:
    input_dim: int = 1
    hidden_widths: tuple[int, ...] = (51, 51)
    output_dim: int = 1
    input_bn: bool = True
    final_bn: bool = True
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValueError("layer widths must be positive")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.hidden_widths + (self.output_dim,)

    def ops(self) -> list[tuple[str, str | None, int]]:
        """Sequence of ``(kind, param_prefix, width)``."""
        out: list[tuple[str, str | None, int]] = []
        if self.input_bn:
            out.append(("bn", "bn0", self.input_dim))
        for i, w in enumerate(self.hidden_widths, start=1):
            out += [("dense", f"dense{i}", w), ("bn", f"bn{i}", w), ("tanh", None, w)]
        last = len(self.hidden_widths) + 1
        out.append(("dense", f"dense{last}", self.output_dim))
        if self.final_bn:
            out.append(("bn", f"bn{last}", self.output_dim))
        return out


@dataclass
class NetworkParams:
    """Trainable tensors plus batch-norm running statistics.

    ``weights`` keys: ``denseK.W`` (in x out), ``denseK.b``, ``bnK.gamma``,
    ``bnK.beta``. ``running`` keys: ``bnK.mean``, ``bnK.var``.
    """

    weights: dict[str, np.ndarray]
    running: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.running.items()},
        )


@dataclass
class ForwardCache:
    mode: str
    layers: list
    running_update: dict[str, np.ndarray]


def initialize(arch: NetworkArchitecture, seed) -> NetworkParams:
    """Glorot-uniform weights, zero biases, identity batch-norm."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}
    prev = arch.input_dim
    for kind, name, width in arch.ops():
        if kind == "dense":
            bound = np.sqrt(6.0 / (prev + width))
            weights[f"{name}.W"] = rng.uniform(-bound, bound, size=(prev, width))
            weights[f"{name}.b"] = np.zeros(width)
            prev = width
        elif kind == "bn":
            weights[f"{name}.gamma"] = np.ones(width)
            weights[f"{name}.beta"] = np.zeros(width)
            running[f"{name}.mean"] = np.zeros(width)
            running[f"{name}.var"] = np.ones(width)
    return NetworkParams(weights, running)


def forward(params: NetworkParams, arch: NetworkArchitecture, inputs: np.ndarray,
            mode: Mode = "train") -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on a batch of shape ``(n, input_dim)``.

    In train mode the batch statistics are used and the exponential moving
    averages they imply are returned in ``cache.running_update``; call
    :func:`commit_running` to store them.
    """
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, arch.input_dim)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    if mode == "train" and x.shape[0] < 2:
        raise ValueError("train-mode forward needs a batch of at least 2 points")
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")

    # Internally feature-major, (features, batch): batch reductions run
    # along contiguous rows.
    x = np.ascontiguousarray(x.T)
    n = x.shape[1]
    W = params.weights
    mom, eps = arch.bn_momentum, arch.bn_epsilon
    layers = []
    update: dict[str, np.ndarray] = {}
    for kind, name, _ in arch.ops():
        if kind == "dense":
            layers.append(x)
            x = W[f"{name}.W"].T @ x
            x += W[f"{name}.b"][:, None]
        elif kind == "bn":
            if mode == "train":
                mu = x.mean(axis=1)
                xc = x - mu[:, None]
                var = np.einsum("ij,ij->i", xc, xc) / n
                rm, rv = params.running[f"{name}.mean"], params.running[f"{name}.var"]
                update[f"{name}.mean"] = mom * rm + (1.0 - mom) * mu
                update[f"{name}.var"] = mom * rv + (1.0 - mom) * var
            else:
                xc = x - params.running[f"{name}.mean"][:, None]
                var = params.running[f"{name}.var"]
            inv = 1.0 / np.sqrt(var + eps)
            xc *= inv[:, None]
            layers.append((xc, inv))
            x = xc * W[f"{name}.gamma"][:, None]
            x += W[f"{name}.beta"][:, None]
        else:
            np.tanh(x, out=x)
            layers.append(x)
    return x.T, ForwardCache(mode, layers, update)


def commit_running(params: NetworkParams, cache: ForwardCache) -> None:
    params.running.update(cache.running_update)


def backward(params: NetworkParams, arch: NetworkArchitecture, cache: ForwardCache,
             output_gradients: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(outputs * output_gradients)`` w.r.t. every weight.

    Train-mode caches propagate through the batch mean and variance.
    """
    g = np.ascontiguousarray(np.asarray(output_gradients, dtype=float).reshape(-1, arch.output_dim).T)
    W = params.weights
    grads: dict[str, np.ndarray] = {}
    train = cache.mode == "train"
    n = g.shape[1]
    for (kind, name, _), saved in zip(reversed(arch.ops()), reversed(cache.layers)):
        if kind == "dense":
            grads[f"{name}.W"] = saved @ g.T
            grads[f"{name}.b"] = g.sum(axis=1)
            g = W[f"{name}.W"] @ g
        elif kind == "bn":
            xhat, inv = saved
            gamma = W[f"{name}.gamma"]
            dgamma = np.einsum("ij,ij->i", g, xhat)
            dbeta = g.sum(axis=1)
            grads[f"{name}.gamma"] = dgamma
            grads[f"{name}.beta"] = dbeta
            scale = gamma * inv
            if train:
                # d/dx of gamma * (x - mean) / std through the batch statistics
                out = xhat * (scale * dgamma / n)[:, None]
                np.subtract(g * scale[:, None], out, out=out)
                out -= (scale * dbeta / n)[:, None]
                g = out
            else:
                g = g * scale[:, None]
        else:
            d = saved * saved
            np.subtract(1.0, d, out=d)
            d *= g
            g = d
    return {k: grads[k] for k in W}


def _fold(params: NetworkParams, arch: NetworkArchitecture) -> list[tuple[np.ndarray, np.ndarray, bool]]:
    """Collapse inference-mode affine runs into ``(W, c, apply_tanh)`` blocks."""
    W = params.weights
    eps = arch.bn_epsilon
    blocks = []
    acc_w = np.eye(arch.input_dim)
    acc_c = np.zeros(arch.input_dim)
    for kind, name, width in arch.ops():
        if kind == "dense":
            acc_c = acc_c @ W[f"{name}.W"] + W[f"{name}.b"]
            acc_w = acc_w @ W[f"{name}.W"]
        elif kind == "bn":
            s = W[f"{name}.gamma"] / np.sqrt(params.running[f"{name}.var"] + eps)
            t = W[f"{name}.beta"] - params.running[f"{name}.mean"] * s
            acc_w = acc_w * s
            acc_c = acc_c * s + t
        else:
            blocks.append((acc_w, acc_c, True))
            acc_w = np.eye(width)
            acc_c = np.zeros(width)
    blocks.append((acc_w, acc_c, False))
    return blocks


@dataclass(frozen=True)
class NeuralDensity:
    """Network restricted to a box: evaluates to exactly 0 outside ``domain``."""

    params: NetworkParams
    arch: NetworkArchitecture
    domain: Box

    @cached_property
    def _blocks(self):
        return _fold(self.params, self.arch)

    def raw(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode network output ignoring the support restriction."""
        y = np.asarray(x, dtype=float).reshape(-1, self.arch.input_dim)
        for w, c, act in self._blocks:
            y = y @ w + c
            if act:
                y = np.tanh(y)
        return y[:, 0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.arch.input_dim)
        inside = self.domain.contains(x)
        out = np.zeros(x.shape[0])
        if inside.any():
            out[inside] = self.raw(x[inside])
        return out


def evaluate_density(nd: NeuralDensity, x) -> float | np.ndarray:
    """Scalar convenience wrapper; arrays of points are passed through."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim <= 1 and arr.size == nd.arch.input_dim:
        return float(nd(arr.reshape(1, -1))[0])
    return nd(arr)


# Checkpoint layout (little endian):
#   b"SFNN" | u32 version | u32 input_dim | u32 output_dim | u32 n_hidden
#   | u32 * n_hidden widths | u32 flags (bit0 input_bn, bit1 final_bn)
#   | f64 momentum | f64 epsilon | f64 * d domain low | f64 * d domain high
#   | every weight tensor in arch order (row-major f64)
#   | every running mean/var pair in arch order (f64)
_MAGIC = b"SFNN"
_VERSION = 1


def _tensor_order(arch: NetworkArchitecture) -> tuple[list[str], list[str]]:
    weights, running = [], []
    for kind, name, _ in arch.ops():
        if kind == "dense":
            weights += [f"{name}.W", f"{name}.b"]
        elif kind == "bn":
            weights += [f"{name}.gamma", f"{name}.beta"]
            running += [f"{name}.mean", f"{name}.var"]
    return weights, running


def save_checkpoint(path: str | Path, nd: NeuralDensity) -> None:
    arch = nd.arch
    flags = int(arch.input_bn) | (int(arch.final_bn) << 1)
    head = struct.pack(
        f"<4sIIII{len(arch.hidden_widths)}II",
        _MAGIC, _VERSION, arch.input_dim, arch.output_dim, len(arch.hidden_widths),
        *arch.hidden_widths, flags,
    )
    d = nd.domain.dim
    head += struct.pack(f"<dd{d}d{d}d", arch.bn_momentum, arch.bn_epsilon,
                        *nd.domain.low, *nd.domain.high)
    w_keys, r_keys = _tensor_order(arch)
    body = b"".join(np.ascontiguousarray(nd.params.weights[k], dtype="<f8").tobytes() for k in w_keys)
    body += b"".join(np.ascontiguousarray(nd.params.running[k], dtype="<f8").tobytes() for k in r_keys)
    Path(path).write_bytes(head + body)


def load_checkpoint(path: str | Path) -> NeuralDensity:
    buf = Path(path).read_bytes()
    magic, version, din, dout, nh = struct.unpack_from("<4sIIII", buf, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    widths = struct.unpack_from(f"<{nh}I", buf, off)
    off += 4 * nh
    (flags,) = struct.unpack_from("<I", buf, off)
    off += 4
    mom, eps = struct.unpack_from("<dd", buf, off)
    off += 16
    low = struct.unpack_from(f"<{din}d", buf, off)
    off += 8 * din
    high = struct.unpack_from(f"<{din}d", buf, off)
    off += 8 * din
    arch = NetworkArchitecture(din, tuple(widths), dout, bool(flags & 1), bool(flags & 2), mom, eps)
    template = initialize(arch, 0)
    w_keys, r_keys = _tensor_order(arch)
    tensors = {}
    for store, keys in ((template.weights, w_keys), (template.running, r_keys)):
        for k in keys:
            shape = store[k].shape
            n = int(np.prod(shape))
            tensors[k] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(float)
            off += 8 * n
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    params = NetworkParams({k: tensors[k] for k in w_keys}, {k: tensors[k] for k in r_keys})
    return NeuralDensity(params, arch, Box(tuple(low), tuple(high)))
