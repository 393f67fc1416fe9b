"""Reverse-mode MLP stack on 64-bit floats, with Adam and binary checkpoints.

The model zoo is a closed set (MLP trunks, softmax heads, a handful of scalar
losses), so backward passes are explicit per-layer rules over cached
activations instead of a general tape. All math is float64 so gradients can
be checked against central finite differences to tight tolerances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ACTIVATIONS


class GradientError(RuntimeError):
    """Non-finite gradient or parameter update, annotated with the step index."""


class StaleCacheError(RuntimeError):
    """Backward called with a cache from an outdated forward pass."""


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self) -> None:
        for d in (self.input_dim, *self.hidden_dims, self.output_dim):
            if d < 1:
                raise ValueError("all layer dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def param_count(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_sizes)


class ParamTensor:
    """Flat float64 parameter storage with per-layer (weight, bias) views.

    The views alias `flat`, so in-place optimizer updates are visible through
    them. `version` increments on every update and invalidates old forward
    caches.
    """

    def __init__(self, spec: MlpSpec, flat: np.ndarray | None = None):
        self.spec = spec
        n = spec.param_count()
        if flat is None:
            flat = np.zeros(n, dtype=np.float64)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {flat.shape}")
        self.flat = flat
        self.version = 0
        self._views: list[tuple[np.ndarray, np.ndarray]] = []
        offset = 0
        for fan_in, fan_out in spec.layer_sizes:
            w = self.flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.flat[offset : offset + fan_out]
            offset += fan_out
            self._views.append((w, b))

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return self._views

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.spec, self.flat.copy())

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.flat)):
            raise GradientError("parameters contain non-finite entries")


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamTensor:
    """Fan-in scaled Gaussian weights, zero biases."""
    params = ParamTensor(spec)
    for w, b in params.layers:
        w[...] = rng.normal(size=w.shape) / np.sqrt(w.shape[0])
        b[...] = 0.0
    return params


@dataclass
class ForwardCache:
    version: int
    inputs: list[np.ndarray]  # input to each linear layer (post-activation of previous)
    act_derivs: list[np.ndarray]  # d(activation)/d(preactivation) per hidden layer
    squeeze: bool


def forward(params: ParamTensor, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the network; the cache enables an exact backward pass."""
    squeeze = x.ndim == 1
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.shape[1] != params.spec.input_dim:
        raise ValueError(f"input dim {h.shape[1]} != spec input_dim {params.spec.input_dim}")
    inputs: list[np.ndarray] = []
    act_derivs: list[np.ndarray] = []
    n_layers = len(params.layers)
    for i, (w, b) in enumerate(params.layers):
        inputs.append(h)
        z = h @ w + b
        if i < n_layers - 1:
            if params.spec.activation == "tanh":
                h = np.tanh(z)
                act_derivs.append(1.0 - h * h)
            else:
                h = np.maximum(z, 0.0)
                act_derivs.append((z > 0.0).astype(np.float64))
        else:
            h = z
    out = h[0] if squeeze else h
    return out, ForwardCache(params.version, inputs, act_derivs, squeeze)


def backward(params: ParamTensor, cache: ForwardCache, upstream: np.ndarray) -> np.ndarray:
    """Gradient of sum(upstream * output) with respect to the flat parameters."""
    if cache.version != params.version:
        raise StaleCacheError("forward cache predates a parameter update")
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    grad = np.zeros_like(params.flat)
    grad_views = ParamTensor(params.spec, grad)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        gw, gb = grad_views.layers[i]
        gw[...] = cache.inputs[i].T @ g
        gb[...] = g.sum(axis=0)
        if i > 0:
            g = (g @ w.T) * cache.act_derivs[i - 1]
    return grad


def log_softmax(logits: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Log-probabilities of softmax(logits / beta), stabilized by max subtraction."""
    if beta <= 0:
        raise ValueError("temperature beta must be positive")
    z = np.asarray(logits, dtype=np.float64) / beta
    m = np.max(z, axis=-1, keepdims=True)
    return z - m - np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))


def softmax(logits: np.ndarray, beta: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(logits, beta))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    return np.logaddexp(0.0, x)


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for one ParamTensor."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))


def adam_state(params: ParamTensor, lr: float, beta1: float = 0.9, beta2: float = 0.999) -> AdamState:
    n = params.flat.shape[0]
    return AdamState(lr=lr, beta1=beta1, beta2=beta2,
                     m=np.zeros(n, dtype=np.float64), v=np.zeros(n, dtype=np.float64))


def adam_step(state: AdamState, params: ParamTensor, grad: np.ndarray) -> None:
    """One in-place Adam update; rejects non-finite gradients and results."""
    if grad.shape != params.flat.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise GradientError(f"non-finite gradient at optimizer step {state.step + 1}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params.flat -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params.version += 1
    if not np.all(np.isfinite(params.flat)):
        raise GradientError(f"non-finite parameters after optimizer step {state.step}")


_MAGIC = "mlp64"


def save_params(path: str | Path, params: ParamTensor, step: int = 0) -> None:
    """Checkpoint: one ASCII header line, then little-endian float64 values."""
    spec = params.spec
    hidden = ",".join(str(d) for d in spec.hidden_dims) or "-"
    header = (f"{_MAGIC} input={spec.input_dim} hidden={hidden} output={spec.output_dim} "
              f"act={spec.activation} step={step} n={params.flat.shape[0]}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(params.flat.astype("<f8").tobytes())


def load_params(path: str | Path) -> tuple[ParamTensor, int]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        blob = fh.read()
    parts = header.split()
    if not parts or parts[0] != _MAGIC:
        raise ValueError(f"not a {_MAGIC} checkpoint: {path}")
    kv = dict(p.split("=", 1) for p in parts[1:])
    hidden = () if kv["hidden"] == "-" else tuple(int(d) for d in kv["hidden"].split(","))
    spec = MlpSpec(int(kv["input"]), hidden, int(kv["output"]), kv["act"])
    n = int(kv["n"])
    flat = np.frombuffer(blob, dtype="<f8")
    if flat.shape[0] != n or n != spec.param_count():
        raise ValueError("checkpoint parameter count does not match its header")
    return ParamTensor(spec, flat.copy()), int(kv["step"])
