"""Feed-forward ReLU network with manual backpropagation and an Adam optimizer.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``x`` of shape
``(B, fan_in)`` maps through ``x @ W + b``.  Hidden layers use ReLU, the output
layer is linear.  Everything is float64.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import numpy.typing as npt

from .core import FloatArray
from .error_service import CheckpointError, ContractViolation

OptimizerMode = Literal["adam", "plain"]


@dataclass
class Mlp:
    weights: list[FloatArray]
    biases: list[FloatArray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractViolation("Mlp needs one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases, strict=True)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ContractViolation(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ContractViolation(f"layer {i}: input width does not match previous layer")

    @property
    def topology(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def copy(self) -> Mlp:
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> list[FloatArray]:
        return [*self.weights, *self.biases]


@dataclass
class Gradients:
    weights: list[FloatArray]
    biases: list[FloatArray]

    def parameters(self) -> list[FloatArray]:
        return [*self.weights, *self.biases]


@dataclass
class ForwardCache:
    """Layer inputs and pre-activations of one batched forward pass."""

    inputs: list[FloatArray]
    pre_activations: list[FloatArray]


def init_mlp(
    topology: Sequence[int], rng: np.random.Generator, final_scale: float = 1.0
) -> Mlp:
    """Uniform ±1/√fan_in init; the last layer is additionally scaled by *final_scale*."""
    if len(topology) < 2 or any(n < 1 for n in topology):
        raise ContractViolation(f"invalid topology {tuple(topology)}")
    weights: list[FloatArray] = []
    biases: list[FloatArray] = []
    last = len(topology) - 2
    for i, (fan_in, fan_out) in enumerate(zip(topology[:-1], topology[1:], strict=True)):
        bound = 1.0 / np.sqrt(fan_in)
        scale = final_scale if i == last else 1.0
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)) * scale)
        biases.append(rng.uniform(-bound, bound, size=fan_out) * scale)
    return Mlp(weights, biases)


def _as_batch(net: Mlp, x: npt.ArrayLike) -> tuple[FloatArray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    batch = arr.reshape(1, -1) if single else arr
    if batch.ndim != 2 or batch.shape[1] != net.topology[0]:
        raise ContractViolation(
            f"input width {batch.shape[-1]} does not match network input {net.topology[0]}"
        )
    return batch, single


def forward_cached(net: Mlp, x: npt.ArrayLike) -> tuple[FloatArray, ForwardCache]:
    h, single = _as_batch(net, x)
    cache = ForwardCache([], [])
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases, strict=True)):
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre_activations.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return (h[0] if single else h), cache


def forward(net: Mlp, x: npt.ArrayLike) -> FloatArray:
    out, _ = forward_cached(net, x)
    return out


def backward(
    net: Mlp, cache: ForwardCache, upstream: npt.ArrayLike
) -> tuple[Gradients, FloatArray]:
    """Reverse pass; parameter gradients are summed over the batch."""
    g = np.asarray(upstream, dtype=np.float64)
    batch = cache.inputs[0].shape[0]
    if g.ndim == 1:
        g = g.reshape(batch, -1)
    if g.shape != (batch, net.topology[-1]):
        raise ContractViolation(f"upstream gradient shape {g.shape} does not match output")
    n_layers = len(net.weights)
    grad_w: list[FloatArray] = [np.empty(0)] * n_layers
    grad_b: list[FloatArray] = [np.empty(0)] * n_layers
    for i in range(n_layers - 1, -1, -1):
        grad_w[i] = cache.inputs[i].T @ g
        grad_b[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
        if i:
            g = g * (cache.pre_activations[i - 1] > 0.0)
    return Gradients(grad_w, grad_b), g


@dataclass
class OptimizerState:
    lr: float
    mode: OptimizerMode = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list[FloatArray] = field(default_factory=list)
    second_moment: list[FloatArray] = field(default_factory=list)


def init_optimizer(net: Mlp, lr: float, mode: OptimizerMode = "adam") -> OptimizerState:
    params = net.parameters()
    return OptimizerState(
        lr=lr,
        mode=mode,
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
    )


def opt_step(
    net: Mlp, grads: Gradients, state: OptimizerState, *, ascent: bool = False
) -> Mlp:
    """Update *net* in place (descent by default) and return it."""
    params = net.parameters()
    gparams = grads.parameters()
    if [p.shape for p in params] != [g.shape for g in gparams]:
        raise ContractViolation("gradient shapes do not mirror network parameters")
    sign = -1.0 if ascent else 1.0
    if state.mode == "plain":
        for p, g in zip(params, gparams, strict=True):
            p -= sign * (state.lr * g)
        return net

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, gparams, state.first_moment, state.second_moment, strict=True):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= sign * (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
    return net


# ---------------------------------------------------------------------------
# Serialization (flat array dicts, used inside .npz checkpoints)
# ---------------------------------------------------------------------------


def mlp_to_arrays(net: Mlp, prefix: str) -> dict[str, FloatArray]:
    out: dict[str, FloatArray] = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases, strict=True)):
        out[f"{prefix}/W{i}"] = w
        out[f"{prefix}/b{i}"] = b
    return out


def mlp_from_arrays(arrays: dict[str, FloatArray], prefix: str) -> Mlp:
    weights: list[FloatArray] = []
    biases: list[FloatArray] = []
    i = 0
    while f"{prefix}/W{i}" in arrays:
        weights.append(np.array(arrays[f"{prefix}/W{i}"], dtype=np.float64))
        biases.append(np.array(arrays[f"{prefix}/b{i}"], dtype=np.float64))
        i += 1
    if not weights:
        raise CheckpointError(f"no network stored under {prefix!r}")
    return Mlp(weights, biases)


def optimizer_to_arrays(state: OptimizerState, prefix: str) -> dict[str, FloatArray]:
    out: dict[str, FloatArray] = {
        f"{prefix}/hyper": np.array([state.lr, state.beta1, state.beta2, state.eps, state.step]),
    }
    for i, (m, v) in enumerate(zip(state.first_moment, state.second_moment, strict=True)):
        out[f"{prefix}/m{i}"] = m
        out[f"{prefix}/v{i}"] = v
    return out


def optimizer_from_arrays(
    arrays: dict[str, FloatArray], prefix: str, mode: OptimizerMode
) -> OptimizerState:
    key = f"{prefix}/hyper"
    if key not in arrays:
        raise CheckpointError(f"no optimizer stored under {prefix!r}")
    lr, beta1, beta2, eps, step = (float(v) for v in arrays[key])
    state = OptimizerState(lr=lr, mode=mode, beta1=beta1, beta2=beta2, eps=eps, step=int(step))
    i = 0
    while f"{prefix}/m{i}" in arrays:
        state.first_moment.append(np.array(arrays[f"{prefix}/m{i}"], dtype=np.float64))
        state.second_moment.append(np.array(arrays[f"{prefix}/v{i}"], dtype=np.float64))
        i += 1
    return state
