"""Manual backpropagation against finite differences, optimizer and serialization."""

from __future__ import annotations

import numpy as np
import pytest

from engine_lab.error_service import CheckpointError, ContractViolation
from engine_lab.nn import (
    Mlp,
    backward,
    forward,
    forward_cached,
    init_mlp,
    init_optimizer,
    mlp_from_arrays,
    mlp_to_arrays,
    opt_step,
    optimizer_from_arrays,
    optimizer_to_arrays,
)

from .conftest import activation_pattern, central_difference, relative_error


def _loss(net: Mlp, x: np.ndarray, target: np.ndarray) -> float:
    return float(0.5 * np.sum((forward(net, x) - target) ** 2))


def test_topology_and_shapes(rng: np.random.Generator) -> None:
    net = init_mlp((8, 16, 16, 3), rng)
    assert net.topology == (8, 16, 16, 3)
    assert forward(net, np.zeros(8)).shape == (3,)
    assert forward(net, np.zeros((5, 8))).shape == (5, 3)


def test_final_scale_shrinks_last_layer(rng: np.random.Generator) -> None:
    net = init_mlp((4, 8, 2), rng, final_scale=1e-3)
    assert np.max(np.abs(net.weights[-1])) <= 1e-3 / np.sqrt(8)


def test_wrong_input_width_rejected(rng: np.random.Generator) -> None:
    net = init_mlp((4, 3, 1), rng)
    with pytest.raises(ContractViolation):
        forward(net, np.zeros(5))


TOPOLOGIES = [(3, 4, 1), (5, 7, 6, 2), (8, 16, 16, 4)]


@pytest.mark.parametrize("topology", TOPOLOGIES)
@pytest.mark.parametrize("seed", range(10))
def test_parameter_gradients_match_finite_differences(topology: tuple[int, ...], seed: int) -> None:
    rng = np.random.default_rng(seed)
    net = init_mlp(topology, rng)
    x = rng.normal(size=(4, topology[0]))
    target = rng.normal(size=(4, topology[-1]))
    out, cache = forward_cached(net, x)
    grads, _ = backward(net, cache, out - target)
    checked = 0
    for param, grad in zip(net.parameters(), grads.parameters(), strict=True):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            numeric = central_difference(lambda: _loss(net, x, target), flat, j, lambda: activation_pattern(net, x))
            if numeric is None:
                continue
            checked += 1
            assert relative_error(gflat[j], numeric) < 1e-4
    assert checked >= 0.95 * sum(p.size for p in net.parameters())


@pytest.mark.parametrize("topology", TOPOLOGIES)
@pytest.mark.parametrize("seed", range(10))
def test_input_gradient_matches_finite_differences(topology: tuple[int, ...], seed: int) -> None:
    rng = np.random.default_rng(seed)
    net = init_mlp(topology, rng)
    x = rng.normal(size=(3, topology[0]))
    out, cache = forward_cached(net, x)
    _, grad_in = backward(net, cache, np.ones_like(out))
    flat = x.reshape(-1)
    checked = 0
    for j in range(flat.size):
        numeric = central_difference(lambda: float(forward(net, x).sum()), flat, j, lambda: activation_pattern(net, x))
        if numeric is None:
            continue
        checked += 1
        assert relative_error(grad_in.reshape(-1)[j], numeric) < 1e-4
    assert checked >= flat.size - 1


def test_plain_step_is_gradient_descent(rng: np.random.Generator) -> None:
    net = init_mlp((3, 4, 1), rng)
    before = [p.copy() for p in net.parameters()]
    out, cache = forward_cached(net, rng.normal(size=(2, 3)))
    grads, _ = backward(net, cache, np.ones_like(out))
    opt_step(net, grads, init_optimizer(net, 0.1, "plain"))
    for p, p0, g in zip(net.parameters(), before, grads.parameters(), strict=True):
        assert np.allclose(p, p0 - 0.1 * g)


def test_ascent_flips_direction(rng: np.random.Generator) -> None:
    net = init_mlp((3, 4, 1), rng)
    before = [p.copy() for p in net.parameters()]
    out, cache = forward_cached(net, rng.normal(size=(2, 3)))
    grads, _ = backward(net, cache, np.ones_like(out))
    opt_step(net, grads, init_optimizer(net, 0.1, "plain"), ascent=True)
    for p, p0, g in zip(net.parameters(), before, grads.parameters(), strict=True):
        assert np.allclose(p, p0 + 0.1 * g)


def test_adam_first_step_moves_by_learning_rate(rng: np.random.Generator) -> None:
    net = init_mlp((3, 4, 1), rng)
    before = [p.copy() for p in net.parameters()]
    out, cache = forward_cached(net, rng.normal(size=(2, 3)))
    grads, _ = backward(net, cache, np.ones_like(out))
    state = init_optimizer(net, 0.01)
    opt_step(net, grads, state)
    assert state.step == 1
    for p, p0, g in zip(net.parameters(), before, grads.parameters(), strict=True):
        moved = np.abs(p - p0)[np.abs(g) > 1e-4]
        assert np.allclose(moved, 0.01, rtol=1e-3)


def test_serialization_roundtrip(rng: np.random.Generator) -> None:
    net = init_mlp((3, 5, 2), rng)
    state = init_optimizer(net, 0.01)
    state.step = 7
    arrays = {**mlp_to_arrays(net, "actor"), **optimizer_to_arrays(state, "actor_opt")}
    restored = mlp_from_arrays(arrays, "actor")
    assert restored.topology == net.topology
    for a, b in zip(restored.parameters(), net.parameters(), strict=True):
        assert np.array_equal(a, b)
    opt = optimizer_from_arrays(arrays, "actor_opt", "adam")
    assert opt.step == 7 and opt.lr == 0.01
    assert len(opt.first_moment) == len(net.parameters())
    with pytest.raises(CheckpointError):
        mlp_from_arrays(arrays, "critic")
