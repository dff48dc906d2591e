"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .layers import Layer


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a|| + ||n||, tiny)``: stable when gradients are near zero."""
    num = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    den = np.linalg.norm(np.ravel(analytic)) + np.linalg.norm(np.ravel(numeric))
    return float(num / max(den, 1e-30))


def finite_difference_check(op: Callable[[Sequence[np.ndarray]], tuple[float, list[np.ndarray]]],
                            inputs: Sequence[np.ndarray], epsilon: float = 1e-5) -> float:
    """Max relative error between ``op``'s analytic gradients and central differences.

    ``op(inputs)`` must return ``(scalar, [d scalar / d input for input in inputs])``.
    Inputs are perturbed in place and restored.
    """
    _, analytic = op(inputs)
    worst = 0.0
    for x, a in zip(inputs, analytic):
        numeric = numerical_gradient(lambda: op(inputs)[0], x, epsilon)
        worst = max(worst, relative_error(a, numeric))
    return worst


def check_layer(layer: Layer, x: np.ndarray, rng: np.random.Generator, epsilon: float = 1e-5) -> float:
    """Gradient-check a layer w.r.t. its input and every parameter.

    The scalar objective is ``sum(U * layer(x))`` for a fixed random ``U``.
    """
    layer.check_inputs = False
    upstream = rng.standard_normal(layer.forward(x).shape)

    def op(arrays):
        out = layer.forward(arrays[0])
        value = float(np.sum(upstream * out))
        for p in layer.parameters():
            p.zero_grad()
        dx = layer.backward(upstream)
        return value, [dx] + [p.grad.copy() for p in layer.parameters()]

    return finite_difference_check(op, [x] + [p.data for p in layer.parameters()], epsilon)
