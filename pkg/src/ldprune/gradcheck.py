"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor, no_tape


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, eps: float = 1e-6) -> np.ndarray:
    x = inputs[index]
    grad = np.zeros_like(x.data)
    flat, gflat = x.data.reshape(-1), grad.reshape(-1)
    with no_tape():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(*inputs).item()
            flat[i] = orig - eps
            down = fn(*inputs).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> list[float]:
    """Relative error between analytic and numeric gradients, one per input.

    ``fn`` must map the inputs to a scalar Tensor. Inputs should be float64
    for meaningful results; those with ``requires_grad=False`` yield ``0.0``.
    """
    with GradTape() as tape:
        out = fn(*inputs)
    analytic = tape.backward(out)
    errors = []
    for i, x in enumerate(inputs):
        if not x.requires_grad:
            errors.append(0.0)
            continue
        a = analytic.get(x, np.zeros_like(x.data))
        errors.append(relative_error(a, numeric_grad(fn, inputs, i, eps)))
    return errors
