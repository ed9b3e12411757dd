"""Shared test oracles: central finite differences and small utilities."""

from __future__ import annotations

import numpy as np

from fraecodec.autodiff import Tape, Tensor


def tape_gradients(build_loss, tensors) -> list[np.ndarray]:
    """Forward + one reverse sweep; returns grads aligned with `tensors`."""
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def numeric_gradients(build_loss, tensors, eps: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of the scalar loss w.r.t. each tensor.

    Mutates tensor data in place and restores it; `build_loss` must rebuild
    the forward pass from the current data each call.
    """
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = build_loss().item()
            flat[i] = orig - eps
            f_minus = build_loss().item()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g.reshape(t.data.shape))
    return grads


def max_rel_err(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    """max |a - n| / max(1, |n|) over every element (absolute floor 1)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def fd_check(build_loss, tensors, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient and finite differences."""
    return max_rel_err(tape_gradients(build_loss, tensors),
                       numeric_gradients(build_loss, tensors, eps))


def random_tensor(rng: np.random.Generator, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape))
