"""Shared test utilities: central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from sugar.tensor import Tensor, backward


def numeric_grads(loss_fn, arrays: list[np.ndarray], h: float = 1e-4) -> list[np.ndarray]:
    """Central finite differences of loss_fn w.r.t. each input array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gf = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn(arrays)
            flat[i] = orig - h
            lm = loss_fn(arrays)
            flat[i] = orig
            gf[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(build_loss, arrays: list[np.ndarray], rtol: float = 1e-4) -> float:
    """Compare analytic gradients of build_loss against finite differences.

    build_loss maps a list of Tensors to a scalar Tensor. Returns the worst
    relative error across inputs and asserts it is below rtol.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(tensors)
    backward(loss)

    def f(arrs):
        return build_loss([Tensor(a) for a in arrs]).item()

    numeric = numeric_grads(f, [a.copy() for a in arrays])
    worst = 0.0
    for t, n in zip(tensors, numeric):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = max(float(np.abs(n).max()), float(np.abs(analytic).max()), 1e-6)
        err = float(np.abs(analytic - n).max()) / denom
        worst = max(worst, err)
    assert worst < rtol, f"gradient mismatch: rel err {worst:.3e} >= {rtol}"
    return worst
