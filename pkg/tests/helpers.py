"""Shared test utilities, chiefly the finite-difference gradient oracle."""

import numpy as np

from ditmoe import tensor as T


def numeric_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(loss_fn, params, h: float = 1e-5, tol: float = 1e-5,
              floor: float = 1e-4) -> float:
    """Compare reverse-mode gradients of a scalar `loss_fn()` against
    central differences, perturbing every coordinate of every param.

    `loss_fn` must rebuild its graph on each call and be deterministic.
    Returns the worst relative error (denominator floored so that
    finite-difference noise around true zeros does not trip the check).
    """
    for p in params:
        p.zero_grad()
    T.backward(loss_fn())
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            ana = 0.0 if grad is None else float(grad.reshape(-1)[i])
            worst = max(worst, numeric_error(ana, numeric, floor))
    assert worst < tol, f"gradcheck: max relative error {worst:.3e} >= {tol:.0e}"
    return worst


def rand(rng: np.random.Generator, *shape) -> np.ndarray:
    return rng.uniform(-2.0, 2.0, size=shape)
