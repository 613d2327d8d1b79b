"""Finite-difference gradient verification.

Central differences at float64 are the reference: for a scalar-valued
function ``f`` of some tensors, each probed coordinate ``i`` is compared as

    (f(x + h e_i) - f(x - h e_i)) / 2h   vs   analytic grad[i]

Checks run at float64 because float32 rounding drowns the h**2 truncation
error of the central difference.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError


def numerical_gradient(
    f: Callable[[], "T.Tensor"],
    param: "T.Tensor",
    h: float = 1e-5,
    coords: Optional[Sequence[tuple]] = None,
) -> np.ndarray:
    """Central-difference gradient of ``f()`` with respect to ``param``.

    ``coords`` limits probing to the given index tuples (flat gradient array
    is returned either way, unprobed entries are NaN); None probes all
    entries.
    """
    if param.dtype != np.float64:
        raise ContractError("numerical_gradient requires float64 parameters")
    flat = param.data.reshape(-1)
    if coords is None:
        idx = range(flat.size)
    else:
        idx = [np.ravel_multi_index(c, param.shape) for c in coords]
    out = np.full(flat.size, np.nan)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case |a - n| / max(|n|, floor) over the probed entries."""
    mask = np.isfinite(numeric)
    if not mask.any():
        return 0.0
    a = analytic[mask]
    n = numeric[mask]
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(n), floor)))


def check_gradients(
    f: Callable[[], "T.Tensor"],
    params: Sequence["T.Tensor"],
    h: float = 1e-5,
    coords_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare analytic and finite-difference gradients of ``f``.

    Runs ``f`` once under a fresh tape to populate analytic grads, then
    probes every coordinate (or ``coords_per_param`` random ones) of every
    parameter. Returns the worst relative error observed.
    """
    for p in params:
        p.grad = None
    with T.Tape():
        loss = f()
        T.backward(loss)
    analytic = []
    for p in params:
        if p.grad is None:
            raise ContractError("a parameter received no gradient from f()")
        analytic.append(p.grad.copy())

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p, a in zip(params, analytic):
        coords = None
        if coords_per_param is not None and p.size > coords_per_param:
            chosen = rng.choice(p.size, size=coords_per_param, replace=False)
            coords = [np.unravel_index(int(i), p.shape) for i in chosen]
        num = numerical_gradient(f, p, h=h, coords=coords)
        worst = max(worst, max_relative_error(a, num))
    return worst
