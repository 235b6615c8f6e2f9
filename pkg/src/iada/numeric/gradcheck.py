"""Central finite-difference gradients, used as an independent oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor

_STENCILS = {
    2: ((1.0, 1), (-1.0, -1)),
    4: ((8.0, 1), (-8.0, -1), (-1.0, 2), (1.0, -2)),
}
_DENOM = {2: 2.0, 4: 12.0}


def finite_diff_grad(f: Callable[[], float], x: Tensor, h: float = 1e-5,
                     order: int = 2) -> np.ndarray:
    """Estimate d f / d x element by element.

    ``f`` takes no arguments and reads ``x.data`` (which is perturbed in place
    and restored). ``order=2`` is the plain central difference
    (f(x+h) - f(x-h)) / 2h; ``order=4`` the five-point stencil.
    """
    if order not in _STENCILS:
        raise ValueError("order must be 2 or 4")
    data = x.data
    flat = data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        acc = 0.0
        for coef, step in _STENCILS[order]:
            flat[i] = orig + step * h
            acc += coef * float(f())
        flat[i] = orig
        grad[i] = acc / (_DENOM[order] * h)
    return grad.reshape(data.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over elements.

    ``floor`` keeps exactly-zero gradients (where finite differences return
    pure round-off) from dividing by zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_gradients(loss_fn: Callable[[], Tensor], params: dict, h: float = 1e-5,
                    order: int = 2) -> dict:
    """Compare backprop with finite differences for every tensor in ``params``.

    ``loss_fn`` rebuilds the graph on each call. Returns name -> max relative error.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    value = lambda: loss_fn().item()  # noqa: E731
    errors = {}
    for name, p in params.items():
        numeric = finite_diff_grad(value, p, h=h, order=order)
        errors[name] = max_relative_error(analytic[name], numeric)
    for p in params.values():
        p.grad = None
    return errors
