"""Finite-difference verification of reverse-mode gradients.

The numeric side never touches the autodiff graph: it re-evaluates the
scalar objective with perturbed parameter entries, so it stays an
independent oracle for the analytic gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .layers import Network
from .tensor import Tensor


def finite_difference(f: Callable[[], float], params: Sequence[Tensor], eps: float) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` w.r.t. every entry of every parameter."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def max_relative_error(
    objective: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5
) -> float:
    """Compare autodiff gradients of ``objective`` against central differences.

    Returns the worst relative error over all parameter entries; 0.0 for an
    empty parameter list.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    params = list(params)
    if not params:
        return 0.0
    for p in params:
        p.zero_grad()
    objective().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = finite_difference(lambda: objective().item(), params, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def grad_check(net: Network, input_array, eps: float = 1e-5, loss: Callable[[Tensor], Tensor] | None = None) -> float:
    """Gradient check for a whole network on a fixed input.

    The default scalar objective is the sum of the network outputs; pass
    ``loss`` to check through an arbitrary head.
    """
    x = np.asarray(input_array, dtype=np.float64)
    if loss is None:
        loss = lambda out: out.sum()
    return max_relative_error(lambda: loss(net.forward(Tensor(x))), net.parameters(), eps=eps)
