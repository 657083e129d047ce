"""Finite-difference verification of tape gradients."""

import numpy as np

from ..exceptions import InvalidInputError, NumericalError
from .tensor import Tape


def grad_check(f, params, eps=1e-5):
    """Compare autodiff gradients of the scalar ``f()`` with central differences.

    ``f`` takes no arguments and reads ``params`` by closure.  Returns the
    largest relative error ``|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)``
    over every parameter entry.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise InvalidInputError("grad_check requires 64-bit parameters")
        p.requires_grad = True
        p.grad = None

    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericalError("objective is not finite at the unperturbed point")
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        g_ad = analytic[pi].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(f"objective not finite when perturbing parameter {pi} entry {i}")
            g_fd = (up - down) / (2.0 * eps)
            err = abs(g_ad[i] - g_fd) / max(1e-12, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
