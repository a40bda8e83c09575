"""Central finite-difference gradient checks.

The checker only perturbs raw parameter bytes and re-evaluates the loss
function; it never touches the recorded graph, so it stays an independent
oracle for :func:`~dcct.numcore.tensor.backward`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    ok: bool
    worst_name: str
    worst_index: tuple
    worst_excess: float  # max over elements of |g - fd| - (atol + rtol*|fd|); <= 0 passes
    n_checked: int


def numeric_grad(loss_fn, params: dict, name: str, index, step=1e-3) -> float:
    p = params[name]
    base = p.data.copy()

    def at(v):
        arr = base.copy()
        arr[index] = v
        trial = dict(params)
        trial[name] = Tensor(arr, requires_grad=True, name=p.name)
        with no_grad():
            return float(np.float64(loss_fn(trial).data.reshape(())))

    x0 = float(base[index])
    hi, lo = DTYPE(x0 + step), DTYPE(x0 - step)
    return (at(hi) - at(lo)) / (float(hi) - float(lo))


def check_gradients(loss_fn, params: dict, *, step=1e-3, rtol=1e-2, atol=1e-3,
                    max_per_param=None, rng=None) -> GradCheckResult:
    """Compare analytic and central-difference gradients elementwise.

    ``loss_fn(params) -> scalar Tensor``. With ``max_per_param`` set, a random
    subset of that many entries is checked per parameter tensor.
    """
    loss = loss_fn(params)
    analytic = {r.name: r.grad for r in backward(loss, params)}
    rng = rng or np.random.default_rng(0)
    worst = (-np.inf, "", (), 0)
    n = 0
    for name, p in params.items():
        indices = list(np.ndindex(p.shape))
        if max_per_param is not None and len(indices) > max_per_param:
            pick = rng.choice(len(indices), size=max_per_param, replace=False)
            indices = [indices[i] for i in sorted(pick)]
        for idx in indices:
            fd = numeric_grad(loss_fn, params, name, idx, step)
            g = float(analytic[name][idx])
            excess = abs(g - fd) - (atol + rtol * abs(fd))
            n += 1
            if excess > worst[0]:
                worst = (excess, name, idx, n)
    return GradCheckResult(worst[0] <= 0, worst[1], worst[2], float(worst[0]), n)
