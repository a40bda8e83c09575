"""Adam with bias correction, written functionally over name->Tensor maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, NonFiniteError, ShapeError, Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return OptimizerState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                              {k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()})


def adam_step(params: dict, grads: dict, state: OptimizerState):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are untouched.

    Parameters without an entry in ``grads`` are carried over unchanged.
    """
    if state.step < 0:
        raise ValueError("optimizer step counter must be non-negative")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name!r}; update aborted")

    new = state.copy()
    new.step = state.step + 1
    t = new.step
    bc1 = 1.0 - new.beta1 ** t
    bc2 = 1.0 - new.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = g.astype(np.float64)
        m = new.m.get(name, np.zeros(p.shape))
        v = new.v.get(name, np.zeros(p.shape))
        m = new.beta1 * m + (1 - new.beta1) * g
        v = new.beta2 * v + (1 - new.beta2) * g * g
        new.m[name], new.v[name] = m, v
        upd = new.lr * (m / bc1) / (np.sqrt(v / bc2) + new.eps)
        out[name] = Tensor((p.data - upd).astype(DTYPE), requires_grad=p.requires_grad, name=p.name)
    return out, new
