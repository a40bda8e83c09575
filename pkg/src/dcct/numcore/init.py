from __future__ import annotations

import numpy as np

from .tensor import DTYPE, Tensor


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    """Trainable tensor drawn from U(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(DTYPE), requires_grad=True, name=name)


def conv_params(rng, name, c_in, c_out, k=3) -> dict:
    fan_in = c_in * k * k
    return {
        f"{name}.w": uniform_fan_in(rng, (c_out, c_in, k, k), fan_in, f"{name}.w"),
        f"{name}.b": uniform_fan_in(rng, (c_out,), fan_in, f"{name}.b"),
    }


def linear_params(rng, name, d_in, d_out) -> dict:
    return {
        f"{name}.w": uniform_fan_in(rng, (d_in, d_out), d_in, f"{name}.w"),
        f"{name}.b": uniform_fan_in(rng, (d_out,), d_in, f"{name}.b"),
    }


def norm_params(name, d) -> dict:
    return {
        f"{name}.g": Tensor(np.ones(d, dtype=DTYPE), requires_grad=True, name=f"{name}.g"),
        f"{name}.b": Tensor(np.zeros(d, dtype=DTYPE), requires_grad=True, name=f"{name}.b"),
    }


def params_bytes(params: dict) -> bytes:
    """Concatenated raw bytes of all tensors in name order (for hashing/equality)."""
    return b"".join(params[k].data.tobytes() for k in sorted(params))
