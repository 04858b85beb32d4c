"""Bias-corrected Adam, applied in place to named parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from oxygan.errors import ParameterError, ShapeError
from oxygan.tensor_core.tensor import Tensor


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ParameterError(f"learning rate must be non-negative, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ParameterError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ParameterError(f"eps must be positive, got {self.eps}")


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} does not match its parameter", g.shape, p.shape)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ShapeError(f"optimizer state for {name!r} does not match its parameter", m.shape, p.shape)

    state.step_count += 1
    t = state.step_count
    bias1 = 1 - state.beta1 ** t
    bias2 = 1 - state.beta2 ** t
    for name, p in params.items():
        dt = p.data.dtype.type
        coeffs = (dt(state.beta1), dt(1 - state.beta1), dt(state.beta2), dt(1 - state.beta2),
                  dt(1 / np.sqrt(bias2)), dt(state.eps), dt(state.lr / bias1))
        flat = (p.data.reshape(-1), grads[name].astype(p.data.dtype, copy=False).reshape(-1),
                state.m[name].reshape(-1), state.v[name].reshape(-1))
        for start in range(0, flat[0].size, _CHUNK):
            _update(*(a[start:start + _CHUNK] for a in flat), *coeffs)


# elements per cache-sized block; the update is memory-bound
_CHUNK = 1 << 16


def _update(p, g, m, v, b1, one_minus_b1, b2, one_minus_b2, inv_sqrt_bias2, eps, step):
    # p -= lr/bias1 * m / (sqrt(v)/sqrt(bias2) + eps)
    tmp = np.multiply(g, one_minus_b1)
    m *= b1
    m += tmp
    np.multiply(g, g, out=tmp)
    tmp *= one_minus_b2
    v *= b2
    v += tmp
    np.sqrt(v, out=tmp)
    tmp *= inv_sqrt_bias2
    tmp += eps
    np.divide(m, tmp, out=tmp)
    tmp *= step
    p -= tmp
