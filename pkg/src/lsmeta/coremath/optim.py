"""Plain SGD and bias-corrected Adam over parameter lists or MlpParams."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from .mlp import MlpParams


def _as_list(p):
    if isinstance(p, MlpParams):
        return p.arrays()
    return [np.asarray(a, dtype=np.float64) for a in p]


def _rebuild(template, arrays):
    if isinstance(template, MlpParams):
        return template.with_arrays(arrays)
    return arrays


def _check_shapes(a, b):
    if len(a) != len(b) or any(np.shape(x) != np.shape(y) for x, y in zip(a, b)):
        raise ShapeError("parameter and gradient shapes differ")


def sgd_step(params, gradient, alpha):
    """theta - alpha * g, elementwise."""
    if alpha < 0:
        raise ValueError("learning rate must be non-negative")
    p, g = _as_list(params), _as_list(gradient)
    _check_shapes(p, g)
    return _rebuild(params, [x - alpha * d for x, d in zip(p, g)])


@dataclass(frozen=True)
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        arrays = _as_list(params)
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, **kw)


def adam_step(state, params, gradient, lr):
    """One Adam update; returns ``(new_state, new_params)``."""
    p, g = _as_list(params), _as_list(gradient)
    _check_shapes(p, g)
    _check_shapes(p, state.m)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * mi + (1.0 - b1) * gi for mi, gi in zip(state.m, g)]
    v = [b2 * vi + (1.0 - b2) * gi * gi for vi, gi in zip(state.v, g)]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new = [x - lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for x, mi, vi in zip(p, m, v)]
    new_state = AdamState(m, v, t, b1, b2, state.eps)
    return new_state, _rebuild(params, new)
