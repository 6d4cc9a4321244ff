"""Closed-form batched MLP gradients and Hessian-vector products.

Parameters carry a leading task axis: weights (T, in, out), biases
(T, 1, out); inputs are (T, n, d) with targets and per-sample weights of
shape (T, n, 1).  The loss is the weighted clamped cross-entropy used by
``mlp_loss``.  Hessian-vector products use the forward-mode R-operator on
the backward pass, so the second-order meta-gradient costs a few dense
passes per inner step instead of a recorded graph.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .autodiff import _active, _bce_forward

EPS = 1e-12


def _act(z, name):
    """(a, a', a'') for an activation."""
    if name == "sigmoid":
        s = expit(z)
        d1 = s * (1.0 - s)
        return s, d1, d1 * (1.0 - 2.0 * s)
    if name == "relu":
        d1 = (z > 0).astype(np.float64)
        return z * d1, d1, np.zeros_like(z)
    return z, np.ones_like(z), np.zeros_like(z)


def _forward(params, activations, X):
    hs, d1s, d2s = [X], [], []
    h = X
    last = len(activations) - 1
    for i, name in enumerate(activations):
        z = h @ params[2 * i] + params[2 * i + 1]
        if i == last:
            return hs, d1s, d2s, z
        h, d1, d2 = _act(z, name)
        hs.append(h)
        d1s.append(d1)
        d2s.append(d2)


def loss_value(params, activations, X, Y, W):
    """Weighted loss per task, shape (T,)."""
    z = _forward(params, activations, X)[3]
    return np.array([_bce_forward(z[t], Y[t], W[t], EPS) for t in range(z.shape[0])])


def _backward(params, hs, d1s, delta):
    L = len(hs)
    grads = [None] * (2 * L)
    deltas = [None] * L
    for i in range(L - 1, -1, -1):
        deltas[i] = delta
        grads[2 * i] = np.swapaxes(hs[i], -1, -2) @ delta
        grads[2 * i + 1] = delta.sum(axis=-2, keepdims=True)
        if i > 0:
            delta = (delta @ np.swapaxes(params[2 * i], -1, -2)) * d1s[i - 1]
    return grads, deltas


def gradient(params, activations, X, Y, W):
    """Per-task loss gradient, same shapes as ``params``."""
    hs, d1s, _, z = _forward(params, activations, X)
    delta = W * _active(z, EPS) * (expit(z) - Y)
    return _backward(params, hs, d1s, delta)[0]


def gradient_and_hvp(params, activations, X, Y, W, v):
    """(gradient, Hessian @ v) of the per-task loss at ``params``."""
    hs, d1s, d2s, z = _forward(params, activations, X)
    p = expit(z)
    m = W * _active(z, EPS)
    grads, deltas = _backward(params, hs, d1s, m * (p - Y))
    L = len(hs)
    # forward R-pass: directional derivatives of pre-activations
    rh = [np.zeros_like(X)]
    rzs = []
    for i in range(L):
        rz = rh[i] @ params[2 * i] + hs[i] @ v[2 * i] + v[2 * i + 1]
        rzs.append(rz)
        if i < L - 1:
            rh.append(d1s[i] * rz)
    # backward R-pass
    rdelta = m * p * (1.0 - p) * rzs[-1]
    hv = [None] * (2 * L)
    for i in range(L - 1, -1, -1):
        hv[2 * i] = np.swapaxes(rh[i], -1, -2) @ deltas[i] + np.swapaxes(hs[i], -1, -2) @ rdelta
        hv[2 * i + 1] = rdelta.sum(axis=-2, keepdims=True)
        if i > 0:
            wt = np.swapaxes(params[2 * i], -1, -2)
            back = deltas[i] @ wt
            rdelta = ((rdelta @ wt + deltas[i] @ np.swapaxes(v[2 * i], -1, -2)) * d1s[i - 1]
                      + back * d2s[i - 1] * rzs[i - 1])
    return grads, hv


def meta_gradient(params, activations, support, query, alpha, steps, second_order=True):
    """Summed query loss after ``steps`` inner SGD steps and its gradient.

    ``params`` are per-task replicas; the returned gradient is per task, so
    the caller reduces it over the task axis.
    """
    Xs, Ys, Ws = support
    Xq, Yq, Wq = query
    traj = [params]
    for _ in range(steps):
        g = gradient(traj[-1], activations, Xs, Ys, Ws)
        traj.append([a - alpha * b for a, b in zip(traj[-1], g)])
    value = float(loss_value(traj[-1], activations, Xq, Yq, Wq).sum())
    v = gradient(traj[-1], activations, Xq, Yq, Wq)
    if second_order:
        for theta in reversed(traj[:-1]):
            _, hv = gradient_and_hvp(theta, activations, Xs, Ys, Ws, v)
            v = [a - alpha * b for a, b in zip(v, hv)]
    return value, v
