"""Greedy layerwise unsupervised pretraining: RBM -> RBM -> denoising AE.

The trained encoders become the hidden layers of the base classifier; the
one-unit output head is left randomly initialised.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .coremath import AdamState, Layer, MlpParams, adam_step, glorot_layer
from .coremath import autodiff as ad
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class RbmParams:
    W: np.ndarray  # (visible, hidden)
    b_vis: np.ndarray
    b_hid: np.ndarray

    @classmethod
    def init(cls, n_vis, n_hid, rng, scale=0.01):
        return cls(rng.normal(0.0, scale, size=(n_vis, n_hid)), np.zeros(n_vis), np.zeros(n_hid))

    def arrays(self):
        return [self.W, self.b_vis, self.b_hid]

    def hidden_probs(self, v):
        return expit(v @ self.W + self.b_hid)

    def visible_probs(self, h):
        return expit(h @ self.W.T + self.b_vis)


@dataclass
class DaeParams:
    W_enc: np.ndarray  # (n_in, n_hidden)
    b_enc: np.ndarray
    W_dec: np.ndarray  # (n_hidden, n_in)
    b_dec: np.ndarray
    corruption_rate: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.corruption_rate < 1.0:
            raise ValueError("corruption_rate must be in [0, 1)")
        if self.W_dec.shape[1] != self.W_enc.shape[0]:
            raise ValueError("decoder output dim must equal encoder input dim")

    @classmethod
    def init(cls, n_in, n_hidden, rng, corruption_rate=0.2):
        enc = glorot_layer(n_in, n_hidden, rng)
        dec = glorot_layer(n_hidden, n_in, rng)
        return cls(enc.weight, enc.bias, dec.weight, dec.bias, corruption_rate)

    def arrays(self):
        return [self.W_enc, self.b_enc, self.W_dec, self.b_dec]

    def with_arrays(self, arrays):
        return DaeParams(*[np.array(a) for a in arrays], corruption_rate=self.corruption_rate)

    def encode(self, x):
        return expit(x @ self.W_enc + self.b_enc)


@dataclass
class TrainLog:
    initial_error: float
    epoch_errors: list = field(default_factory=list)


@dataclass
class PretrainConfig:
    hidden: tuple = (32, 64, 32)
    rbm_epochs: int = 20
    rbm_lr: float = 1e-3
    dae_epochs: int = 20
    dae_lr: float = 1e-5
    corruption_rate: float = 0.2
    batch_size: int = 32


@dataclass
class PretrainStack:
    rbm1: RbmParams
    rbm2: RbmParams
    dae: DaeParams
    sizes: tuple  # (M_in, H1, H2, H3)
    logs: dict = field(default_factory=dict)

    def export(self, head):
        """Base classifier f_0: the three encoders plus the given output layer."""
        return MlpParams(
            (
                Layer(self.rbm1.W, self.rbm1.b_hid, "sigmoid"),
                Layer(self.rbm2.W, self.rbm2.b_hid, "sigmoid"),
                Layer(self.dae.W_enc, self.dae.b_enc, "sigmoid"),
                head,
            )
        )


def _check_unit_interval(v):
    if np.any(v < 0.0) or np.any(v > 1.0) or not np.all(np.isfinite(v)):
        raise ValueError("RBM inputs must lie in [0, 1]")


def _bernoulli(p, rng):
    return (rng.random(p.shape) < p).astype(np.float64)


def cd1_gradient(rbm, batch, rng):
    """CD-1 estimate of the log-likelihood gradient for (W, b_vis, b_hid).

    Also returns the batch's reconstruction probabilities p(v|h).
    """
    v = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    _check_unit_interval(v)
    n = v.shape[0]
    ph = rbm.hidden_probs(v)
    h = _bernoulli(ph, rng)
    pv = rbm.visible_probs(h)
    v1 = _bernoulli(pv, rng)
    ph1 = rbm.hidden_probs(v1)
    dW = (v.T @ ph - v1.T @ ph1) / n
    db_vis = (v - v1).mean(axis=0)
    db_hid = (ph - ph1).mean(axis=0)
    return (dW, db_vis, db_hid), pv


def reconstruction_error(rbm, data, rng):
    h = _bernoulli(rbm.hidden_probs(data), rng)
    return float(((data - rbm.visible_probs(h)) ** 2).mean())


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_rbm(rbm, data, epochs=20, lr=1e-3, seed=0, batch_size=32):
    """Adam ascent on the CD-1 gradient; returns (params, TrainLog)."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("train_rbm needs data")
    _check_unit_interval(data)
    rng = np.random.default_rng(seed)
    history = TrainLog(reconstruction_error(rbm, data, rng))
    params = [a.copy() for a in rbm.arrays()]
    state = AdamState.zeros_like(params)
    cur = RbmParams(*params)
    for _ in range(epochs):
        errs = []
        for idx in _batches(len(data), batch_size, rng):
            g, pv = cd1_gradient(cur, data[idx], rng)
            errs.append(float(((data[idx] - pv) ** 2).mean()) * len(idx))
            state, params = adam_step(state, params, [-x for x in g], lr)
            cur = RbmParams(*params)
        history.epoch_errors.append(sum(errs) / len(data))
    return cur, history


def _dae_loss(arrays, x, xc):
    y = ad.sigmoid(ad.add(ad.matmul(xc, arrays[0]), arrays[1]))
    z = ad.sigmoid(ad.add(ad.matmul(y, arrays[2]), arrays[3]))
    diff = ad.sub(z, x)
    return ad.mean(ad.mul(diff, diff))


def corrupt(x, rate, rng):
    """Masking noise: zero each entry independently with probability ``rate``."""
    if rate == 0.0:
        return x.copy()
    return x * (rng.random(x.shape) >= rate)


def dae_loss_and_grad(dae, batch, rng):
    """Mean squared reconstruction error of a corrupted batch and its gradient."""
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    xc = corrupt(x, dae.corruption_rate, rng)
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in dae.arrays()]
    value = _dae_loss(leaves, x, xc)
    return float(value.value), dae.with_arrays(tape.gradient(value, leaves))


def train_dae(dae, data, epochs=20, lr=1e-5, seed=0, batch_size=32):
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    rng = np.random.default_rng(seed)
    x0 = corrupt(data, dae.corruption_rate, rng)
    history = TrainLog(float(_dae_loss(dae.arrays(), data, x0)))
    params = [a.copy() for a in dae.arrays()]
    state = AdamState.zeros_like(params)
    cur = dae
    for _ in range(epochs):
        total = 0.0
        for idx in _batches(len(data), batch_size, rng):
            value, g = dae_loss_and_grad(cur, data[idx], rng)
            total += value * len(idx)
            state, params = adam_step(state, params, g.arrays(), lr)
            cur = dae.with_arrays(params)
        history.epoch_errors.append(total / len(data))
    return cur, history


def _child_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def greedy_pretrain(data, config=None, seed=0):
    """Train RBM1 on data, RBM2 on RBM1 activations, the DAE on RBM2 activations.

    Returns ``(PretrainStack, f_0)`` where f_0 has a fresh random output head.
    """
    config = config or PretrainConfig()
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("greedy_pretrain needs data")
    m_in = data.shape[1]
    h1, h2, h3 = config.hidden
    if h1 < m_in or h2 < h1:
        raise ConfigError(f"hidden sizes must not shrink through the RBMs: {m_in} -> {h1} -> {h2}")
    s_init, s_rbm1, s_rbm2, s_dae, s_head = _child_seeds(seed, 5)
    init_rng = np.random.default_rng(s_init)
    rbm1 = RbmParams.init(m_in, h1, init_rng)
    rbm2 = RbmParams.init(h1, h2, init_rng)
    dae = DaeParams.init(h2, h3, init_rng, config.corruption_rate)

    rbm1, log1 = train_rbm(rbm1, data, config.rbm_epochs, config.rbm_lr, s_rbm1, config.batch_size)
    a1 = rbm1.hidden_probs(data)
    rbm2, log2 = train_rbm(rbm2, a1, config.rbm_epochs, config.rbm_lr, s_rbm2, config.batch_size)
    a2 = rbm2.hidden_probs(a1)
    dae, log3 = train_dae(dae, a2, config.dae_epochs, config.dae_lr, s_dae, config.batch_size)
    log.info("pretraining done: rbm1 %.4f, rbm2 %.4f, dae %.6f",
             log1.epoch_errors[-1] if log1.epoch_errors else log1.initial_error,
             log2.epoch_errors[-1] if log2.epoch_errors else log2.initial_error,
             log3.epoch_errors[-1] if log3.epoch_errors else log3.initial_error)

    stack = PretrainStack(rbm1, rbm2, dae, (m_in, h1, h2, h3), {"rbm1": log1, "rbm2": log2, "dae": log3})
    head = glorot_layer(h3, 1, np.random.default_rng(s_head))
    return stack, stack.export(head)
