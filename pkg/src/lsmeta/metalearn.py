"""Meta-training of the intermediate model and per-block few-shot adaptation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coremath import SECOND_ORDER, AdamState, MlpParams, adam_step, adapt, loss, mlp_loss
from .coremath.maml import mlp_meta_grad_fast
from .coremath.mlp import init_mlp
from .errors import DivergenceError
from .metadata import task_weights, uniform_weights

log = logging.getLogger(__name__)

SOFTMAX = "softmax"
UNIFORM = "uniform"


@dataclass
class MetaConfig:
    alpha: float = 0.1
    inner_steps: int = 5
    meta_lr: float = 1e-4
    meta_epochs: int = 5000
    task_batch_size: int = 4
    grad_mode: str = SECOND_ORDER
    weighting: str = SOFTMAX
    seed: int = 0

    def validate(self):
        from .errors import ConfigError

        errors = []
        if not self.alpha > 0:
            errors.append("alpha must be > 0")
        if self.inner_steps < 1:
            errors.append("inner_steps must be >= 1")
        if self.meta_epochs < 0:
            errors.append("meta_epochs must be >= 0")
        if self.task_batch_size < 1:
            errors.append("task_batch_size must be >= 1")
        if self.grad_mode not in ("second_order", "first_order"):
            errors.append(f"unknown grad_mode {self.grad_mode!r}")
        if self.weighting not in (SOFTMAX, UNIFORM):
            errors.append(f"unknown weighting {self.weighting!r}")
        if errors:
            raise ConfigError("; ".join(errors))


@dataclass
class EpochRecord:
    epoch: int
    meta_loss: float
    task_ids: list


@dataclass
class IntermediateModel:
    params: MlpParams
    log: list = field(default_factory=list)

    def losses(self):
        return np.array([r.meta_loss for r in self.log])


def inner_adapt(params, support, alpha=0.1, steps=5):
    """``steps`` full-batch SGD steps on the support cross-entropy."""
    X, y = support
    if len(y) == 0:
        raise ValueError("inner_adapt needs a non-empty support set")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    arrays = adapt(params.arrays(), (X, y), mlp_loss(params.activations), alpha, steps)
    adapted = params.with_arrays(arrays)
    if steps > 0:
        before, after = loss(params, X, y), loss(adapted, X, y)
        if after > before:
            log.warning("support loss rose during adaptation (%.4g -> %.4g); alpha=%g may be too large",
                        before, after, alpha)
    return adapted


def few_shot_adapt(params, support, alpha=0.1, steps=5):
    """Specialise the intermediate model to one block."""
    return inner_adapt(params, support, alpha, steps)


def meta_train(f0, train_tasks, config, n_total=None, on_epoch=None):
    """Optimise the shared initialisation against the weighted query losses.

    Each epoch samples ``task_batch_size`` distinct tasks (all of them if
    fewer), weights them, adapts each on its support set and takes one Adam
    step on the weighted query loss.
    """
    config.validate()
    tasks = list(train_tasks)
    if not tasks:
        raise ValueError("meta_train needs at least one training task")
    for t in tasks:
        if t.support is None:
            raise ValueError(f"task {t.task_id} has no support/query split")
    if n_total is None:
        n_total = sum(t.n for t in tasks)
    rng = np.random.default_rng(config.seed)
    params = f0
    state = AdamState.zeros_like(params)
    history = []
    batch = min(config.task_batch_size, len(tasks))
    for epoch in range(config.meta_epochs):
        pick = np.sort(rng.choice(len(tasks), size=batch, replace=False))
        chosen = [tasks[i] for i in pick]
        if config.weighting == SOFTMAX:
            w = task_weights(chosen, n_total)
        else:
            w = uniform_weights(chosen)
        batch_tasks = [(t.support_set(), t.query_set(), float(wk)) for t, wk in zip(chosen, w)]
        value, g = mlp_meta_grad_fast(params, batch_tasks, config.alpha, config.inner_steps, config.grad_mode)
        if not math.isfinite(value) or not all(np.all(np.isfinite(x)) for x in g):
            raise DivergenceError(
                f"meta-loss became non-finite at epoch {epoch} (value={value}, tasks={[t.task_id for t in chosen]}, "
                f"meta_lr={config.meta_lr}, alpha={config.alpha})"
            )
        state, params = adam_step(state, params, g, config.meta_lr)
        rec = EpochRecord(epoch, value, [t.task_id for t in chosen])
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return IntermediateModel(params, history)


def write_log_csv(path, history):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "meta_loss", "task_ids"])
        for r in history:
            w.writerow([r.epoch, f"{r.meta_loss:.10f}", " ".join(r.task_ids)])


@dataclass
class SupervisedConfig:
    epochs: int = 300
    lr: float = 1e-2
    batch_size: int = 64
    seed: int = 0


def train_supervised(params, X, y, config=None):
    """Plain mini-batch Adam on the cross-entropy (the global-MLP control)."""
    from .coremath import grad

    config = config or SupervisedConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like(params)
    for _ in range(config.epochs):
        order = rng.permutation(len(y))
        for i in range(0, len(y), config.batch_size):
            idx = order[i:i + config.batch_size]
            g = grad(params, X[idx], y[idx])
            state, params = adam_step(state, params, g, config.lr)
    return params


def global_mlp(dims, X, y, config=None):
    """Randomly initialised MLP trained on all given samples."""
    config = config or SupervisedConfig()
    return train_supervised(init_mlp(dims, np.random.default_rng(config.seed)), X, y, config)


__all__ = [
    "MetaConfig",
    "IntermediateModel",
    "EpochRecord",
    "SupervisedConfig",
    "inner_adapt",
    "few_shot_adapt",
    "meta_train",
    "train_supervised",
    "global_mlp",
    "write_log_csv",
]
