"""Meta-task construction: one task per block with enough labelled samples."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import PipelineError

HALF = "half"  # k_shot = floor(n_k / 2)


@dataclass
class MetaTask:
    task_id: str
    block_id: int
    sample_idx: np.ndarray  # indices into the region's SampleSet
    X: np.ndarray
    y: np.ndarray
    region: str = ""
    support: np.ndarray | None = None  # positions into sample_idx
    query: np.ndarray | None = None
    weight: float | None = None

    @property
    def n(self):
        return len(self.y)

    def class_counts(self):
        pos = int((self.y == 1).sum())
        return {"positives": pos, "negatives": int(self.n - pos)}

    def support_set(self):
        return self.X[self.support], self.y[self.support].astype(np.float64)

    def query_set(self):
        return self.X[self.query], self.y[self.query].astype(np.float64)


@dataclass
class MetaDatasets:
    train_tasks: list
    test_tasks: list
    n_total: int
    seed: int | None = None


@dataclass
class TaskBuild:
    tasks: list
    excluded: list = field(default_factory=list)


def build_tasks(seg, samples, min_per_class=1, region=""):
    """One MetaTask per block holding >= ``min_per_class`` samples of each class."""
    tasks, excluded = [], []
    for b in seg.blocks:
        idx = np.array([i for i in b.member_samples if samples.y[i] >= 0], dtype=np.int64)
        y = samples.y[idx]
        pos, neg = int((y == 1).sum()), int((y == 0).sum())
        if pos < min_per_class or neg < min_per_class:
            excluded.append({"block": b.id, "positives": pos, "negatives": neg})
            continue
        tid = f"{region}:{b.id}" if region else str(b.id)
        tasks.append(MetaTask(tid, b.id, idx, samples.X[idx], y.copy(), region))
    if not tasks:
        raise PipelineError("no block has enough labelled samples of both classes to form a task")
    return TaskBuild(tasks, excluded)


def split_tasks(tasks, fraction=0.6, seed=0):
    """Shuffle tasks and put the first floor(fraction * n) in the training set."""
    tasks = list(tasks)
    if len(tasks) < 2:
        raise ValueError("need at least 2 tasks to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(tasks))
    n_train = int(math.floor(fraction * len(tasks) + 1e-9))
    train = [tasks[i] for i in order[:n_train]]
    test = [tasks[i] for i in order[n_train:]]
    return MetaDatasets(train, test, sum(t.n for t in tasks), seed)


def resolve_k(k_shot, n):
    if k_shot == HALF:
        return n // 2
    return int(k_shot)


def split_support_query(task, k_shot, seed):
    """Draw a class-balanced support set of k_shot samples; the rest is the query.

    Classes are taken alternately (majority class first) from independently
    shuffled class lists; once one class runs out the other fills the
    remainder.
    """
    k = resolve_k(k_shot, task.n)
    if k < 1:
        raise ValueError(f"k_shot must be >= 1 (got {k} for a task of {task.n} samples)")
    if k >= task.n:
        raise ValueError(f"k_shot={k} leaves an empty query for a task of {task.n} samples")
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(task.y == 1)
    neg = np.flatnonzero(task.y == 0)
    pos = pos[rng.permutation(len(pos))]
    neg = neg[rng.permutation(len(neg))]
    first, second = (pos, neg) if len(pos) >= len(neg) else (neg, pos)
    chosen = []
    i = j = 0
    while len(chosen) < k:
        take_first = (len(chosen) % 2 == 0 and i < len(first)) or j >= len(second)
        if take_first:
            chosen.append(first[i])
            i += 1
        else:
            chosen.append(second[j])
            j += 1
    support = np.array(sorted(chosen), dtype=np.int64)
    query = np.setdiff1d(np.arange(task.n), support)
    return replace(task, support=support, query=query)


def task_weights(counts, n_total):
    """Softmax of n_k / n_total over a batch of tasks (or sample counts)."""
    n = np.array([t.n if isinstance(t, MetaTask) else t for t in counts], dtype=np.float64)
    if n.size == 0:
        raise ValueError("task_weights needs a non-empty batch")
    if not n_total > 0:
        raise ValueError("n_total must be positive")
    z = n / float(n_total)
    e = np.exp(z - z.max())
    return e / e.sum()


def uniform_weights(counts):
    k = len(counts)
    return np.full(k, 1.0 / k)


def task_seed(seed, task_index):
    return int(np.random.SeedSequence([int(seed), int(task_index)]).generate_state(1)[0])


def split_all(tasks, k_shot, seed, skip_small=False):
    """Support/query split of every task; tasks too small for k_shot are dropped if asked."""
    out = []
    for i, t in enumerate(tasks):
        k = resolve_k(k_shot, t.n)
        if k >= t.n or k < 1:
            if skip_small:
                continue
        out.append(split_support_query(t, k_shot, task_seed(seed, i)))
    return out


def manifest(datasets, seed, k_shot):
    """JSON-ready description of the task split."""

    def entry(t, part):
        d = {"task": t.task_id, "block": t.block_id, "region": t.region, "part": part, "n": t.n}
        d.update(t.class_counts())
        if t.support is not None:
            d["support"] = t.sample_idx[t.support].tolist()
            d["query"] = t.sample_idx[t.query].tolist()
        return d

    return {
        "seed": seed,
        "k_shot": k_shot,
        "n_total": datasets.n_total,
        "tasks": [entry(t, "train") for t in datasets.train_tasks]
        + [entry(t, "test") for t in datasets.test_tasks],
    }


def manifest_json(datasets, seed, k_shot):
    return json.dumps(manifest(datasets, seed, k_shot), indent=2, sort_keys=True)
