"""Block-wise susceptibility prediction and the evaluation harness."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coremath import predict_proba
from .errors import ConfigError, PipelineError
from .metadata import split_all, split_tasks
from .metalearn import MetaConfig, SupervisedConfig, few_shot_adapt, global_mlp, meta_train

log = logging.getLogger(__name__)

MODES = ("A", "B", "C", "D")


# -- susceptibility maps ---------------------------------------------------


@dataclass
class SusceptibilityMap:
    values: np.ndarray  # (rows, cols) probabilities, NaN where skipped
    levels: np.ndarray  # (rows, cols) int 1..4, 0 where skipped
    skip_mask: np.ndarray


def predict_lsm(labels, models, fallback, cube, valid):
    """Probability per cell from the model of the block that owns it.

    ``labels`` is the block-id raster, ``models`` maps block id -> MlpParams;
    blocks without an entry use ``fallback``.  ``cube`` holds the normalised
    (unweighted) features.
    """
    rows, cols = labels.shape
    if np.any(valid & (labels < 0)):
        raise PipelineError("a valid cell has no block id; the segmentation is not a partition")
    out = np.full((rows, cols), np.nan)
    flat_lab = labels.reshape(-1)
    flat_valid = valid.reshape(-1)
    feats = cube.reshape(-1, cube.shape[-1])
    for k in np.unique(flat_lab[flat_valid]):
        sel = np.flatnonzero(flat_valid & (flat_lab == k))
        model = models.get(int(k), fallback)
        out.reshape(-1)[sel] = predict_proba(model, feats[sel])
    levels = np.zeros((rows, cols), dtype=np.int64)
    if valid.sum() >= 4:
        levels[valid] = quantize_levels(out[valid])
    return SusceptibilityMap(out, levels, ~valid)


def nearest_rank(sorted_values, pct):
    n = len(sorted_values)
    rank = max(1, int(math.ceil(pct / 100.0 * n - 1e-12)))
    return sorted_values[rank - 1]


def quantize_levels(values):
    """Levels 1-4 split at the nearest-rank 25/50/75th percentiles.

    A value equal to an edge goes to the lower level.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size < 4:
        raise ValueError("quantize_levels needs at least 4 values")
    s = np.sort(v)
    edges = [nearest_rank(s, p) for p in (25, 50, 75)]
    if edges[0] == edges[-1]:
        log.warning("susceptibility values are degenerate: quartile edges coincide at %g", edges[0])
    return 1 + np.searchsorted(np.array(edges), v, side="left")


# -- metrics ---------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0
    threshold: float = 0.5

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


def confusion(scores, labels, threshold=0.5):
    """Counts with ``score >= threshold`` predicted positive."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    pred = s >= threshold
    return ConfusionCounts(
        int(np.sum(pred & (y == 1))),
        int(np.sum(~pred & (y == 0))),
        int(np.sum(pred & (y == 0))),
        int(np.sum(~pred & (y == 1))),
        threshold,
    )


def _ratio(num, den):
    return None if den == 0 else num / den


def metrics(counts):
    """(accuracy, precision, recall, f1); an entry is None when undefined.

    F1 is undefined whenever precision or recall is.
    """
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    prec, rec = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    f1 = None if prec is None or rec is None else _ratio(2 * tp, 2 * tp + fp + fn)
    return _ratio(tp + tn, tp + tn + fp + fn), prec, rec, f1


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[0] = +inf (nothing predicted positive)
    auc: float


def roc_auc(scores, labels):
    """ROC points from a sweep over the distinct scores, and the trapezoid AUC.

    Equal scores form one sweep step, so ties count half, matching the
    Mann-Whitney statistic.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=np.int64)
    ends = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(y == 1)[ends]
    fp = np.cumsum(y == 0)[ends]
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thr = np.concatenate([[np.inf], s[ends]])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thr, auc)


@dataclass
class RunStatistics:
    accuracies: list
    mean: float
    std: float
    min: float
    max: float


def run_statistics(accuracies):
    """Mean, population standard deviation and range of per-run OA."""
    a = np.sort(np.asarray(accuracies, dtype=np.float64))
    if a.size == 0:
        raise ValueError("no runs")
    return RunStatistics(a.tolist(), float(a.mean()), float(a.std()), float(a.min()), float(a.max()))


# -- experiments -----------------------------------------------------------


@dataclass
class ExperimentConfig:
    method: str = "meta"  # meta | global_mlp | unadapted
    meta: MetaConfig = field(default_factory=MetaConfig)
    supervised: SupervisedConfig = field(default_factory=SupervisedConfig)
    split_fraction: float = 0.6
    min_task_size: int = 10
    threshold: float = 0.5


@dataclass
class RunResult:
    run: int
    seed: int
    counts: ConfusionCounts
    accuracy: float
    precision: float | None
    recall: float | None
    f1: float | None
    roc: RocCurve | None
    n_train_tasks: int
    n_test_tasks: int


@dataclass
class ExperimentResult:
    mode: str
    k_shot: object
    method: str
    stats: RunStatistics
    runs: list


def derive_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def mode_split(mode, regions, fraction, seed):
    """(train_tasks, test_tasks) for experiment mode A-D.

    A: part of region 1 -> rest of region 1.  B: all of region 1 -> all of
    region 2.  C: parts of regions 1 and 2 -> rest of region 1.  D: all of
    region 1 plus part of region 2 -> rest of region 2.
    """
    _check_mode(mode, regions)
    r1 = regions[0]
    s1 = split_tasks(r1.tasks, fraction, derive_seed(seed, 1))
    if mode == "A":
        return s1.train_tasks, s1.test_tasks
    r2 = regions[1]
    s2 = split_tasks(r2.tasks, fraction, derive_seed(seed, 2))
    if mode == "B":
        return list(r1.tasks), list(r2.tasks)
    if mode == "C":
        return s1.train_tasks + s2.train_tasks, s1.test_tasks
    return list(r1.tasks) + s2.train_tasks, s2.test_tasks


def _check_mode(mode, regions):
    need = 1 if mode == "A" else 2
    if mode not in MODES:
        raise ConfigError(f"unknown experiment mode {mode!r}")
    if len(regions) < need:
        raise ConfigError(f"experiment mode {mode} needs {need} regions, {len(regions)} configured")


def run_once(mode, regions, f0, k_shot, config, seed, run=0):
    train, test = mode_split(mode, regions, config.split_fraction, seed)
    test = [t for t in test if t.n >= config.min_task_size]
    if not test:
        raise PipelineError(f"no test task with >= {config.min_task_size} samples in mode {mode}")
    train = split_all(train, k_shot, derive_seed(seed, 3), skip_small=True)
    test = split_all(test, k_shot, derive_seed(seed, 4))
    if not train and config.method == "meta":
        raise PipelineError("no training task is large enough for the requested k_shot")
    scores, labels = [], []
    if config.method == "meta":
        mc = MetaConfig(**{**config.meta.__dict__, "seed": derive_seed(seed, 5)})
        inter = meta_train(f0, train, mc, n_total=sum(t.n for t in train)).params
        for t in test:
            adapted = few_shot_adapt(inter, t.support_set(), mc.alpha, mc.inner_steps)
            Xq, yq = t.query_set()
            scores.append(predict_proba(adapted, Xq))
            labels.append(yq)
    elif config.method == "unadapted":
        for t in test:
            Xq, yq = t.query_set()
            scores.append(predict_proba(f0, Xq))
            labels.append(yq)
    elif config.method == "global_mlp":
        X = np.concatenate([t.X for t in train] + [t.support_set()[0] for t in test])
        y = np.concatenate([t.y for t in train] + [t.support_set()[1] for t in test]).astype(np.float64)
        sc = SupervisedConfig(**{**config.supervised.__dict__, "seed": derive_seed(seed, 6)})
        model = global_mlp(f0.dims, X, y, sc)
        for t in test:
            Xq, yq = t.query_set()
            scores.append(predict_proba(model, Xq))
            labels.append(yq)
    else:
        raise ConfigError(f"unknown method {config.method!r}")
    s = np.concatenate(scores)
    y = np.concatenate(labels).astype(np.int64)
    counts = confusion(s, y, config.threshold)
    acc, prec, rec, f1 = metrics(counts)
    roc = roc_auc(s, y) if 0 < y.sum() < y.size else None
    return RunResult(run, seed, counts, acc, prec, rec, f1, roc, len(train), len(test))


def _run_job(args):
    return run_once(*args)


def run_experiment(mode, regions, f0, k_shot, repeats=10, seed=0, config=None, workers=1):
    """Repeat a mode with derived seeds and aggregate the overall accuracies.

    Repeats are independent; with ``workers > 1`` they run in separate
    processes and the result is identical to the serial one.
    """
    config = config or ExperimentConfig()
    _check_mode(mode, regions)
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    jobs = [(mode, regions, f0, k_shot, config, derive_seed(seed, 100 + r), r) for r in range(repeats)]
    if workers > 1 and repeats > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, repeats)) as pool:
            runs = list(pool.map(_run_job, jobs))
    else:
        runs = [_run_job(j) for j in jobs]
    runs.sort(key=lambda r: r.run)
    return ExperimentResult(mode, k_shot, config.method, run_statistics([r.accuracy for r in runs]), runs)


# -- output ----------------------------------------------------------------


def _f(v, digits=6):
    return "" if v is None else f"{v:.{digits}f}"


def write_runs_csv(path, result):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "k_shot", "method", "run", "seed", "tp", "tn", "fp", "fn",
                    "accuracy", "precision", "recall", "f1", "auc", "n_train_tasks", "n_test_tasks"])
        for r in result.runs:
            c = r.counts
            w.writerow([result.mode, result.k_shot, result.method, r.run, r.seed, c.tp, c.tn, c.fp, c.fn,
                        _f(r.accuracy), _f(r.precision), _f(r.recall), _f(r.f1),
                        _f(r.roc.auc if r.roc else None), r.n_train_tasks, r.n_test_tasks])


def write_stats_csv(path, results):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "k_shot", "method", "runs", "mean_oa", "std_oa", "min_oa", "max_oa"])
        for res in results:
            s = res.stats
            w.writerow([res.mode, res.k_shot, res.method, len(s.accuracies),
                        _f(s.mean), _f(s.std), _f(s.min), _f(s.max)])


def write_roc_csv(path, curves):
    """``curves`` is a list of (run, RocCurve)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "fpr", "tpr", "threshold"])
        for run, c in curves:
            for a, b, t in zip(c.fpr, c.tpr, c.thresholds):
                w.writerow([run, _f(a), _f(b), "inf" if np.isinf(t) else _f(t)])


def write_metrics_csv(path, rows):
    """``rows``: list of (name, ConfusionCounts)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scope", "tp", "tn", "fp", "fn", "accuracy", "precision", "recall", "f1"])
        for name, c in rows:
            w.writerow([name, c.tp, c.tn, c.fp, c.fn, *(_f(v) for v in metrics(c))])


PGM_GRAYS = (255, 170, 85, 0)  # level 1 (low) .. 4 (high); skipped cells are white


def write_levels_pgm(path, levels):
    rows, cols = levels.shape
    lut = np.array((255,) + PGM_GRAYS, dtype=np.uint8)
    img = lut[np.clip(levels, 0, 4)]
    header = f"P5\n{cols} {rows}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())
