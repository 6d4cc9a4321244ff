import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_confusion, pair_count_auc
from lsmeta.coremath import Layer, MlpParams, init_mlp
from lsmeta.errors import ConfigError, PipelineError
from lsmeta.evaluate import (
    ConfusionCounts,
    ExperimentConfig,
    confusion,
    metrics,
    mode_split,
    predict_lsm,
    quantize_levels,
    roc_auc,
    run_experiment,
    run_statistics,
    write_levels_pgm,
    write_metrics_csv,
    write_roc_csv,
    write_runs_csv,
)
from lsmeta.geodata import build_stack
from lsmeta.metalearn import MetaConfig, SupervisedConfig
from lsmeta.pipeline import prepare_region
from lsmeta.segmentation import SlicConfig
from lsmeta.synth import SyntheticSpec, generate


def constant_model(p, n_in=2):
    return MlpParams((Layer(np.zeros((n_in, 1)), np.array([np.log(p / (1 - p))]), "identity"),))


# -- prediction map --------------------------------------------------------


def test_single_block_constant_model():
    labels = np.zeros((3, 4), dtype=np.int64)
    valid = np.ones((3, 4), bool)
    m = predict_lsm(labels, {0: constant_model(0.5)}, constant_model(0.2), np.random.default_rng(0).random((3, 4, 2)), valid)
    assert np.allclose(m.values, 0.5, atol=1e-15)


def test_two_blocks_recolour_label_raster():
    labels = np.array([[0, 0, 1], [0, 1, 1]])
    valid = np.ones((2, 3), bool)
    m = predict_lsm(labels, {0: constant_model(0.1), 1: constant_model(0.9)}, constant_model(0.5),
                    np.zeros((2, 3, 2)), valid)
    assert np.allclose(m.values, np.where(labels == 0, 0.1, 0.9), atol=1e-15)


def test_fallback_and_nodata():
    labels = np.array([[0, 1], [1, -1]])
    valid = labels >= 0
    m = predict_lsm(labels, {0: constant_model(0.9)}, constant_model(0.3), np.zeros((2, 2, 2)), valid)
    assert m.values[0, 1] == pytest.approx(0.3) and np.isnan(m.values[1, 1])
    assert m.skip_mask.tolist() == [[False, False], [False, True]]


def test_valid_cell_without_block_is_internal_error():
    labels = np.array([[0, -1]])
    with pytest.raises(PipelineError):
        predict_lsm(labels, {}, constant_model(0.5), np.zeros((1, 2, 2)), np.ones((1, 2), bool))


# -- levels ----------------------------------------------------------------


def test_levels_1_to_8():
    assert quantize_levels(np.arange(1, 9)).tolist() == [1, 1, 2, 2, 3, 3, 4, 4]


def test_levels_1_to_10_bin_sizes():
    assert np.bincount(quantize_levels(np.arange(1, 11)), minlength=5)[1:].tolist() == [3, 2, 3, 2]


def test_levels_all_equal(caplog):
    with caplog.at_level(logging.WARNING):
        out = quantize_levels(np.full(9, 0.3))
    assert out.tolist() == [1] * 9
    assert "degenerate" in caplog.text


def test_levels_need_four_values():
    with pytest.raises(ValueError):
        quantize_levels([0.1, 0.2, 0.3])


@given(st.lists(st.floats(0, 1), min_size=4, max_size=200, unique=True))
def test_distinct_values_give_near_equal_bins(values):
    counts = np.bincount(quantize_levels(values), minlength=5)[1:]
    assert counts.max() - counts.min() <= 1


@given(st.lists(st.floats(0, 1), min_size=4, max_size=100))
def test_levels_monotone_in_value(values):
    lv = quantize_levels(values)
    order = np.argsort(values, kind="stable")
    assert np.all(np.diff(lv[order]) >= 0)
    assert set(lv.tolist()) <= {1, 2, 3, 4}


# -- metrics ---------------------------------------------------------------


def test_metrics_example():
    acc, prec, rec, f1 = metrics(ConfusionCounts(3, 4, 1, 2))
    assert (acc, prec, rec) == (0.7, 0.75, 0.6)
    assert f1 == pytest.approx(6 / 9, abs=1e-15)


def test_metrics_edge_cases():
    assert metrics(ConfusionCounts(7, 0, 0, 0)) == (1.0, 1.0, 1.0, 1.0)
    acc, prec, rec, f1 = metrics(ConfusionCounts(0, 0, 5, 0))
    assert (acc, prec, rec, f1) == (0.0, 0.0, None, None)
    assert metrics(ConfusionCounts(0, 0, 0, 0)) == (None, None, None, None)


def test_confusion_threshold_is_inclusive():
    c = confusion([0.5, 0.49, 0.7, 0.1], [1, 1, 0, 0])
    assert (c.tp, c.tn, c.fp, c.fn) == (1, 1, 1, 1)


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_confusion_matches_brute_force(pairs):
    s, y = zip(*pairs)
    c = confusion(np.array(s), np.array(y))
    tp, tn, fp, fn = brute_confusion(s, y)
    assert (c.tp, c.tn, c.fp, c.fn) == (tp, tn, fp, fn)
    acc, prec, rec, f1 = metrics(c)
    assert acc == (tp + tn) / len(s)
    assert prec == (tp / (tp + fp) if tp + fp else None)
    assert rec == (tp / (tp + fn) if tp + fn else None)
    if prec is not None and rec is not None:
        assert f1 == 2 * tp / (2 * tp + fp + fn)


# -- ROC -------------------------------------------------------------------


def test_auc_hand_case():
    assert roc_auc([0.9, 0.4, 0.6, 0.2], [1, 1, 0, 0]).auc == 0.75


def test_auc_separated_and_tied():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    curve = roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1])
    assert curve.auc == 0.5
    assert curve.fpr.tolist() == [0.0, 1.0] and curve.tpr.tolist() == [0.0, 1.0]


def test_roc_curve_shape():
    c = roc_auc([0.9, 0.4, 0.6, 0.2], [1, 1, 0, 0])
    assert c.thresholds[0] == np.inf
    assert c.fpr.tolist() == [0.0, 0.0, 0.5, 0.5, 1.0]
    assert c.tpr.tolist() == [0.0, 0.5, 0.5, 1.0, 1.0]


def test_auc_single_class():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@given(st.lists(st.tuples(st.sampled_from(np.linspace(0, 1, 11).tolist()) | st.floats(0, 1), st.integers(0, 1)),
                min_size=2, max_size=300))
def test_auc_equals_pair_counting(pairs):
    s, y = zip(*pairs)
    if len(set(y)) < 2:
        return
    assert abs(roc_auc(np.array(s), np.array(y)).auc - pair_count_auc(s, y)) <= 1e-12


# -- statistics ------------------------------------------------------------


def test_run_statistics():
    st_ = run_statistics([0.7, 0.9, 0.8])
    assert st_.accuracies == [0.7, 0.8, 0.9]
    assert st_.mean == pytest.approx(0.8) and st_.std == pytest.approx(np.sqrt(2 / 300))
    one = run_statistics([0.6])
    assert (one.std, one.min, one.max, one.mean) == (0.0, 0.6, 0.6, 0.6)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_run_statistics_bounds(acc):
    s = run_statistics(acc)
    assert s.min <= s.mean + 1e-12 and s.mean <= s.max + 1e-12 and s.std >= 0


# -- experiments -----------------------------------------------------------


def small_region(name, seed):
    spec = SyntheticSpec(rows=48, cols=48, n_positive=120, n_negative=120, seed=seed)
    syn = generate(spec)
    stack = build_stack(list(syn.bands.items()))
    return prepare_region(name, stack, syn.points, SlicConfig(n_blocks=16))


@pytest.fixture(scope="module")
def regions():
    return [small_region("r1", 1), small_region("r2", 2)]


@pytest.fixture(scope="module")
def f0():
    return init_mlp([8, 6, 1], np.random.default_rng(0))


FAST = ExperimentConfig(meta=MetaConfig(meta_epochs=10), supervised=SupervisedConfig(epochs=5), min_task_size=6)


def test_mode_splits(regions):
    r1, r2 = regions
    ids1 = {t.task_id for t in r1.tasks}
    ids2 = {t.task_id for t in r2.tasks}
    for mode in "ABCD":
        train, test = mode_split(mode, regions, 0.6, seed=3)
        tr, te = {t.task_id for t in train}, {t.task_id for t in test}
        assert not tr & te
        if mode == "A":
            assert tr | te == ids1
        if mode == "B":
            assert tr == ids1 and te == ids2
        if mode == "C":
            assert te < ids1 and tr & ids2 and tr | te >= ids1
        if mode == "D":
            assert te < ids2 and tr >= ids1 and tr | te == ids1 | ids2


def test_modes_need_regions(regions, f0):
    with pytest.raises(ConfigError):
        run_experiment("B", regions[:1], f0, 5, 1, 0, FAST)
    with pytest.raises(ConfigError):
        run_experiment("E", regions, f0, 5, 1, 0, FAST)


def test_repeats_one_has_zero_std(regions, f0):
    res = run_experiment("A", regions[:1], f0, 5, 1, 0, FAST)
    s = res.stats
    assert s.std == 0.0 and s.min == s.max == s.mean


@pytest.mark.parametrize("method", ["meta", "global_mlp", "unadapted"])
def test_experiment_reproducible(regions, f0, method, tmp_path):
    cfg = ExperimentConfig(**{**FAST.__dict__, "method": method})
    a = run_experiment("C", regions, f0, 3, 2, 7, cfg)
    b = run_experiment("C", regions, f0, 3, 2, 7, cfg)
    write_runs_csv(tmp_path / "a.csv", a)
    write_runs_csv(tmp_path / "b.csv", b)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert all(r.counts.total > 0 for r in a.runs)


def test_parallel_repeats_match_serial(regions, f0):
    a = run_experiment("A", regions[:1], f0, 5, 3, 1, FAST, workers=1)
    b = run_experiment("A", regions[:1], f0, 5, 3, 1, FAST, workers=2)
    assert a.stats == b.stats


# -- writers ---------------------------------------------------------------


def test_writers(tmp_path):
    write_metrics_csv(tmp_path / "m.csv", [("all", ConfusionCounts(3, 4, 1, 2))])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("scope,") and "0.700000" in lines[1]
    write_roc_csv(tmp_path / "r.csv", [(0, roc_auc([0.9, 0.4, 0.6, 0.2], [1, 1, 0, 0]))])
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 6
    write_levels_pgm(tmp_path / "l.pgm", np.array([[1, 2], [3, 4], [0, 1]]))
    data = (tmp_path / "l.pgm").read_bytes()
    assert data.startswith(b"P5\n2 3\n255\n")
    assert list(data[-6:]) == [255, 170, 85, 0, 255, 255]
