import logging

import numpy as np
import pytest

from lsmeta.coremath import init_mlp, loss, predict_proba
from lsmeta.coremath.maml import mlp_meta_grad
from lsmeta.errors import ConfigError, DivergenceError
from lsmeta.metadata import MetaTask, split_support_query
from lsmeta.metalearn import (
    SOFTMAX,
    UNIFORM,
    MetaConfig,
    few_shot_adapt,
    global_mlp,
    inner_adapt,
    meta_train,
    write_log_csv,
)
from lsmeta.pretrain import PretrainConfig, greedy_pretrain

SLOPE, DRAINAGE = 0, 1


def make_task(X, y, tid, k=None, seed=0, same=False):
    t = MetaTask(tid, 0, np.arange(len(y)), X, np.asarray(y, dtype=np.int64))
    if same:
        idx = np.arange(len(y))
        t.support, t.query = idx, idx
        return t
    return split_support_query(t, k, seed)


def random_task(rng, n, tid, k=5, dims=4):
    X = rng.random((n, dims))
    y = (X[:, 0] > 0.5).astype(int)
    y[:2] = [0, 1]
    return make_task(X, y, tid, k, seed=rng.integers(1 << 30))


def two_rule_tasks(n_tasks, seed, n=30, bands=8):
    """Tasks labelled by one of two rules: slope > 0.6 or drainage < 0.4."""
    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(n_tasks):
        rule = "A" if i % 2 == 0 else "B"
        while True:
            X = rng.random((n, bands))
            y = (X[:, SLOPE] > 0.6) if rule == "A" else (X[:, DRAINAGE] < 0.4)
            if 2 <= y.sum() <= n - 2:
                break
        tasks.append((rule, make_task(X, y.astype(int), f"{rule}{i}", 5, seed=i)))
    return tasks


def accuracy(params, X, y):
    return float(np.mean((predict_proba(params, X) >= 0.5) == (y == 1)))


# -- inner loop ------------------------------------------------------------


def test_inner_adapt_zero_steps_is_identity(rng):
    p = init_mlp([3, 4, 1], rng)
    out = inner_adapt(p, (rng.random((5, 3)), np.array([0, 1, 0, 1, 1])), steps=0)
    assert all(np.array_equal(a, b) for a, b in zip(out.arrays(), p.arrays()))


def test_inner_adapt_empty_support(rng):
    with pytest.raises(ValueError):
        inner_adapt(init_mlp([3, 1], rng), (np.zeros((0, 3)), np.zeros(0)))


def test_inner_adapt_lowers_support_loss(rng):
    p = init_mlp([4, 6, 1], rng)
    X, y = rng.random((10, 4)), (rng.random(10) > 0.5).astype(float)
    assert loss(inner_adapt(p, (X, y)), X, y) <= loss(p, X, y)


def test_inner_adapt_warns_when_loss_rises(rng, caplog):
    p = init_mlp([4, 6, 1], rng)
    X, y = rng.random((10, 4)), (rng.random(10) > 0.5).astype(float)
    with caplog.at_level(logging.WARNING):
        inner_adapt(p, (X, y), alpha=1e4, steps=3)
    assert "support loss rose" in caplog.text


def test_k1_adaptation_raises_probability_of_its_sample(rng):
    p = init_mlp([4, 8, 1], rng)
    x = rng.random((1, 4))
    out = few_shot_adapt(p, (x, np.array([1.0])))
    assert predict_proba(out, x)[0] > predict_proba(p, x)[0]
    assert out.dims == p.dims and out.activations == p.activations


# -- meta-training ---------------------------------------------------------


def test_zero_meta_epochs_returns_f0(rng):
    f0 = init_mlp([4, 5, 1], rng)
    model = meta_train(f0, [random_task(rng, 12, "a")], MetaConfig(meta_epochs=0))
    assert all(np.array_equal(a, b) for a, b in zip(model.params.arrays(), f0.arrays()))
    assert model.log == []


def test_meta_train_requires_tasks_and_splits(rng):
    f0 = init_mlp([4, 1], rng)
    with pytest.raises(ValueError):
        meta_train(f0, [], MetaConfig(meta_epochs=1))
    t = MetaTask("a", 0, np.arange(4), rng.random((4, 4)), np.array([0, 1, 0, 1]))
    with pytest.raises(ValueError):
        meta_train(f0, [t], MetaConfig(meta_epochs=1))


def test_meta_config_validation():
    for bad in (MetaConfig(alpha=0), MetaConfig(inner_steps=0), MetaConfig(task_batch_size=0),
                MetaConfig(grad_mode="x"), MetaConfig(weighting="x")):
        with pytest.raises(ConfigError):
            bad.validate()


def test_single_task_query_loss_trends_down(rng):
    X = rng.random((20, 4))
    y = (X[:, 0] + X[:, 1] > 1).astype(int)
    task = make_task(X, y, "t", same=True)
    model = meta_train(init_mlp([4, 8, 1], rng), [task], MetaConfig(meta_epochs=600))
    losses = model.losses()
    trailing = np.convolve(losses, np.ones(100) / 100, mode="valid")
    assert trailing[-1] < trailing[0]
    assert np.all(np.diff(trailing[::100]) < 0)


def test_equal_sizes_softmax_equals_uniform(rng):
    tasks = [random_task(rng, 12, str(i)) for i in range(6)]
    f0 = init_mlp([4, 5, 1], rng)
    a = meta_train(f0, tasks, MetaConfig(meta_epochs=20, weighting=SOFTMAX))
    b = meta_train(f0, tasks, MetaConfig(meta_epochs=20, weighting=UNIFORM))
    assert all(np.array_equal(x, y) for x, y in zip(a.params.arrays(), b.params.arrays()))


def test_weighted_gradient_is_mean_maml_gradient_for_equal_sizes(rng):
    tasks = [random_task(rng, 12, str(i)) for i in range(4)]
    f0 = init_mlp([4, 3, 1], rng)
    batch_w = [(t.support_set(), t.query_set(), 0.25) for t in tasks]
    _, g = mlp_meta_grad(f0, batch_w, 0.1, 5, "second_order")
    singles = [mlp_meta_grad(f0, [(t.support_set(), t.query_set(), 1.0)], 0.1, 5, "second_order")[1] for t in tasks]
    for i, gi in enumerate(g):
        assert np.allclose(gi, sum(s[i] for s in singles) / 4, rtol=1e-12, atol=1e-15)


def test_meta_train_reproducible(rng):
    tasks = [random_task(rng, 14, str(i)) for i in range(5)]
    f0 = init_mlp([4, 5, 1], rng)
    cfg = MetaConfig(meta_epochs=30, seed=3)
    a, b = meta_train(f0, tasks, cfg), meta_train(f0, tasks, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.params.arrays(), b.params.arrays()))
    assert [r.task_ids for r in a.log] == [r.task_ids for r in b.log]


def test_divergence_guard(rng):
    t = random_task(rng, 12, "bad")
    t.X[t.query[0], 0] = np.nan
    with pytest.raises(DivergenceError, match="bad"):
        meta_train(init_mlp([4, 3, 1], rng), [t], MetaConfig(meta_epochs=3))


def test_log_csv(tmp_path, rng):
    model = meta_train(init_mlp([4, 3, 1], rng), [random_task(rng, 12, "a")], MetaConfig(meta_epochs=3))
    write_log_csv(tmp_path / "log.csv", model.log)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,meta_loss,task_ids" and len(lines) == 4


def test_global_mlp_learns_linear_rule(rng):
    X = rng.random((300, 3))
    y = (X[:, 0] > 0.5).astype(float)
    assert accuracy(global_mlp([3, 8, 1], X, y), X, y) >= 0.9


# -- two-rule task family --------------------------------------------------


@pytest.fixture(scope="module")
def two_rule_result():
    train = two_rule_tasks(24, seed=1)
    test = two_rule_tasks(20, seed=2)
    pool = np.concatenate([t.X for _, t in train])
    _, f0 = greedy_pretrain(pool, PretrainConfig(), seed=0)
    model = meta_train(f0, [t for _, t in train], MetaConfig(seed=0))
    rows = []
    for rule, t in test:
        Xq, yq = t.query_set()
        adapted = few_shot_adapt(model.params, t.support_set())
        rows.append((rule, accuracy(adapted, Xq, yq), accuracy(model.params, Xq, yq),
                     loss(adapted, Xq, yq), loss(model.params, Xq, yq)))
    return rows


@pytest.mark.parametrize("rule", ["A", "B"])
def test_two_rule_adaptation_accuracy(two_rule_result, rule):
    adapted = np.mean([r[1] for r in two_rule_result if r[0] == rule])
    unadapted = np.mean([r[2] for r in two_rule_result if r[0] == rule])
    print(f"rule {rule}: adapted query OA {adapted:.3f}, unadapted {unadapted:.3f}")
    assert adapted >= 0.85
    assert unadapted <= 0.70


def test_adaptation_improves_query_loss_on_most_tasks(two_rule_result):
    improved = np.mean([r[3] < r[4] for r in two_rule_result])
    print(f"query loss improved on {improved:.0%} of held-out tasks")
    assert improved >= 0.9
