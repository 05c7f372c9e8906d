import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metainit.meta import (
    AdaptConfig,
    AugmentConfig,
    Episode,
    LeakageError,
    MetaConfig,
    augment_tasks,
    draw_episode_indices,
    fine_tune,
    inner_adapt,
    meta_objective,
    meta_train,
    original_tasks,
    outer_step,
    raw_augment,
    sample_episode,
    supervised_pretrain,
)
from metainit.model import LabeledBatch, ModelConfig, ParameterSet, backward, init_params, loss
from metainit.optim import MultiStepSchedule, adam_init
from metainit.tasks import Task, UtteranceRecord

LIN2 = ModelConfig(input_dim=1, layers=0, n_classes=2, output_bias=False)


def lin_params(w1, w2):
    return ParameterSet(LIN2, {"out.W": np.array([[w1, w2]])})


def lin_batch(xs, ys):
    return LabeledBatch(tuple(np.array([[x]]) for x in xs), tuple(np.array([y]) for y in ys))


def lin_grad_oracle(w, xs, ys):
    """Mean cross-entropy gradient of logits (w1 x, w2 x), derived by hand."""
    g = [0.0, 0.0]
    for x, y in zip(xs, ys):
        z = [w[0] * x, w[1] * x]
        m = max(z)
        e = [math.exp(v - m) for v in z]
        p = [v / sum(e) for v in e]
        for c in range(2):
            g[c] += (p[c] - (1.0 if c == y else 0.0)) * x
    return [v / len(xs) for v in g]


def fake_task(n, task_id="T"):
    return Task(task_id, [UtteranceRecord(f"{task_id}{i}", "s", task_id, "", 0) for i in range(n)])


# ------------------------------------------------------------ episodes


def test_episode_exact_partition():
    sup, que = draw_episode_indices(32, np.random.default_rng(0), 16)
    assert len(sup) == len(que) == 16
    assert set(sup) | set(que) == set(range(32))
    assert not set(sup) & set(que)


def test_episode_replay():
    a = draw_episode_indices(40, np.random.default_rng(3), 16)
    b = draw_episode_indices(40, np.random.default_rng(3), 16)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_episode_pool_too_small():
    with pytest.raises(ValueError):
        draw_episode_indices(31, np.random.default_rng(0), 16)


def test_support_role_binomial():
    n, pool, b = 10_000, 40, 16
    rng = np.random.default_rng(2024)
    sup_counts = np.zeros(pool)
    que_counts = np.zeros(pool)
    for _ in range(n):
        s, q = draw_episode_indices(pool, rng, b)
        assert not set(s) & set(q)
        sup_counts[s] += 1
        que_counts[q] += 1
    p = b / pool
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(sup_counts - n * p) < 3 * sigma)
    assert np.all(que_counts > 0)


def test_sample_episode_from_task(small_world):
    train, _, _, store = small_world
    ep = sample_episode(train[0], np.random.default_rng(0), 8, store)
    assert len(ep.support) == len(ep.query) == 8
    s = {u for u, _ in ep.support.sources}
    q = {u for u, _ in ep.query.sources}
    assert not s & q and s | q <= {u.utt_id for u in train[0].pool}


# --------------------------------------------------------------- inner loop


def test_inner_adapt_alpha_zero():
    p = lin_params(0.3, -0.2)
    assert inner_adapt(p, lin_batch([1.0], [0]), 0.0, 1) is p


def test_inner_adapt_one_parameter_closed_form():
    # one weight, softmax over (w x, 0): gradient of -log p0 is -(1 - sigmoid(w x)) x
    cfg = ModelConfig(input_dim=2, layers=0, n_classes=2, output_bias=False)
    w, x, alpha = 0.4, 1.5, 0.1
    p = ParameterSet(cfg, {"out.W": np.array([[w, 0.0], [0.0, 0.0]])})
    batch = LabeledBatch((np.array([[x, 0.0]]),), (np.array([0]),))
    phi = inner_adapt(p, batch, alpha, 1)
    sig = 1 / (1 + math.exp(-w * x))
    g = -(1 - sig) * x
    assert phi["out.W"][0, 0] == pytest.approx(w - alpha * g, rel=1e-12)
    assert p["out.W"][0, 0] == w


def test_inner_adapt_composition(small_world, tiny_model):
    train, _, _, store = small_world
    ep = sample_episode(train[0], np.random.default_rng(1), 8, store)
    theta = init_params(tiny_model, 0)
    two = inner_adapt(theta, ep.support, 0.05, 2)
    twice = inner_adapt(inner_adapt(theta, ep.support, 0.05, 1), ep.support, 0.05, 1)
    assert two.equals(twice)
    with pytest.raises(ValueError):
        inner_adapt(theta, ep.support, 0.05, 0)


# ------------------------------------------------------------ meta objective


def _episodes(small_world, seed=0, b=8):
    train, _, _, store = small_world
    rng = np.random.default_rng(seed)
    return [sample_episode(t, rng, b, store) for t in train]


def test_meta_objective_alpha_zero_is_multitask(small_world, tiny_model):
    eps = _episodes(small_world)
    theta = init_params(tiny_model, 3)
    total, grads = meta_objective(theta, eps, 0.0)
    parts = [backward(theta, ep.query) for ep in eps]
    assert total == pytest.approx(sum(p[0] for p in parts), rel=1e-12)
    for k in theta:
        np.testing.assert_allclose(grads[k], sum(p[1][k] for p in parts), rtol=1e-12, atol=1e-15)


@settings(max_examples=25)
@given(
    w=st.tuples(st.floats(-2, 2), st.floats(-2, 2)),
    xs=st.lists(st.floats(-3, 3), min_size=1, max_size=4),
    xq=st.floats(-3, 3),
    alpha=st.floats(0, 1),
    data=st.data(),
)
def test_first_order_gradient_matches_oracle(w, xs, xq, alpha, data):
    ys = data.draw(st.lists(st.integers(0, 1), min_size=len(xs), max_size=len(xs)))
    yq = data.draw(st.integers(0, 1))
    gs = lin_grad_oracle(w, xs, ys)
    phi = [w[0] - alpha * gs[0], w[1] - alpha * gs[1]]
    expect = lin_grad_oracle(phi, [xq], [yq])
    ep = Episode("t", lin_batch(xs, ys), lin_batch([xq], [yq]))
    _, grads = meta_objective(lin_params(*w), [ep], alpha, 1)
    np.testing.assert_allclose(grads["out.W"][0], expect, rtol=0, atol=1e-10)


def test_duplicate_episode_doubles_contribution(small_world, tiny_model):
    ep = _episodes(small_world)[0]
    theta = init_params(tiny_model, 1)
    l1, g1 = meta_objective(theta, [ep], 0.01)
    l2, g2 = meta_objective(theta, [ep, ep], 0.01)
    assert l2 == 2 * l1
    for k in theta:
        np.testing.assert_array_equal(g2[k], 2 * g1[k])


def test_threaded_meta_objective_matches(small_world, tiny_model):
    eps = _episodes(small_world)
    theta = init_params(tiny_model, 1)
    l1, g1 = meta_objective(theta, eps, 0.01, workers=1)
    l4, g4 = meta_objective(theta, eps, 0.01, workers=4)
    assert abs(l1 - l4) < 1e-9
    for k in theta:
        np.testing.assert_allclose(g4[k], g1[k], rtol=0, atol=1e-9)


def test_outer_step_zero_gradient():
    theta = lin_params(0.5, -0.5)
    zero = Episode("t", lin_batch([0.0], [0]), lin_batch([0.0], [1]))
    new, state, _ = outer_step(theta, adam_init(theta), [zero], MetaConfig(), 0)
    assert new.equals(theta)
    assert state.step_count == 1


@pytest.mark.parametrize("iteration,lr", [(0, 2e-4), (2000, 3e-5)])
def test_outer_step_uses_schedule(iteration, lr):
    theta = lin_params(0.5, -0.5)
    ep = Episode("t", lin_batch([1.0], [0]), lin_batch([2.0], [1]))
    new, _, _ = outer_step(theta, adam_init(theta), [ep], MetaConfig(), iteration)
    # first Adam step moves every coordinate by lr * g / (|g| + eps)
    np.testing.assert_allclose(np.abs(new["out.W"] - theta["out.W"]), lr, rtol=1e-6)


# --------------------------------------------------------- task augmentation


def test_augment_tasks_triples():
    tasks = [fake_task(4, f"G{g}") for g in range(2, 11)]
    aug = augment_tasks(tasks, "sp", (0.9, 1.0, 1.1))
    assert len(aug) == 27
    assert [t.augment_tag for t in aug[:3]] == [("sp", 0.9), None, ("sp", 1.1)]
    assert all(len(a.pool) == len(tasks[i // 3].pool) for i, a in enumerate(aug))
    restored = original_tasks(aug)
    assert len(restored) == len(tasks) and all(a is b for a, b in zip(restored, tasks))


def test_augment_tasks_identity_factor():
    tasks = [fake_task(4, "A"), fake_task(4, "B")]
    out = augment_tasks(tasks, "vtlp", (1.0,))
    assert all(a is b for a, b in zip(out, tasks))


def test_augment_tasks_rejects_specaug():
    with pytest.raises(ValueError, match="SpecAug"):
        augment_tasks([fake_task(4)], "specaug", (0.9, 1.0, 1.1))
    with pytest.raises(ValueError):
        AugmentConfig(method="specaug", mode="task")
    with pytest.raises(ValueError):
        augment_tasks([fake_task(4)], "sp", (0.9, 1.1))


@given(n_tasks=st.integers(1, 12), factors=st.sets(st.sampled_from([0.8, 0.9, 1.1, 1.2]), max_size=4))
def test_augment_tasks_bookkeeping(n_tasks, factors):
    tasks = [fake_task(2, f"t{i}") for i in range(n_tasks)]
    fs = (1.0,) + tuple(sorted(factors))
    aug = augment_tasks(tasks, "sp", fs)
    assert len(aug) == n_tasks * len(fs)
    assert all(a is b for a, b in zip(original_tasks(aug), tasks))


def test_raw_augment_merges_pools():
    t = fake_task(5)
    (merged,) = raw_augment([t], "sp", (0.9, 1.0, 1.1))
    assert len(merged.pool) == 15 and merged.task_id == t.task_id and merged.augment_tag is None
    assert len({u.utt_id for u in merged.pool}) == 15


# ------------------------------------------------------------ meta training


def _cfg(**kw):
    base = dict(
        iterations=5,
        episode_batch=8,
        inner_lr=0.01,
        outer_schedule=MultiStepSchedule(5e-3, (100,), 0.15),
        valid_every=5,
        seed=0,
    )
    base.update(kw)
    return MetaConfig(**base)


def test_meta_train_zero_iterations(small_world, tiny_model):
    train, valid, _, store = small_world
    init = init_params(tiny_model, 9)
    theta, log = meta_train(train, valid, _cfg(iterations=0), tiny_model, store, init=init)
    assert theta is init and log.rows == []


def test_meta_train_deterministic(small_world, tiny_model):
    train, valid, _, store = small_world
    a, la = meta_train(train, valid, _cfg(), tiny_model, store)
    b, lb = meta_train(train, valid, _cfg(), tiny_model, store)
    assert a.equals(b)
    assert [r["meta_loss"] for r in la.rows] == [r["meta_loss"] for r in lb.rows]
    assert len(la.rows) == 5


def test_task_mode_diverges_from_none(small_world, tiny_model):
    train, valid, _, store = small_world
    a, _ = meta_train(train, valid, _cfg(iterations=2), tiny_model, store)
    b, _ = meta_train(train, valid, _cfg(iterations=2, augment=AugmentConfig("sp", mode="task")), tiny_model, store)
    assert not a.equals(b)


def test_meta_train_rejects_validation_overlap(small_world, tiny_model):
    train, _, _, store = small_world
    with pytest.raises(ValueError):
        meta_train(train, train[0], _cfg(), tiny_model, store)


def test_validation_loss_improves(small_world, tiny_model):
    train, valid, _, store = small_world
    wins = 0
    for seed in range(5):
        cfg = _cfg(iterations=200, seed=seed, valid_every=50)
        _, log = meta_train(train, valid, cfg, tiny_model, store)
        wins += log.valid_trace()[-1][1] < log.initial_valid_loss
    assert wins >= 4


def test_train_log_csv(small_world, tiny_model, tmp_path):
    train, valid, _, store = small_world
    _, log = meta_train(train, valid, _cfg(iterations=3, valid_every=2), tiny_model, store)
    log.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iteration,meta_loss,valid_loss,lr"
    assert len(lines) == 1 + 1 + 3


# ------------------------------------------------------- pretraining / tuning


def test_pretrain_reduction_identity(small_world, tiny_model):
    train, valid, _, store = small_world
    cfg = _cfg(iterations=10, inner_lr=0.0)
    ta, tb = [], []
    meta_train(train, valid, cfg, tiny_model, store, callback=lambda i, p: ta.append(p))
    supervised_pretrain(train, cfg, tiny_model, store, batching="episodic", callback=lambda i, p: tb.append(p))
    assert len(ta) == len(tb) == 10
    assert all(a.equals(b) for a, b in zip(ta, tb))


def test_pretrain_union_semantics(small_world, tiny_model):
    train, _, _, store = small_world
    cfg = _cfg(pretrain_epochs=1)
    a, _ = supervised_pretrain(train[:2], cfg, tiny_model, store)
    b, _ = supervised_pretrain([Task("all", train[0].pool + train[1].pool)], cfg, tiny_model, store)
    assert a.equals(b)


def test_pretrain_loss_decreases(small_world, tiny_model):
    train, _, _, store = small_world
    p, log = supervised_pretrain(train, _cfg(pretrain_epochs=6), tiny_model, store)
    losses = [r["meta_loss"] for r in log.rows]
    assert losses[-1] < losses[0]
    assert np.polyfit(np.arange(len(losses)), losses, 1)[0] < 0
    q, _ = supervised_pretrain(train, _cfg(pretrain_epochs=6), tiny_model, store)
    assert p.equals(q)


def test_fine_tune_schedule_and_selection(small_world, tiny_model):
    _, _, target, store = small_world
    rand = init_params(tiny_model, 0)
    params, metrics = fine_tune(rand, target.train, target.dev, None, store)
    trace = metrics["trace"]
    assert len(trace) == 15
    assert trace[0]["lr"] == 1e-5 and trace[1]["lr"] == 1e-5 and trace[2]["lr"] == 1e-6
    best = min(trace, key=lambda r: (r["dev_fer"], r["dev_ce"]))
    assert metrics["dev"]["fer"] == best["dev_fer"]


def test_fine_tune_distinct_inits(small_world, tiny_model):
    train, valid, target, store = small_world
    theta, _ = meta_train(train, valid, _cfg(iterations=20), tiny_model, store)
    cfg = AdaptConfig(epochs=2)
    _, m_meta = fine_tune(theta, target.train, target.dev, cfg, store)
    _, m_rand = fine_tune(init_params(tiny_model, 0), target.train, target.dev, cfg, store)
    assert m_meta["trace"] != m_rand["trace"]


@pytest.mark.parametrize("aug", ["sp", "vtlp", "specaug"])
def test_fine_tune_with_augmentation(small_world, tiny_model, aug):
    _, _, target, store = small_world
    cfg = AdaptConfig(epochs=2, augment=aug, schedule=MultiStepSchedule(1e-3, (), 0.1))
    p, m = fine_tune(init_params(tiny_model, 0), target.train, target.dev, cfg, store)
    assert m["best_epoch"] in (0, 1) and np.isfinite(m["dev"]["ce"])


def test_fine_tune_errors_and_leakage(small_world, tiny_model):
    _, _, target, store = small_world
    p = init_params(tiny_model, 0)
    with pytest.raises(ValueError):
        fine_tune(p, [], target.dev, None, store)
    with pytest.raises(LeakageError):
        fine_tune(p, target.test, target.dev, AdaptConfig(epochs=1), store)
    with pytest.raises(LeakageError):
        meta_train([Task("X", target.test)], None, _cfg(iterations=1, episode_batch=2), tiny_model, store)
