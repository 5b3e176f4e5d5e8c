import math

import numpy as np
import pytest

from ucil import autodiff as ad
from ucil.data import TaskSpec
from ucil.gradcheck import total_loss_case
from ucil.losses import bce_loss
from ucil.memory import ExemplarStore, update_memory
from ucil.model import expand_heads, forward, init_model, snapshot
from ucil.trainer import (
    LOG_FIELDS,
    RECIPES,
    BatchArrays,
    TaskContext,
    TrainConfig,
    batch_arrays,
    compose_batches,
    format_log,
    parse_log,
    slot_sizes,
    total_loss,
    train_task,
    warmup_lr,
)
from ucil.experiment import task_candidates

from conftest import TINY_MODEL, TINY_TRAIN


def test_warmup_ramp():
    assert warmup_lr(25, 0.001, 50) == pytest.approx(0.0005, abs=1e-15)
    assert warmup_lr(50, 0.001, 50) == 0.001
    assert warmup_lr(120, 0.001, 50) == 0.001
    assert warmup_lr(1, 0.001, 0) == 0.001


def test_slot_sizes():
    cfg = TrainConfig()
    assert slot_sizes(cfg, 10, 10, 10) == (12, 12, 24)
    assert sum(slot_sizes(cfg, 10, 10, 0)) == 48 and slot_sizes(cfg, 10, 10, 0)[2] == 0
    assert slot_sizes(cfg, 10, 0, 10) == (24, 0, 24)
    assert slot_sizes(cfg, 0, 10, 0) == (0, 48, 0)


def test_task_context():
    ctx = TaskContext(1, list("abcde"), list("fghij"), 2.0, previous=object())
    assert ctx.lam == pytest.approx(2 * math.sqrt(2))
    assert TaskContext(0, [], ["a"]).lam == 0.0
    with pytest.raises(ValueError):
        TaskContext(1, ["a"], ["a", "b"])


def tiny_store(corpus, task, cap=(6, 3)):
    return update_memory(ExemplarStore(capacity=cap), task_candidates(corpus, task), task.classes, 0)


def test_batches_have_configured_size(tiny_corpus, tiny_tasks):
    store = tiny_store(tiny_corpus, tiny_tasks[0])
    cfg = TrainConfig(batch_size=8, steps_per_epoch=None)
    batches = compose_batches(tiny_tasks[1], store, cfg, True, np.random.default_rng(0))
    assert batches
    for b in batches:
        assert len(b) == 8
        assert len(b.unlabeled) == 4
        assert not set(b.labeled_new) & set(b.rehearsal)
    seen_strong = {c for b in batches for c in b.strong_new}
    assert seen_strong == set(tiny_tasks[1].strong)
    assert any(b.rehearsal for b in batches)


def test_empty_partition_is_an_error(tiny_corpus):
    ctx = TaskContext(0, [], ["a"], recipe=RECIPES["ucil"])
    model = init_model(TINY_MODEL, ["a"], 0)
    with pytest.raises(ValueError):
        train_task(model, TaskSpec(0, ["a"]), tiny_corpus, TINY_TRAIN, ctx)


def first_task_run(corpus, task, config, seed=0):
    model = init_model(TINY_MODEL, task.classes, seed)
    ctx = TaskContext(0, [], list(task.classes), recipe=RECIPES["ucil"])
    return train_task(model, task, corpus, config, ctx, None, seed)


def test_one_epoch_one_batch_is_one_step(tiny_corpus, tiny_tasks):
    cfg = TrainConfig(batch_size=8, epochs=1, warmup_epochs=0, steps_per_epoch=1)
    res = first_task_run(tiny_corpus, tiny_tasks[0], cfg)
    assert res.steps == 1 and len(res.log) == 1
    assert res.log[0]["lr"] == 0.001


def test_training_is_deterministic(tiny_corpus, tiny_tasks):
    a = first_task_run(tiny_corpus, tiny_tasks[0], TINY_TRAIN, 3)
    b = first_task_run(tiny_corpus, tiny_tasks[0], TINY_TRAIN, 3)
    assert format_log(a.log) == format_log(b.log)
    assert all(np.array_equal(a.teacher.params[k], b.teacher.params[k]) for k in a.teacher.params)


def test_task_zero_has_only_bce(tiny_corpus, tiny_tasks):
    res = first_task_run(tiny_corpus, tiny_tasks[0], TINY_TRAIN)
    for rec in res.log:
        assert rec["L_FD"] == rec["L_OD"] == rec["L_UOD"] == rec["L_EWC"] == 0.0
        assert rec["total"] == pytest.approx(rec["L_BCE"], abs=1e-12)


def test_early_stopping_respects_patience(tiny_corpus, tiny_tasks):
    cfg = TrainConfig(batch_size=8, epochs=30, warmup_epochs=0, patience=1, lr=0.5, steps_per_epoch=1)
    res = first_task_run(tiny_corpus, tiny_tasks[0], cfg)
    vals = [r["val_total"] for r in res.log]
    assert len(res.log) < 30
    assert vals[-1] >= min(vals[:-1])


def test_log_round_trip():
    rec = {k: 0.1 * i for i, k in enumerate(LOG_FIELDS)}
    rec["epoch"] = 3
    text = format_log([rec, rec])
    assert text.splitlines()[0].split("\t") == list(LOG_FIELDS)
    assert parse_log(text) == [rec, rec]
    with pytest.raises(ValueError):
        parse_log("epoch\tlr\n1\t0.1\n")


def incremental_setup(corpus, tasks, seed=0):
    t0, t1 = tasks
    old = init_model(TINY_MODEL, t0.classes, seed)
    prev = snapshot(old)
    cur = expand_heads(old, t1.classes, seed + 1)
    store = tiny_store(corpus, t0)
    ctx = TaskContext(1, list(t0.classes), list(t1.classes), 2.0, prev, RECIPES["ucil"])
    batch = compose_batches(t1, store, TrainConfig(batch_size=8), True, np.random.default_rng(seed))[0]
    arrays = batch_arrays(batch, corpus, cur.class_order, t1.classes, store)
    return cur, ctx, arrays


@pytest.mark.parametrize("seed", range(4))
def test_total_is_sum_of_components(tiny_corpus, tiny_tasks, seed):
    cur, ctx, arrays = incremental_setup(tiny_corpus, tiny_tasks, seed)
    cur = cur.with_params({k: v + np.random.default_rng(seed).normal(size=v.shape) * 0.05 for k, v in cur.params.items()})
    parts = total_loss(cur, None, arrays, ctx)
    vals = {k: float(np.asarray(getattr(v, "data", v))) for k, v in parts.items()}
    assert vals["L_FD"] > 0 and vals["L_OD"] > 0 and vals["L_UOD"] > 0
    recomputed = vals["L_BCE"] + vals["L_FD"] + ctx.lam * vals["L_OD"] + vals["L_UOD"] + vals["L_EWC"]
    assert vals["total"] == pytest.approx(recomputed, abs=1e-12)
    assert vals["L_KD"] == pytest.approx(vals["L_FD"] + ctx.lam * vals["L_OD"], abs=1e-12)
    assert 0.0 <= vals["L_FD"] <= 2.0 and min(vals.values()) >= 0.0


def test_student_equal_to_snapshot_with_perfect_labels_costs_nothing():
    old = init_model(TINY_MODEL, ["a", "b"], 0)
    prev = snapshot(old)
    cur = expand_heads(old, ["c"], 1)
    cur.params["heads.w"][:, 2] = 0.0
    cur.params["heads.b"][2] = -40.0
    n = 4
    one = np.ones(n)
    zero = np.zeros(n)
    rng = np.random.default_rng(0)
    arrays = BatchArrays(
        x=rng.normal(size=(n, 24, 8)),
        frame_y=np.zeros((n, 24, 3)),
        clip_y=np.zeros((n, 3)),
        strong_new=one,
        strong_reh=zero,
        weak_new=zero,
        weak_reh=zero,
        unlabeled=zero,
    )
    ctx = TaskContext(1, ["a", "b"], ["c"], 2.0, prev, RECIPES["ucil"])
    parts = total_loss(cur, None, arrays, ctx)
    assert parts["L_FD"].item() == pytest.approx(0.0, abs=1e-12)
    assert parts["L_OD"].item() == 0.0
    assert parts["total"].item() < 1e-12


def test_indl_leaves_existing_heads_untouched(tiny_corpus, tiny_tasks):
    cur, ctx, arrays = incremental_setup(tiny_corpus, tiny_tasks)
    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in cur.params.items()}
    parts = total_loss(cur, leaves, arrays, ctx)
    new_rows = arrays.strong_new
    only_new = bce_loss(
        forward(cur, arrays.x, leaves)[0],
        arrays.frame_y,
        list(range(len(ctx.existing), len(ctx.classes))),
        row_weights=new_rows,
    )
    g = ad.backward(tape, only_new)
    n_ext = len(ctx.existing)
    assert np.all(g[leaves["heads.w"].node][:, :n_ext] == 0.0)
    assert np.all(g[leaves["heads.b"].node][:n_ext] == 0.0)
    assert np.any(g[leaves["heads.w"].node][:, n_ext:] != 0.0)
    assert parts["total"].item() > 0


def test_finetune_recipe_has_no_distillation(tiny_corpus, tiny_tasks):
    cur, ctx, arrays = incremental_setup(tiny_corpus, tiny_tasks)
    ctx.recipe = RECIPES["finetune"]
    parts = total_loss(cur, None, arrays, ctx)
    assert parts["L_FD"].item() == parts["L_OD"].item() == parts["L_UOD"].item() == 0.0


@pytest.mark.parametrize("name", ["heads.w", "proj.w"])
def test_total_loss_gradcheck(name):
    fn, point = total_loss_case(0, name)
    assert ad.grad_check(fn, point) < 1e-4
