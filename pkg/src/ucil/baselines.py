"""Reference continual-learning methods: fine-tune, joint, NR, EWC and LwF."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Corpus, clip_targets, frame_targets
from .losses import bce_loss, output_distillation, select_columns
from .memory import BUFFERS, ExemplarStore, random_fill
from .model import SedModel, forward


@dataclass
class FisherDiagonal:
    values: dict  # parameter name -> non-negative array
    sample_count: int


def clip_bce(model: SedModel, params, x, target, kind: str):
    """BCE of one clip: frame-level for strong targets, mean-pooled for weak ones."""
    logits, _ = forward(model, x[None], params)
    if kind == "strong":
        return bce_loss(logits, target[None])
    return bce_loss(ad.mean(logits, axis=1), target[None])


def fisher_samples(model: SedModel, corpus: Corpus, clip_ids, visible) -> list:
    out = []
    for cid in clip_ids:
        clip = corpus.clip(cid)
        x = corpus.feats([cid])[0]
        if clip.annotation == "strong":
            y = frame_targets(clip, model.class_order, corpus.hop_seconds, corpus.n_frames, visible)
        else:
            y = clip_targets(clip, model.class_order, visible)
        out.append((x, y, clip.annotation))
    return out


def estimate_fisher(model: SedModel, data, n_samples: int, loss_fn=None, seed: int = 0) -> FisherDiagonal:
    """Diagonal empirical Fisher: mean over samples of squared loss gradients.

    ``data`` is a list of samples; ``loss_fn(model, params, sample)`` returns a
    scalar tensor (defaults to per-clip BCE on ``(x, target, kind)`` samples).
    """
    if n_samples <= 0:
        raise ValueError("estimate_fisher: n_samples must be positive")
    if not data:
        raise ValueError("estimate_fisher: no data")
    loss_fn = loss_fn or (lambda m, p, s: clip_bce(m, p, *s))
    rng = np.random.default_rng(seed)
    n = min(n_samples, len(data))
    picks = sorted(rng.permutation(len(data))[:n])
    acc = {k: np.zeros_like(v) for k, v in model.params.items()}
    for i in picks:
        tape = ad.Tape()
        leaves = {k: tape.leaf(v) for k, v in model.params.items()}
        grads = ad.backward(tape, loss_fn(model, leaves, data[i]))
        for k, t in leaves.items():
            acc[k] += grads[t.node] ** 2
    return FisherDiagonal({k: v / n for k, v in acc.items()}, n)


def ewc_penalty(params: dict, anchor: dict, fisher, lambda_ewc: float):
    """(lambda/2) * sum_j F_j (theta_j - theta*_j)^2.

    Parameters that grew since the anchor (new heads) are penalised only on
    their anchored entries.
    """
    fisher = fisher.values if isinstance(fisher, FisherDiagonal) else fisher
    if set(anchor) != set(fisher) or not set(anchor) <= set(params):
        raise ValueError("ewc_penalty: parameter layouts do not align")
    out = ad.tensor(0.0)
    for name, f in fisher.items():
        p = ad.tensor(params[name])
        f = np.asarray(f)
        a = np.asarray(anchor[name])
        if f.shape != a.shape or f.ndim != p.data.ndim or any(s > q for s, q in zip(f.shape, p.shape)):
            raise ValueError(f"ewc_penalty: layout mismatch at {name}")
        pad = [(0, q - s) for s, q in zip(f.shape, p.shape)]
        diff = p - np.pad(a, pad)
        out = out + ad.mean(diff * diff * np.pad(f, pad)) * float(p.data.size)
    return out * (lambda_ewc / 2.0)


def lwf_loss(old_model: SedModel, current_model: SedModel, clips, params=None):
    """Logit MSE between old and current model on existing classes for new-task inputs."""
    ext = list(range(old_model.n_classes))
    old, _ = forward(old_model, clips)
    cur, _ = forward(current_model, clips, params)
    return output_distillation(old.data, select_columns(cur, ext))


def nr_update(store: ExemplarStore, task_data: dict, seen_classes, seed: int) -> ExemplarStore:
    """Naive rehearsal: uniform random fill of each buffer, no class balancing."""
    new = ExemplarStore(capacity=tuple(store.capacity))
    for b, name in enumerate(BUFFERS):
        pool = {**store.buffer(name), **task_data.get(name, {})}
        rng = np.random.default_rng([seed, b])
        chosen, assigned = random_fill(pool, int(store.capacity[b]), seen_classes, rng)
        new.buffer(name).update(chosen)
        new.assigned.update(assigned)
    return new


def finetune_task(model, previous, task, corpus, config, seed=0):
    """Plain BCE on the new task's data: no rehearsal, no distillation."""
    from .trainer import RECIPES, TaskContext, train_task

    ctx = TaskContext(task.task_index, list(previous.class_order), list(task.classes), config.omega, previous, RECIPES["finetune"])
    return train_task(model, task, corpus, config, ctx, None, seed)


def joint_train(model, task, corpus, config, seed=0):
    """Single phase over every class (the upper bound)."""
    from .trainer import RECIPES, TaskContext, train_task

    ctx = TaskContext(0, [], list(model.class_order), config.omega, None, RECIPES["joint"])
    return train_task(model, task, corpus, config, ctx, None, seed)
