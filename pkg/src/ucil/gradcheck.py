"""Finite-difference checks for every primitive and the composite losses."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .losses import bce_loss, feature_distillation, output_distillation

TOLERANCE = 1e-4


def _away_from_zero(rng, shape, gap=0.1):
    # keeps relu inputs off the kink so the central difference is valid
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def primitive_cases(rng) -> dict:
    """name -> (function of one tensor returning a scalar, evaluation point)."""
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    kern = rng.normal(size=(3, 2, 3)) * 0.5
    xc = rng.normal(size=(2, 5, 2))
    other = rng.normal(size=(3, 4))
    return {
        "add": (lambda x: ad.mean(ad.mul(ad.add(x, b), ad.add(x, b))), rng.normal(size=(3, 4))),
        "add_broadcast": (lambda x: ad.mean(ad.mul(ad.add(b, x), b)), rng.normal(size=(4,))),
        "sub": (lambda x: ad.mean(ad.mul(ad.sub(b, x), ad.sub(x, other))), rng.normal(size=(3, 4))),
        "mul": (lambda x: ad.mean(ad.mul(ad.mul(x, b), x)), rng.normal(size=(3, 4))),
        "matmul_left": (lambda x: ad.mean(ad.mul(ad.matmul(x, w), ad.matmul(x, w))), rng.normal(size=(3, 4))),
        "matmul_right": (lambda x: ad.mean(ad.mul(ad.matmul(b, x), ad.matmul(b, x))), rng.normal(size=(4, 2))),
        "conv1d_input": (lambda x: ad.mean(ad.mul(ad.conv1d(x, kern), ad.conv1d(x, kern))), rng.normal(size=(2, 5, 2))),
        "conv1d_kernel": (lambda x: ad.mean(ad.mul(ad.conv1d(xc, x), ad.conv1d(xc, x))), rng.normal(size=(3, 2, 3))),
        "relu": (lambda x: ad.mean(ad.mul(ad.relu(x), b)), _away_from_zero(rng, (3, 4))),
        "sigmoid": (lambda x: ad.mean(ad.mul(ad.sigmoid(x), b)), rng.normal(size=(3, 4))),
        "log": (lambda x: ad.mean(ad.mul(ad.log(x), b)), rng.uniform(0.5, 2.0, size=(3, 4))),
        "mean_axis": (lambda x: ad.mean(ad.mul(ad.mean(x, axis=1), ad.mean(x, axis=1))), rng.normal(size=(3, 4))),
        "l2_normalize": (lambda x: ad.mean(ad.mul(ad.l2_normalize(x), b)), rng.normal(size=(3, 4))),
        "squared_error": (lambda x: ad.squared_error(x, b), rng.normal(size=(3, 4))),
    }


def loss_cases(rng) -> dict:
    """Composite objectives as functions of logits / embeddings."""
    y = (rng.uniform(size=(2, 6, 5)) < 0.3).astype(float)
    new_cols = [3, 4]
    v_bar = rng.normal(size=(2, 6, 4))
    old = rng.normal(size=(2, 6, 3))
    ext = np.zeros((5, 3))
    ext[[0, 1, 2], [0, 1, 2]] = 1.0
    return {
        "bce_indl": (lambda o: bce_loss(o, y, new_cols), rng.normal(size=(2, 6, 5))),
        "bce_full": (lambda o: bce_loss(o, y), rng.normal(size=(2, 6, 5))),
        "feature_distillation": (lambda v: feature_distillation(v, v_bar), rng.normal(size=(2, 6, 4))),
        "output_distillation": (lambda o: output_distillation(old, ad.matmul(o, ext)), rng.normal(size=(2, 6, 5))),
    }


def total_loss_case(seed: int, name: str = "heads.w"):
    """Full incremental objective as a function of one parameter array."""
    from .model import ModelConfig, expand_heads, init_model, snapshot
    from .trainer import RECIPES, BatchArrays, TaskContext, total_loss

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_mels=4, frame_count=6, conv_channels=(6,), kernel_width=3, embedding_dim=3)
    old = init_model(cfg, ["a", "b"], seed)
    # a nonzero projection bias keeps every frame embedding away from the origin
    old.params["proj.b"] = rng.normal(size=3)
    prev = snapshot(old)
    cur = expand_heads(old, ["c"], seed + 1)
    n = 6
    frame_y = (rng.uniform(size=(n, 6, 3)) < 0.4).astype(float)
    arrays = BatchArrays(
        x=rng.normal(size=(n, 6, 4)),
        frame_y=frame_y,
        clip_y=frame_y.max(axis=1),
        strong_new=np.array([1, 0, 0, 0, 0, 0.0]),
        strong_reh=np.array([0, 1, 0, 0, 0, 0.0]),
        weak_new=np.array([0, 0, 1, 0, 0, 0.0]),
        weak_reh=np.array([0, 0, 0, 1, 0, 0.0]),
        unlabeled=np.array([0, 0, 0, 0, 1, 1.0]),
    )
    ctx = TaskContext(1, ["a", "b"], ["c"], 2.0, prev, RECIPES["ucil"])
    # nudge away from the snapshot so distillation terms are not at their minimum
    point = cur.params[name] + rng.normal(size=cur.params[name].shape) * 0.1

    def fn(w):
        params = dict(cur.params)
        params[name] = w
        return total_loss(cur, params, arrays, ctx)["total"]

    return fn, point


def run_suite(seeds=range(3)) -> dict:
    """name -> worst relative error over ``seeds``."""
    worst: dict = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = {**primitive_cases(rng), **loss_cases(rng)}
        cases["total_loss_heads"] = total_loss_case(seed, "heads.w")
        cases["total_loss_proj"] = total_loss_case(seed, "proj.w")
        for name, (fn, point) in cases.items():
            worst[name] = max(worst.get(name, 0.0), ad.grad_check(fn, point))
    return worst
