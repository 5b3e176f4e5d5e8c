"""Classification, distillation and sample-selection pieces of the UCIL objective."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad


def column_selector(n_classes: int, columns) -> np.ndarray:
    """One-hot (|C|, k) matrix so that ``logits @ S`` keeps ``columns`` in order."""
    s = np.zeros((n_classes, len(columns)))
    for j, k in enumerate(columns):
        s[k, j] = 1.0
    return s


def select_columns(logits, columns):
    logits = ad.tensor(logits)
    return ad.matmul(logits, column_selector(logits.shape[-1], columns))


def bce_loss(logits, targets, class_subset=None, row_weights=None):
    """Mean binary cross-entropy over the classes in ``class_subset``.

    Classes outside the subset contribute nothing (independent learning of
    new heads). ``row_weights`` (one 0/1 entry per leading-axis row) masks
    whole clips; the mean runs over the unmasked elements only.
    """
    logits = ad.tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    n_classes = logits.shape[-1]
    if class_subset is None:
        class_subset = range(n_classes)
    class_subset = list(class_subset)
    if not class_subset:
        raise ValueError("bce_loss: empty class subset")
    if targets.shape != logits.shape:
        raise ad.ShapeError(f"bce_loss: targets {targets.shape} vs logits {logits.shape}")
    if np.any((targets != 0) & (targets != 1)):
        raise ValueError("bce_loss: targets must be 0/1")
    o = select_columns(logits, class_subset)
    y = targets[..., class_subset]
    ll = ad.log(ad.sigmoid(o)) * y + ad.log(ad.sigmoid(-o)) * (1.0 - y)
    if row_weights is None:
        return -ad.mean(ll)
    w = np.asarray(row_weights, dtype=np.float64).reshape((-1,) + (1,) * (ll.data.ndim - 1))
    kept = float(np.broadcast_to(w, ll.shape).sum())
    if kept == 0:
        raise ValueError("bce_loss: every row is masked")
    return ad.mean(ll * w) * (-ll.data.size / kept)


def feature_distillation(v, v_bar):
    """Mean over frames of 1 - cos(v, v_bar) on L2-normalised embeddings."""
    v, v_bar = ad.tensor(v), ad.tensor(v_bar)
    if v.shape != v_bar.shape:
        raise ad.ShapeError(f"feature_distillation: shape mismatch {v.shape} vs {v_bar.shape}")
    d = v.shape[-1]
    cos = ad.mean(ad.l2_normalize(v) * ad.l2_normalize(v_bar), axis=-1) * float(d)
    return 1.0 - ad.mean(cos)


def output_distillation(old_logits_ext, current_logits_ext):
    """MSE between previous-model and current existing-class logits."""
    return ad.squared_error(current_logits_ext, old_logits_ext)


def adaptive_lambda(n_classes: int, n_new: int, omega: float = 2.0) -> float:
    if n_new < 1:
        raise ValueError("adaptive_lambda: a distillation phase needs at least one new class")
    if n_classes < n_new:
        raise ValueError("adaptive_lambda: |C| must be >= |C_new|")
    return omega * math.sqrt(n_classes / n_new)


def kd_loss(l_fd, l_od, lam: float):
    if lam < 0:
        raise ValueError("kd_loss: lambda must be non-negative")
    return l_fd + l_od * lam


def discrepancy(old_logits_ext, current_logits_ext) -> np.ndarray:
    """Per-clip mean absolute logit gap over frames and existing classes."""
    old = np.asarray(getattr(old_logits_ext, "data", old_logits_ext))
    cur = np.asarray(getattr(current_logits_ext, "data", current_logits_ext))
    if old.shape != cur.shape:
        raise ad.ShapeError(f"discrepancy: shape mismatch {old.shape} vs {cur.shape}")
    return np.abs(old - cur).reshape(old.shape[0], -1).mean(axis=1)


def select_by_discrepancy(d) -> np.ndarray:
    """Indices of the ceil(B/2) largest discrepancies; ties go to the lower index."""
    d = np.asarray(d)
    if d.size == 0:
        return np.zeros(0, dtype=int)
    keep = (d.size + 1) // 2
    return np.sort(np.argsort(-d, kind="stable")[:keep])


def select_unlabeled(clips, previous, current):
    """Pick the half of an unlabeled batch where the two models disagree most."""
    from .model import forward

    ext = list(range(previous.n_classes))
    old, _ = forward(previous, clips)
    cur, _ = forward(current, clips)
    d = discrepancy(old.data[..., ext], cur.data[..., ext])
    return select_by_discrepancy(d), d


def uod_loss(selected_current_ext, selected_old_ext):
    """Output distillation on the selected unlabeled clips; 0 when none are selected."""
    cur = ad.tensor(selected_current_ext)
    if cur.shape[0] == 0:
        return ad.tensor(0.0)
    return output_distillation(selected_old_ext, cur)
