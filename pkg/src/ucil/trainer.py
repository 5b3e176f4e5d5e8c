"""Per-task training loop shared by UCIL and the reference methods."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Corpus, TaskSpec, clip_targets, frame_targets
from .losses import adaptive_lambda, bce_loss, discrepancy, select_by_discrepancy, select_columns
from .memory import ExemplarStore, draw_rehearsal
from .model import SedModel, ema_update, forward

LOG_FIELDS = ("epoch", "lr", "L_BCE", "L_FD", "L_OD", "L_UOD", "L_EWC", "total", "val_total")
COMPONENTS = ("L_BCE", "L_FD", "L_OD", "L_UOD", "L_EWC")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 48
    lr: float = 1e-3
    epochs: int = 200
    warmup_epochs: int = 50
    patience: int = 50
    ema_decay: float = 0.999
    omega: float = 2.0
    strong_fraction: float = 0.25
    weak_fraction: float = 0.25
    lambda_ewc: float = 100.0
    fisher_samples: int = 500
    lwf_weight: float = 1.0
    steps_per_epoch: int | None = None


@dataclass(frozen=True)
class Recipe:
    """Which loss terms a method uses on incremental tasks (task 0 is always plain BCE)."""

    new_bce: str = "new"  # "new": independent learning on C_new; "all": every head
    rehearsal: bool = True
    fd: bool = True
    od: bool = True
    od_rows: str = "labeled"  # "labeled" (new + rehearsal clips) or "rehearsal"
    uod: bool = True
    lwf: bool = False
    ewc: bool = False


RECIPES = {
    "ucil": Recipe(),
    "finetune": Recipe(new_bce="all", rehearsal=False, fd=False, od=False, uod=False),
    "nr": Recipe(new_bce="all", fd=False, od=False, uod=False),
    "ewc": Recipe(new_bce="all", fd=False, od=False, uod=False, ewc=True),
    "lwf": Recipe(new_bce="new", fd=False, od=False, uod=False, lwf=True),
    "joint": Recipe(new_bce="all", rehearsal=False, fd=False, od=False, uod=False),
}


@dataclass
class TaskContext:
    task_index: int
    existing: list
    new: list
    omega: float = 2.0
    previous: SedModel | None = None
    recipe: Recipe = field(default_factory=Recipe)
    ewc_terms: list = field(default_factory=list)  # (anchor params, fisher) per past task
    lambda_ewc: float = 100.0
    lwf_weight: float = 1.0

    def __post_init__(self):
        if set(self.existing) & set(self.new):
            raise ValueError("existing and new classes overlap")

    @property
    def classes(self) -> list:
        return list(self.existing) + list(self.new)

    @property
    def incremental(self) -> bool:
        return self.previous is not None and bool(self.existing)

    @property
    def lam(self) -> float:
        if not self.incremental:
            return 0.0
        return adaptive_lambda(len(self.classes), len(self.new), self.omega)


@dataclass
class TrainBatch:
    """Clip ids per role; strong and weak rows are kept apart for the loss."""

    strong_new: list = field(default_factory=list)
    strong_rehearsal: list = field(default_factory=list)
    weak_new: list = field(default_factory=list)
    weak_rehearsal: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)

    @property
    def labeled_new(self) -> list:
        return self.strong_new + self.weak_new

    @property
    def rehearsal(self) -> list:
        return self.strong_rehearsal + self.weak_rehearsal

    @property
    def rows(self) -> list:
        return self.strong_new + self.strong_rehearsal + self.weak_new + self.weak_rehearsal + self.unlabeled

    def __len__(self) -> int:
        return len(self.rows)


def warmup_lr(epoch: int, lr: float, warmup_epochs: int) -> float:
    """Linear ramp from 0 to ``lr`` over the first ``warmup_epochs`` (epochs count from 1)."""
    if warmup_epochs <= 0:
        return lr
    return lr * min(1.0, epoch / warmup_epochs)


# --- batch assembly ---------------------------------------------------------


def _cycle(ids, n, rng):
    if not ids or n == 0:
        return []
    reps = -(-n // len(ids))
    out = []
    for _ in range(reps):
        out.extend(ids[i] for i in rng.permutation(len(ids)))
    return out[:n]


def slot_sizes(config: TrainConfig, n_strong: int, n_weak: int, n_unlabeled: int) -> tuple[int, int, int]:
    b = config.batch_size
    s = int(round(b * config.strong_fraction))
    w = int(round(b * config.weak_fraction))
    u = b - s - w
    if n_unlabeled == 0:
        s, w = s + u - u // 2, w + u // 2
        u = 0
    if n_weak == 0:
        s, w = s + w, 0
    if n_strong == 0:
        s, w = 0, s + w
    return s, w, u


def compose_batches(task: TaskSpec, store: ExemplarStore | None, config: TrainConfig, use_unlabeled: bool, rng):
    """One epoch of batches: the strong pool is traversed once, other streams cycle."""
    strong_reh, weak_reh = ([], []) if store is None else draw_rehearsal(
        store, len(store.strong), len(store.weak), int(rng.integers(2**31))
    )
    strong_reh = [c for c in strong_reh if c not in set(task.strong)]
    weak_reh = [c for c in weak_reh if c not in set(task.weak)]
    strong = [(c, False) for c in task.strong] + [(c, True) for c in strong_reh]
    weak = [(c, False) for c in task.weak] + [(c, True) for c in weak_reh]
    unl = list(task.unlabeled) if use_unlabeled else []
    if not strong and not weak:
        raise ValueError(f"task {task.task_index}: empty training partition")
    s, w, u = slot_sizes(config, len(strong), len(weak), len(unl))
    lead, lead_slots = (strong, s) if s else (weak, w)
    steps = math.ceil(len(lead) / lead_slots)
    if config.steps_per_epoch is not None:
        steps = min(steps, config.steps_per_epoch)
    order_s = [strong[i] for i in rng.permutation(len(strong))] if strong else []
    n_s = steps * s
    order_s = _cycle(order_s, n_s, rng) if len(order_s) < n_s else order_s
    order_w = _cycle(weak, steps * w, rng)
    order_u = _cycle(unl, steps * u, rng)
    batches = []
    for k in range(steps):
        chunk_s = order_s[k * s : (k + 1) * s]
        chunk_w = order_w[k * w : (k + 1) * w]
        b = TrainBatch(
            strong_new=[c for c, r in chunk_s if not r],
            strong_rehearsal=[c for c, r in chunk_s if r],
            weak_new=[c for c, r in chunk_w if not r],
            weak_rehearsal=[c for c, r in chunk_w if r],
            unlabeled=order_u[k * u : (k + 1) * u],
        )
        batches.append(b)
    return batches


# --- losses -----------------------------------------------------------------


@dataclass
class BatchArrays:
    x: np.ndarray
    frame_y: np.ndarray  # (B, T, C)
    clip_y: np.ndarray  # (B, C)
    strong_new: np.ndarray
    strong_reh: np.ndarray
    weak_new: np.ndarray
    weak_reh: np.ndarray
    unlabeled: np.ndarray

    @property
    def labeled(self) -> np.ndarray:
        return self.strong_new + self.strong_reh + self.weak_new + self.weak_reh

    @property
    def new(self) -> np.ndarray:
        return self.strong_new + self.weak_new


def batch_arrays(batch: TrainBatch, corpus: Corpus, class_order, task_classes, store=None) -> BatchArrays:
    """Features, targets and row masks. New clips expose only the task's classes;
    rehearsal clips expose the classes they were stored with."""
    rows = batch.rows
    n = len(rows)
    t = corpus.n_frames
    frame_y = np.zeros((n, t, len(class_order)))
    clip_y = np.zeros((n, len(class_order)))
    masks = {k: np.zeros(n) for k in ("sn", "sr", "wn", "wr", "u")}
    groups = [
        ("sn", batch.strong_new),
        ("sr", batch.strong_rehearsal),
        ("wn", batch.weak_new),
        ("wr", batch.weak_rehearsal),
        ("u", batch.unlabeled),
    ]
    i = 0
    for key, ids in groups:
        for cid in ids:
            masks[key][i] = 1.0
            clip = corpus.clip(cid)
            visible = set(task_classes) if key in ("sn", "wn") else store.visible_labels(cid)
            if key in ("sn", "sr"):
                frame_y[i] = frame_targets(clip, class_order, corpus.hop_seconds, t, visible)
            elif key in ("wn", "wr"):
                clip_y[i] = clip_targets(clip, class_order, visible)
            i += 1
    return BatchArrays(corpus.feats(rows), frame_y, clip_y, masks["sn"], masks["sr"], masks["wn"], masks["wr"], masks["u"])


def _rows_mean(x, w):
    """Mean of a (B, ...) tensor over the rows with weight 1 and all other axes."""
    x = ad.tensor(x)
    w = np.asarray(w, dtype=np.float64)
    kept = float(w.sum()) * (x.data.size / max(1, x.shape[0]))
    wb = w.reshape((-1,) + (1,) * (x.data.ndim - 1))
    return ad.mean(x * wb) * (x.data.size / kept)


def masked_feature_distillation(v, v_bar, rows):
    d = v.shape[-1]
    cos = ad.mean(ad.l2_normalize(v) * ad.l2_normalize(ad.tensor(v_bar)), axis=-1) * float(d)
    return 1.0 - _rows_mean(cos, rows)


def masked_output_distillation(old_ext, cur_ext, rows):
    diff = cur_ext - ad.tensor(old_ext)
    return _rows_mean(diff * diff, rows)


def _group_bce(logits, y, subset_by_group):
    """Clip-weighted mean of BCE terms over row groups with their class subsets."""
    terms = []
    total = 0.0
    for rows, subset in subset_by_group:
        n = float(rows.sum())
        if n == 0:
            continue
        terms.append((bce_loss(logits, y, subset, row_weights=rows), n))
        total += n
    if not terms:
        return None
    out = None
    for loss, n in terms:
        part = loss * (n / total)
        out = part if out is None else out + part
    return out


def total_loss(model: SedModel, params, arrays: BatchArrays, ctx: TaskContext) -> dict:
    """All loss terms for one batch. ``total = L_BCE + L_KD + L_UOD (+ L_EWC)``,
    with ``L_KD = L_FD + lambda * L_OD``."""
    logits, emb = forward(model, arrays.x, params)
    n_cls = len(ctx.classes)
    all_idx = list(range(n_cls))
    zero = ad.tensor(0.0)
    recipe = ctx.recipe
    incremental = ctx.incremental

    if incremental:
        new_idx = list(range(len(ctx.existing), n_cls))
        new_subset = new_idx if recipe.new_bce == "new" else all_idx
        strong_groups = [(arrays.strong_new, new_subset), (arrays.strong_reh, all_idx)]
        weak_groups = [(arrays.weak_new, new_subset), (arrays.weak_reh, all_idx)]
    else:
        strong_groups = [(arrays.strong_new + arrays.strong_reh, all_idx)]
        weak_groups = [(arrays.weak_new + arrays.weak_reh, all_idx)]

    l_strong = _group_bce(logits, arrays.frame_y, strong_groups)
    pooled = ad.mean(logits, axis=1)
    l_weak = _group_bce(pooled, arrays.clip_y, weak_groups)
    parts = [p for p in (l_strong, l_weak) if p is not None]
    l_bce = parts[0] if len(parts) == 1 else parts[0] + parts[1]

    l_fd = l_od = l_uod = l_ewc = zero
    lam = ctx.lam
    if incremental:
        ext_idx = list(range(len(ctx.existing)))
        old_logits, old_emb = forward(ctx.previous, arrays.x)
        cur_ext = select_columns(logits, ext_idx)
        labeled = arrays.labeled
        if recipe.fd and labeled.sum() > 0:
            l_fd = masked_feature_distillation(emb, old_emb.data, labeled)
        od_rows = arrays.strong_reh + arrays.weak_reh if recipe.od_rows == "rehearsal" else labeled
        if recipe.od and od_rows.sum() > 0:
            l_od = masked_output_distillation(old_logits.data, cur_ext, od_rows)
        if recipe.lwf and arrays.new.sum() > 0:
            l_od = masked_output_distillation(old_logits.data, cur_ext, arrays.new)
            lam = ctx.lwf_weight
        if recipe.uod and arrays.unlabeled.sum() > 0:
            u_rows = np.flatnonzero(arrays.unlabeled)
            d = discrepancy(old_logits.data[u_rows], cur_ext.data[u_rows])
            chosen = np.zeros_like(arrays.unlabeled)
            chosen[u_rows[select_by_discrepancy(d)]] = 1.0
            l_uod = masked_output_distillation(old_logits.data, cur_ext, chosen)
        if recipe.ewc and ctx.ewc_terms:
            from .baselines import ewc_penalty

            for anchor, fisher in ctx.ewc_terms:
                l_ewc = l_ewc + ewc_penalty(params if params is not None else model.params, anchor, fisher, ctx.lambda_ewc)
    l_kd = l_fd + l_od * lam
    total = l_bce + l_kd + l_uod + l_ewc
    return {
        "total": total,
        "L_BCE": l_bce,
        "L_FD": l_fd,
        "L_OD": l_od,
        "L_KD": l_kd,
        "L_UOD": l_uod,
        "L_EWC": l_ewc,
        "lambda": lam,
    }


# --- training loop ---------------------------------------------------------


@dataclass
class TrainResult:
    model: SedModel
    teacher: SedModel
    log: list
    steps: int


def validation_arrays(task: TaskSpec, corpus: Corpus, class_order) -> BatchArrays | None:
    if not task.validation:
        return None
    strong = [c for c in task.validation if corpus.clip(c).annotation == "strong"]
    weak = [c for c in task.validation if corpus.clip(c).annotation == "weak"]
    return batch_arrays(TrainBatch(strong_new=strong, weak_new=weak), corpus, class_order, task.classes)


def train_task(
    model: SedModel,
    task: TaskSpec,
    corpus: Corpus,
    config: TrainConfig,
    ctx: TaskContext,
    store: ExemplarStore | None = None,
    seed: int = 0,
) -> TrainResult:
    """Train one task with warm-up, Adam, EMA teacher and early stopping."""
    if model.class_order != ctx.classes:
        raise ValueError("model heads do not match the task context classes")
    recipe = ctx.recipe
    use_store = store if (recipe.rehearsal and ctx.incremental) else None
    use_unl = recipe.uod and ctx.incremental
    if not task.strong and not task.weak and (use_store is None or len(use_store) == 0):
        raise ValueError(f"task {task.task_index}: empty training partition")

    state = ad.AdamState(lr=config.lr)
    teacher = SedModel(model.config, {k: v.copy() for k, v in model.params.items()}, list(model.class_order))
    val = validation_arrays(task, corpus, model.class_order)
    log = []
    best = math.inf
    since_best = 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        lr = warmup_lr(epoch, config.lr, config.warmup_epochs)
        rng = np.random.default_rng([seed, task.task_index, epoch])
        sums = {k: 0.0 for k in COMPONENTS + ("total",)}
        batches = compose_batches(task, use_store, config, use_unl, rng)
        for batch in batches:
            arrays = batch_arrays(batch, corpus, model.class_order, task.classes, use_store)
            tape = ad.Tape()
            leaves = {k: tape.leaf(v) for k, v in model.params.items()}
            parts = total_loss(model, leaves, arrays, ctx)
            grads = ad.backward(tape, parts["total"])
            new_params = ad.adam_step(model.params, {k: grads[t.node] for k, t in leaves.items()}, state, lr=lr)
            model = model.with_params(new_params)
            decay = min(config.ema_decay, 1.0 - 1.0 / (step + 1))
            teacher = ema_update(teacher, model, decay)
            step += 1
            for k in sums:
                sums[k] += float(parts[k].data)
        rec = {"epoch": epoch, "lr": lr}
        rec.update({k: v / len(batches) for k, v in sums.items()})
        rec["val_total"] = float(total_loss(model, None, val, ctx)["total"].data) if val is not None else rec["total"]
        log.append(rec)
        if rec["val_total"] < best:
            best, since_best = rec["val_total"], 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    return TrainResult(model, teacher, log, step)


def format_log(records) -> str:
    lines = ["\t".join(LOG_FIELDS)]
    for r in records:
        vals = [str(r["epoch"])] + [repr(float(r[k])) for k in LOG_FIELDS[1:]]
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def parse_log(text: str) -> list:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split("\t")
    if tuple(header) != LOG_FIELDS:
        raise ValueError(f"unexpected training log header {header}")
    out = []
    for ln in lines[1:]:
        vals = ln.split("\t")
        rec = {"epoch": int(vals[0])}
        rec.update({k: float(v) for k, v in zip(LOG_FIELDS[1:], vals[1:])})
        out.append(rec)
    return out
