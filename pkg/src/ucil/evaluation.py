"""Event decoding and threshold-independent scoring.

The PSDS-like score follows the intersection-criterion construction
(detection tolerance, ground-truth coverage, cross-trigger tolerance) over a
finite threshold grid. It is not bit-compatible with the reference toolkit.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CLIP_SECONDS


@dataclass(frozen=True)
class DetectedEvent:
    class_id: str
    onset: float
    offset: float
    clip_id: str = ""
    duration_limit: float = field(default=CLIP_SECONDS, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.onset < self.offset <= self.duration_limit + 1e-9:
            raise ValueError(f"invalid event interval {self.onset}-{self.offset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class PsdsConfig:
    dtc: float = 0.7
    gtc: float = 0.7
    cttc: float = 0.3
    alpha_ct: float = 0.0
    alpha_st: float = 1.0
    max_efpr: float = 100.0
    thresholds: tuple = tuple(np.linspace(0.01, 0.99, 50).tolist())

    def __post_init__(self):
        for name in ("dtc", "gtc", "cttc"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.alpha_ct < 0 or self.alpha_st < 0 or self.max_efpr <= 0:
            raise ValueError("alpha_ct, alpha_st must be >= 0 and max_efpr > 0")
        th = np.asarray(self.thresholds, dtype=float)
        if th.size == 0 or np.any(np.diff(th) <= 0):
            raise ValueError("threshold grid must be strictly increasing")
        object.__setattr__(self, "thresholds", tuple(float(t) for t in th))


PSDS1 = PsdsConfig(dtc=0.7, gtc=0.7, cttc=0.3, alpha_ct=0.0, alpha_st=1.0, max_efpr=100.0)
PSDS2 = PsdsConfig(dtc=0.1, gtc=0.1, cttc=0.3, alpha_ct=0.5, alpha_st=1.0, max_efpr=100.0)


# --- decoding -----------------------------------------------------------------


def median_filter_binary(track: np.ndarray, width: int) -> np.ndarray:
    """Median of a 0/1 track along axis 0 with edge replication."""
    if width % 2 == 0 or width < 1:
        raise ValueError(f"median filter width must be odd, got {width}")
    half = width // 2
    padded = np.concatenate([np.repeat(track[:1], half, axis=0), track, np.repeat(track[-1:], half, axis=0)])
    csum = np.concatenate([np.zeros((1,) + track.shape[1:]), np.cumsum(padded, axis=0)])
    window = csum[width:] - csum[:-width]
    return (window > half).astype(np.float64)


def decode_events(frame_probs, threshold: float, median_width: int = 7, hop_seconds: float = 0.016, class_names=None, clip_id: str = "") -> list:
    """Binarise, median-filter, and emit maximal active runs as events."""
    probs = np.asarray(frame_probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[:, None]
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("frame probabilities must lie in [0, 1]")
    if median_width % 2 == 0:
        raise ValueError(f"median filter width must be odd, got {median_width}")
    n_frames, n_cls = probs.shape
    names = list(range(n_cls)) if class_names is None else list(class_names)
    binary = median_filter_binary((probs >= threshold).astype(np.float64), median_width)
    pad = np.zeros((1, n_cls))
    edges = np.diff(np.concatenate([pad, binary, pad]), axis=0)
    # nonzero() on the transpose walks class by class, in time order
    cs, starts = np.nonzero(edges.T == 1)
    _, stops = np.nonzero(edges.T == -1)
    limit = n_frames * hop_seconds
    return [
        DetectedEvent(names[k], s * hop_seconds, e * hop_seconds, clip_id, limit)
        for k, s, e in zip(cs.tolist(), starts.tolist(), stops.tolist())
    ]


# --- matching -------------------------------------------------------------


def _overlaps(a_on, a_off, b_on, b_off) -> np.ndarray:
    """Pairwise overlap lengths, shape (len(a), len(b))."""
    return np.clip(np.minimum(a_off[:, None], b_off[None, :]) - np.maximum(a_on[:, None], b_on[None, :]), 0.0, None)


def _arrays(events, codes):
    on = np.array([e.onset for e in events], dtype=np.float64)
    off = np.array([e.offset for e in events], dtype=np.float64)
    cls = np.array([codes[e.class_id] for e in events], dtype=int)
    return on, off, cls


@dataclass
class MatchCounts:
    tp: dict = field(default_factory=lambda: defaultdict(int))  # detected ground-truth events
    n_gt: dict = field(default_factory=lambda: defaultdict(int))
    fp: dict = field(default_factory=lambda: defaultdict(int))
    ct: dict = field(default_factory=lambda: defaultdict(int))  # (detected class, gt class) -> count

    def as_dict(self) -> dict:
        return {
            "tp": dict(self.tp),
            "n_gt": dict(self.n_gt),
            "fp": dict(self.fp),
            "ct": {f"{a}|{b}": v for (a, b), v in sorted(self.ct.items())},
        }


def _by_clip(events):
    out = defaultdict(list)
    for e in events:
        out[e.clip_id].append(e)
    return out


def intersection_match(detections, ground_truth, config: PsdsConfig) -> MatchCounts:
    """Intersection-criterion counts.

    A detection passes the detection tolerance when its overlap with same-class
    reference events covers at least ``dtc`` of its own duration. A reference
    event is a true positive when passing detections of its class cover at
    least ``gtc`` of it. A failing detection whose overlap with another class's
    references covers at least ``cttc`` of its duration is a cross-trigger
    toward that class; every other failing detection is a false positive.
    """
    counts = MatchCounts()
    gt_by_clip = _by_clip(ground_truth)
    det_by_clip = _by_clip(detections)
    for clip_id, gts in gt_by_clip.items():
        seen = set()
        for g in gts:
            key = (g.class_id, g.onset, g.offset)
            if key in seen:
                raise ValueError(f"duplicate reference event {key} in clip {clip_id}")
            seen.add(key)
            counts.n_gt[g.class_id] += 1
    names = sorted({e.class_id for e in ground_truth} | {e.class_id for e in detections}, key=str)
    codes = {c: i for i, c in enumerate(names)}
    for clip_id, dets in det_by_clip.items():
        gts = gt_by_clip.get(clip_id, [])
        d_on, d_off, d_cls = _arrays(dets, codes)
        d_len = d_off - d_on
        if not gts:
            for k in d_cls.tolist():
                counts.fp[names[k]] += 1
            continue
        g_on, g_off, g_cls = _arrays(gts, codes)
        ov = _overlaps(d_on, d_off, g_on, g_off)
        same = d_cls[:, None] == g_cls[None, :]
        passing = (ov * same).sum(axis=1) / d_len >= config.dtc
        # per (detection, reference class) overlap totals
        gt_classes = np.unique(g_cls)
        per_class = np.stack([ov[:, g_cls == c].sum(axis=1) for c in gt_classes], axis=1)
        hit = (per_class / d_len[:, None] >= config.cttc) & (gt_classes[None, :] != d_cls[:, None])
        for i in np.flatnonzero(~passing).tolist():
            cross = gt_classes[hit[i]].tolist()
            for c in cross:
                counts.ct[(names[d_cls[i]], names[c])] += 1
            if not cross:
                counts.fp[names[d_cls[i]]] += 1
        cover = (ov * (same & passing[:, None])).sum(axis=0) / (g_off - g_on)
        for j in np.flatnonzero(cover >= config.gtc).tolist():
            counts.tp[names[g_cls[j]]] += 1
    return counts


# --- scoring --------------------------------------------------------------


def roc_points(counts_per_threshold, config: PsdsConfig, duration_hours: float, class_list):
    """Per-threshold (eFPR, TPR) arrays of shape (n_thresholds, n_classes)."""
    if duration_hours <= 0:
        raise ValueError("dataset duration must be positive")
    classes = list(class_list)
    n_t, n_c = len(counts_per_threshold), len(classes)
    tpr = np.zeros((n_t, n_c))
    efpr = np.zeros((n_t, n_c))
    for i, cnt in enumerate(counts_per_threshold):
        for j, c in enumerate(classes):
            n_gt = cnt.n_gt.get(c, 0)
            tpr[i, j] = cnt.tp.get(c, 0) / n_gt if n_gt else 0.0
            others = [o for o in classes if o != c]
            ct_rate = np.mean([cnt.ct.get((c, o), 0) / duration_hours for o in others]) if others else 0.0
            efpr[i, j] = cnt.fp.get(c, 0) / duration_hours + config.alpha_ct * ct_rate
    return efpr, tpr


def psds_score(counts_per_threshold, config: PsdsConfig, duration_hours: float, class_list) -> float:
    """Normalised area under the effective-TPR curve up to ``max_efpr``.

    Each class's ROC is its upper envelope: the best TPR reachable at an
    effective FP rate <= e. Across classes, eTPR(e) = mean - alpha_st * std
    (clipped at 0); the step curve is integrated over [0, max_efpr].
    """
    efpr, tpr = roc_points(counts_per_threshold, config, duration_hours, class_list)
    if tpr.size == 0:
        return 0.0
    e_max = config.max_efpr
    grid = np.unique(np.concatenate([[0.0], efpr[efpr <= e_max].ravel(), [e_max]]))
    env = np.zeros((grid.size, tpr.shape[1]))
    for j in range(tpr.shape[1]):
        for i in range(tpr.shape[0]):
            env[:, j] = np.where(grid >= efpr[i, j], np.maximum(env[:, j], tpr[i, j]), env[:, j])
    etpr = np.clip(env.mean(axis=1) - config.alpha_st * env.std(axis=1), 0.0, None)
    area = float(np.sum(etpr[:-1] * np.diff(grid)))
    return area / e_max


def decode_grid(frame_probs: dict, thresholds, class_list, hop_seconds: float, median_width: int = 7) -> list:
    """Detections for every threshold, one list per grid point."""
    return [
        [e for cid in sorted(frame_probs) for e in decode_events(frame_probs[cid], th, median_width, hop_seconds, class_list, cid)]
        for th in thresholds
    ]


def psds_from_probs(frame_probs: dict, ground_truth, config: PsdsConfig, class_list, hop_seconds: float, median_width: int = 7, decoded=None) -> float:
    """Decode every clip at every grid threshold and score against the references.

    ``decoded`` lets several scenarios sharing a threshold grid reuse one decoding pass.
    """
    if decoded is None:
        decoded = decode_grid(frame_probs, config.thresholds, class_list, hop_seconds, median_width)
    if len(decoded) != len(config.thresholds):
        raise ValueError("decoded detections do not match the threshold grid")
    counts = [intersection_match(dets, ground_truth, config) for dets in decoded]
    hours = len(frame_probs) * CLIP_SECONDS / 3600.0
    return psds_score(counts, config, hours, class_list)


def segment_activity(frame_active: np.ndarray, hop_seconds: float, segment_seconds: float) -> np.ndarray:
    """(T, C) frame activity -> (S, C) segment activity (any active frame)."""
    t = frame_active.shape[0]
    seg = np.floor(np.arange(t) * hop_seconds / segment_seconds + 1e-9).astype(int)
    out = np.zeros((seg.max() + 1, frame_active.shape[1]))
    np.maximum.at(out, seg, frame_active)
    return out


def segment_f1(frame_probs, frame_labels, threshold: float = 0.5, segment_seconds: float = 1.0, hop_seconds: float | None = None) -> float:
    """Macro F1 over classes on fixed-length segments; clips are stacked on axis 0.

    A class with no reference and no predicted activity scores 1.
    """
    probs = np.asarray(frame_probs, dtype=np.float64)
    labels = np.asarray(frame_labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch {probs.shape} vs {labels.shape}")
    if probs.ndim == 2:
        probs, labels = probs[None], labels[None]
    hop = CLIP_SECONDS / probs.shape[1] if hop_seconds is None else hop_seconds
    tp = np.zeros(probs.shape[2])
    fp = np.zeros_like(tp)
    fn = np.zeros_like(tp)
    for p, y in zip(probs, labels):
        sp = segment_activity((p >= threshold).astype(float), hop, segment_seconds)
        sy = segment_activity((y >= 0.5).astype(float), hop, segment_seconds)
        tp += (sp * sy).sum(axis=0)
        fp += (sp * (1 - sy)).sum(axis=0)
        fn += ((1 - sp) * sy).sum(axis=0)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 1.0)
    return float(f1.mean())


# --- interchange ------------------------------------------------------------

TSV_HEADER = "clip_id\tonset\toffset\tclass_name"


def write_events(rows, path) -> None:
    """Write (clip_id, onset, offset, class) rows or DetectedEvents as TSV."""
    lines = [TSV_HEADER]
    for r in rows:
        if isinstance(r, DetectedEvent):
            r = (r.clip_id, r.onset, r.offset, r.class_id)
        cid, on, off, cls = r
        lines.append(f"{cid}\t{on!r}\t{off!r}\t{cls}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_events(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line == TSV_HEADER:
            continue
        cid, on, off, cls = line.split("\t")
        out.append(DetectedEvent(cls, float(on), float(off), cid))
    return out


def score_table(rows: dict) -> str:
    """Plain-text table of named PSDS-like scores."""
    width = max([len(k) for k in rows] + [6])
    lines = [f"{'metric':<{width}}  value"]
    lines += [f"{k:<{width}}  {v:.4f}" for k, v in rows.items()]
    return "\n".join(lines) + "\n"
