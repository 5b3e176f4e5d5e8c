"""Clip records, synthetic corpus generation, log-mel features and task splits."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLIP_SECONDS = 10.0
FEATURE_MAGIC = b"UCILFEA1"

DCASE_CLASSES = [
    "Alarm_bell_ringing",
    "Blender",
    "Cat",
    "Dishes",
    "Dog",
    "Electric_shaver_toothbrush",
    "Frying",
    "Running_water",
    "Speech",
    "Vacuum_cleaner",
]

# acoustic grouping used by the four-task setting
FOUR_TASK_GROUPS = [
    ["Vacuum_cleaner", "Frying", "Blender"],
    ["Electric_shaver_toothbrush", "Running_water"],
    ["Speech", "Dog", "Cat"],
    ["Dishes", "Alarm_bell_ringing"],
]

ANNOTATIONS = ("strong", "weak", "unlabeled")


@dataclass(frozen=True)
class Event:
    label: str
    onset: float
    offset: float

    def __post_init__(self):
        if not 0.0 <= self.onset <= self.offset <= CLIP_SECONDS + 1e-9:
            raise ValueError(f"invalid event bounds: {self}")


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    annotation: str
    split: str = "train"
    events: tuple = ()
    labels: frozenset = frozenset()
    feature_path: str | None = None
    duration: float = CLIP_SECONDS

    def __post_init__(self):
        if self.annotation not in ANNOTATIONS:
            raise ValueError(f"unknown annotation variant {self.annotation!r}")
        if self.annotation == "strong":
            object.__setattr__(self, "labels", frozenset(e.label for e in self.events))
        elif self.events:
            raise ValueError(f"{self.clip_id}: only strong clips carry events")
        if self.annotation == "unlabeled" and self.labels:
            raise ValueError(f"{self.clip_id}: unlabeled clip with labels")
        object.__setattr__(self, "labels", frozenset(self.labels))

    def to_json(self) -> dict:
        rec = {"clip_id": self.clip_id, "split": self.split, "annotation": self.annotation}
        if self.annotation == "strong":
            rec["events"] = [[e.label, e.onset, e.offset] for e in self.events]
        elif self.annotation == "weak":
            rec["labels"] = sorted(self.labels)
        rec["feature_path"] = self.feature_path
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "ClipRecord":
        events = tuple(Event(lab, float(on), float(off)) for lab, on, off in rec.get("events", []))
        return cls(
            clip_id=rec["clip_id"],
            annotation=rec["annotation"],
            split=rec.get("split", "train"),
            events=events,
            labels=frozenset(rec.get("labels", [])),
            feature_path=rec.get("feature_path"),
        )


@dataclass
class Corpus:
    classes: list
    clips: list
    features: np.ndarray  # (N, T, F)
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {c.clip_id: i for i, c in enumerate(self.clips)}
        if len(self.index) != len(self.clips):
            raise ValueError("duplicate clip ids")

    @property
    def n_frames(self) -> int:
        return self.features.shape[1]

    @property
    def hop_seconds(self) -> float:
        return CLIP_SECONDS / self.n_frames

    def clip(self, clip_id) -> ClipRecord:
        return self.clips[self.index[clip_id]]

    def feats(self, clip_ids) -> np.ndarray:
        return self.features[[self.index[c] for c in clip_ids]]

    def select(self, split=None, annotation=None) -> list:
        return [
            c.clip_id
            for c in self.clips
            if (split is None or c.split == split) and (annotation is None or c.annotation == annotation)
        ]


def frame_span(event: Event, hop: float, n_frames: int) -> tuple[int, int]:
    t0 = min(n_frames, int(round(event.onset / hop)))
    t1 = min(n_frames, int(round(event.offset / hop)))
    return t0, t1


def frame_targets(clip: ClipRecord, class_order, hop, n_frames, visible=None) -> np.ndarray:
    """(T, |C|) multi-hot frame labels, restricted to ``visible`` classes."""
    y = np.zeros((n_frames, len(class_order)))
    col = {c: k for k, c in enumerate(class_order)}
    for e in clip.events:
        if e.label in col and (visible is None or e.label in visible):
            t0, t1 = frame_span(e, hop, n_frames)
            y[t0:t1, col[e.label]] = 1.0
    return y


def clip_targets(clip: ClipRecord, class_order, visible=None) -> np.ndarray:
    y = np.zeros(len(class_order))
    for k, c in enumerate(class_order):
        if c in clip.labels and (visible is None or c in visible):
            y[k] = 1.0
    return y


# --- feature files and manifest ------------------------------------------


def write_features(path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float64)
    t, f = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", t, f))
        fh.write(np.ascontiguousarray(features, dtype="<f8").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    t, f = struct.unpack_from("<II", raw, 8)
    body = raw[16:]
    if len(body) != t * f * 8:
        raise ValueError(f"{path}: expected {t}x{f} values, got {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(t, f).astype(np.float64)


def write_corpus(corpus: Corpus, directory) -> Path:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, clip in enumerate(corpus.clips):
        rel = f"features/{clip.clip_id}.fea"
        write_features(directory / rel, corpus.features[i])
        rec = ClipRecord(clip.clip_id, clip.annotation, clip.split, clip.events, clip.labels, rel).to_json()
        lines.append(json.dumps(rec, sort_keys=True))
    (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    (directory / "classes.json").write_text(json.dumps(corpus.classes) + "\n")
    return directory


def read_corpus(directory) -> Corpus:
    directory = Path(directory)
    clips = []
    feats = []
    for line in (directory / "manifest.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        clip = ClipRecord.from_json(json.loads(line))
        clips.append(clip)
        feats.append(read_features(directory / clip.feature_path))
    classes = json.loads((directory / "classes.json").read_text())
    return Corpus(classes, clips, np.stack(feats))


def write_ground_truth(clips, path) -> None:
    """Strong annotations in the evaluation tab-separated format."""
    from .evaluation import write_events

    write_events(
        [(c.clip_id, e.onset, e.offset, e.label) for c in clips for e in c.events],
        path,
    )


# --- log-mel --------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate, fmin=0.0, fmax=None) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def logmel(waveform, sample_rate=16000, window=2048, hop=256, n_mels=128, floor=1e-10) -> np.ndarray:
    """Magnitude STFT (Hann) -> mel filterbank -> natural log. Returns (T, n_mels)."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise ValueError("waveform must be a finite 1-D array")
    if x.size < window:
        raise ValueError(f"waveform of {x.size} samples is shorter than the {window}-sample window")
    n_frames = (x.size - window) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n_frames]
    win = np.hanning(window + 1)[:-1]  # periodic Hann
    mag = np.abs(np.fft.rfft(frames * win, axis=1))
    mel = mag @ mel_filterbank(n_mels, window, sample_rate).T
    return np.log(np.maximum(mel, floor))


# --- synthetic corpus -------------------------------------------------------


def default_class_names(n_classes: int) -> list:
    if n_classes <= len(DCASE_CLASSES):
        return DCASE_CLASSES[:n_classes]
    return [f"class_{k:02d}" for k in range(n_classes)]


def class_prototypes(n_classes: int, n_mels: int, seed: int) -> np.ndarray:
    """One band-limited spectral profile per class (peak value 1), shape (C, F)."""
    rng = np.random.default_rng([seed, 7919])
    bins = np.arange(n_mels)
    centers = np.linspace(0.08, 0.92, n_classes) * (n_mels - 1)
    centers = centers + rng.uniform(-1.0, 1.0, n_classes)
    protos = np.zeros((n_classes, n_mels))
    for k in range(n_classes):
        width = rng.uniform(1.5, 3.0) * n_mels / 64
        main = np.exp(-0.5 * ((bins - centers[k]) / width) ** 2)
        # weaker secondary band shared across neighbourhoods makes classes overlap
        c2 = rng.uniform(0, n_mels - 1)
        side = 0.5 * np.exp(-0.5 * ((bins - c2) / (2 * width)) ** 2)
        protos[k] = np.maximum(main, side)
    return protos / protos.max(axis=1, keepdims=True)


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 156
    n_mels: int = 64
    min_events: int = 1
    max_events: int = 3
    min_duration: float = 0.5
    max_duration: float = 4.0
    min_gain: float = 1.5
    max_gain: float = 3.5
    noise_std: float = 1.0


def _synth_clip(rng, protos, priors, cfg: SynthConfig, classes):
    hop = CLIP_SECONDS / cfg.n_frames
    feats = rng.normal(0.0, cfg.noise_std, size=(cfg.n_frames, cfg.n_mels))
    tilt = rng.normal(0.0, 0.3) * np.linspace(-1, 1, cfg.n_mels)
    feats += tilt
    events = []
    for _ in range(rng.integers(cfg.min_events, cfg.max_events + 1)):
        k = rng.choice(len(classes), p=priors)
        n = max(1, int(round(rng.uniform(cfg.min_duration, cfg.max_duration) / hop)))
        t0 = int(rng.integers(0, cfg.n_frames - n + 1))
        gain = rng.uniform(cfg.min_gain, cfg.max_gain)
        feats[t0 : t0 + n] += gain * protos[k]
        events.append(Event(classes[k], t0 * hop, (t0 + n) * hop))
    events.sort(key=lambda e: (e.onset, e.label))
    return feats, _merge_same_class(events)


def _merge_same_class(events):
    """Overlapping events of one class become a single reference event."""
    out = []
    for label in sorted({e.label for e in events}):
        spans = sorted((e.onset, e.offset) for e in events if e.label == label)
        cur = list(spans[0])
        for on, off in spans[1:]:
            if on <= cur[1]:
                cur[1] = max(cur[1], off)
            else:
                out.append(Event(label, cur[0], cur[1]))
                cur = [on, off]
        out.append(Event(label, cur[0], cur[1]))
    return tuple(sorted(out, key=lambda e: (e.onset, e.label)))


def synth_dataset(
    n_classes: int = 6,
    counts: dict | None = None,
    seed: int = 0,
    config: SynthConfig = SynthConfig(),
    class_priors=None,
) -> Corpus:
    """Deterministic desk-scale corpus generated directly in the feature domain.

    ``counts`` maps ``strong``, ``weak``, ``unlabeled`` (training) and ``test``
    (strongly labeled evaluation clips) to clip numbers.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    counts = {"strong": 600, "weak": 300, "unlabeled": 1200, "test": 200, **(counts or {})}
    classes = default_class_names(n_classes)
    priors = np.full(n_classes, 1.0 / n_classes) if class_priors is None else np.asarray(class_priors, float)
    if priors.shape != (n_classes,) or np.any(priors < 0) or not np.isclose(priors.sum(), 1.0):
        raise ValueError("class_priors must be a probability vector over the classes")
    protos = class_prototypes(n_classes, config.n_mels, seed)

    clips, feats = [], []
    streams = [("strong", "train", "s"), ("weak", "train", "w"), ("unlabeled", "train", "u"), ("test", "test", "t")]
    for s_idx, (kind, split, prefix) in enumerate(streams):
        for j in range(counts[kind]):
            rng = np.random.default_rng([seed, s_idx, j])
            x, events = _synth_clip(rng, protos, priors, config, classes)
            cid = f"{prefix}{j:05d}"
            if kind in ("strong", "test"):
                clips.append(ClipRecord(cid, "strong", split, events))
            elif kind == "weak":
                clips.append(ClipRecord(cid, "weak", split, labels=frozenset(e.label for e in events)))
            else:
                clips.append(ClipRecord(cid, "unlabeled", split))
            feats.append(x)
    shape = (0, config.n_frames, config.n_mels)
    return Corpus(classes, clips, np.stack(feats) if feats else np.zeros(shape))


# --- task splits ------------------------------------------------------------


@dataclass
class TaskSpec:
    task_index: int
    classes: list
    strong: list = field(default_factory=list)
    weak: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    validation: list = field(default_factory=list)


def task_groups(class_list, mode: str, seed: int) -> list:
    """Partition classes into incremental tasks (``two_task`` or ``four_task``)."""
    classes = list(class_list)
    rng = np.random.default_rng([seed, 104729])
    if mode == "two_task":
        perm = [classes[i] for i in rng.permutation(len(classes))]
        half = len(classes) // 2
        return [perm[:half], perm[half:]]
    if mode == "four_task":
        known = [c in DCASE_CLASSES for c in classes]
        if all(known):
            groups = [[c for c in g if c in classes] for g in FOUR_TASK_GROUPS]
            groups = [g for g in groups if g]
        elif not any(known):
            if len(classes) < 4:
                raise ValueError("four_task needs at least four classes")
            perm = [classes[i] for i in rng.permutation(len(classes))]
            groups = [list(a) for a in np.array_split(np.array(perm, dtype=object), 4)]
        else:
            unknown = [c for c in classes if c not in DCASE_CLASSES]
            raise ValueError(f"four_task: unknown class names for the fixed grouping: {unknown}")
        return [groups[i] for i in rng.permutation(len(groups))]
    if mode == "joint":
        return [classes]
    raise ValueError(f"unknown task mode {mode!r}")


def split_tasks(corpus: Corpus, mode: str, seed: int, val_fraction: float = 0.1, groups=None) -> list:
    """Build per-task partitions; each labeled clip lands in every task it has labels for."""
    groups = task_groups(corpus.classes, mode, seed) if groups is None else groups
    seen = [c for g in groups for c in g]
    if len(set(seen)) != len(seen) or set(seen) != set(corpus.classes):
        raise ValueError("task class lists must partition the class set")
    unlabeled = corpus.select("train", "unlabeled")
    tasks = []
    for i, g in enumerate(groups):
        gs = set(g)
        strong = [c for c in corpus.select("train", "strong") if corpus.clip(c).labels & gs]
        weak = [c for c in corpus.select("train", "weak") if corpus.clip(c).labels & gs]
        rng = np.random.default_rng([seed, 15485863, i])
        labeled = strong + weak
        n_val = int(math.floor(val_fraction * len(labeled)))
        val = set(labeled[k] for k in rng.permutation(len(labeled))[:n_val])
        tasks.append(
            TaskSpec(
                task_index=i,
                classes=list(g),
                strong=[c for c in strong if c not in val],
                weak=[c for c in weak if c not in val],
                unlabeled=list(unlabeled),
                validation=[c for c in labeled if c in val],
            )
        )
    return tasks
