"""Balanced rehearsal memory over strongly and weakly labeled clips."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CLIP_SECONDS

BUFFERS = ("strong", "weak")


def event_durations(events) -> dict:
    """Total annotated seconds per class from (label, onset, offset) events."""
    out: dict = defaultdict(float)
    for ev in events:
        label, onset, offset = (ev.label, ev.onset, ev.offset) if hasattr(ev, "label") else ev
        if offset < onset:
            raise ValueError(f"event of {label!r} ends before it starts ({onset} > {offset})")
        out[label] += offset - onset
    return dict(out)


def weak_durations(weak_labels) -> dict:
    """Each clip-level label counts as a full clip of exposure."""
    out: dict = defaultdict(float)
    for labels in weak_labels:
        for label in labels:
            out[label] += CLIP_SECONDS
    return dict(out)


@dataclass
class ExemplarStore:
    """Capacity-bounded rehearsal buffers.

    Each buffer maps clip id -> {class: exposure seconds} over the classes the
    clip was annotated for when it entered memory. ``assigned`` records the one
    class each clip counts toward for balancing.
    """

    capacity: tuple = (0, 0)
    strong: dict = field(default_factory=dict)
    weak: dict = field(default_factory=dict)
    assigned: dict = field(default_factory=dict)

    def buffer(self, name) -> dict:
        return {"strong": self.strong, "weak": self.weak}[name]

    @property
    def ledger(self) -> dict:
        out: dict = defaultdict(float)
        for name in BUFFERS:
            for exp in self.buffer(name).values():
                for c, s in exp.items():
                    out[c] += s
        return dict(out)

    def class_counts(self, name) -> dict:
        counts: dict = defaultdict(int)
        for cid in self.buffer(name):
            counts[self.assigned[cid]] += 1
        return dict(counts)

    def visible_labels(self, clip_id) -> frozenset:
        exp = self.strong.get(clip_id) or self.weak.get(clip_id) or {}
        return frozenset(exp)

    def __len__(self) -> int:
        return len(self.strong) + len(self.weak)


def _dominant(exposure: dict, order: dict):
    return min(exposure, key=lambda c: (-exposure[c], order[c]))


def _restrict(pool: dict, seen) -> dict:
    out = {}
    for cid, exp in pool.items():
        exp = {c: s for c, s in exp.items() if c in seen}
        if exp:
            out[cid] = exp
    return out


def balanced_fill(pool: dict, capacity: int, seen_classes, rng) -> tuple[dict, dict]:
    """Round-robin, class-balanced selection from ``pool`` (clip -> exposures).

    Classes take turns in ascending order of pool exposure (ties by position in
    ``seen_classes``), so the ``capacity % |classes|`` leftover slots and any
    slots a class cannot use go to the least-exposed classes. A class draws
    uniformly without replacement among unselected clips containing it,
    preferring clips where it is the longest-exposure class. Each clip counts
    toward exactly one class.
    """
    seen = list(seen_classes)
    order = {c: k for k, c in enumerate(seen)}
    pool = _restrict(pool, set(seen))
    exposure: dict = defaultdict(float)
    for exp in pool.values():
        for c, s in exp.items():
            exposure[c] += s
    turn = sorted(seen, key=lambda c: (exposure[c], order[c]))

    preferred = {c: [] for c in seen}
    other = {c: [] for c in seen}
    for cid in sorted(pool):
        dom = _dominant(pool[cid], order)
        for c in pool[cid]:
            (preferred if c == dom else other)[c].append(cid)
    # a seeded permutation of each candidate list == uniform draws without replacement
    queues = {}
    for c in turn:
        pref = [preferred[c][i] for i in rng.permutation(len(preferred[c]))]
        oth = [other[c][i] for i in rng.permutation(len(other[c]))]
        queues[c] = pref + oth

    chosen: dict = {}
    assigned: dict = {}
    active = list(turn)
    slots = capacity
    while slots > 0 and active:
        still = []
        for c in active:
            if slots == 0:
                still.append(c)
                continue
            q = queues[c]
            while q and q[0] in chosen:
                q.pop(0)
            if not q:
                continue
            cid = q.pop(0)
            chosen[cid] = pool[cid]
            assigned[cid] = c
            slots -= 1
            still.append(c)
        active = still if slots > 0 else []
    return chosen, assigned


def update_memory(store: ExemplarStore, task_data: dict, seen_classes, seed: int) -> ExemplarStore:
    """Re-balance both buffers over previous exemplars plus the current task's clips.

    ``task_data`` maps ``strong``/``weak`` to {clip id: {class: seconds}}.
    """
    new = ExemplarStore(capacity=tuple(store.capacity))
    for b, name in enumerate(BUFFERS):
        pool = {**store.buffer(name), **task_data.get(name, {})}
        rng = np.random.default_rng([seed, b])
        chosen, assigned = balanced_fill(pool, int(store.capacity[b]), seen_classes, rng)
        new.buffer(name).update(chosen)
        new.assigned.update(assigned)
    return new


def random_fill(pool: dict, capacity: int, seen_classes, rng) -> tuple[dict, dict]:
    """Uniform random subset of the pool with no class balancing."""
    seen = list(seen_classes)
    order = {c: k for k, c in enumerate(seen)}
    pool = _restrict(pool, set(seen))
    ids = sorted(pool)
    picked = [ids[i] for i in rng.permutation(len(ids))[:capacity]]
    chosen = {cid: pool[cid] for cid in picked}
    return chosen, {cid: _dominant(pool[cid], order) for cid in picked}


def draw_rehearsal(store: ExemplarStore, n_strong: int, n_weak: int, seed: int) -> tuple[list, list]:
    """Seeded uniform draw without replacement from each buffer."""
    out = []
    for b, (name, n) in enumerate(zip(BUFFERS, (n_strong, n_weak))):
        ids = sorted(store.buffer(name))
        if n > len(ids) or n < 0:
            raise ValueError(f"cannot draw {n} clips from the {name} buffer of size {len(ids)}")
        rng = np.random.default_rng([seed, b])
        out.append([ids[i] for i in rng.permutation(len(ids))[:n]])
    return out[0], out[1]


def save_store(store: ExemplarStore, path) -> None:
    """One ``buffer,class,clip_id,exposure_seconds`` record per (clip, class).

    The first record of each clip names the class the clip is assigned to.
    """
    lines = [f"# capacity,{store.capacity[0]},{store.capacity[1]}"]
    for name in BUFFERS:
        for cid in sorted(store.buffer(name)):
            exp = store.buffer(name)[cid]
            first = store.assigned[cid]
            for c in [first] + sorted(k for k in exp if k != first):
                lines.append(f"{name},{c},{cid},{exp[c]!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_store(path) -> ExemplarStore:
    store = ExemplarStore()
    for line in Path(path).read_text().splitlines():
        if line.startswith("# capacity,"):
            _, s, w = line.split(",")
            store.capacity = (int(s), int(w))
            continue
        if not line.strip():
            continue
        name, c, cid, sec = line.split(",")
        buf = store.buffer(name)
        if cid not in buf:
            buf[cid] = {}
            store.assigned[cid] = c
        buf[cid][c] = float(sec)
    return store
