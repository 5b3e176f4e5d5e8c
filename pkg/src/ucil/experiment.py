"""End-to-end incremental runs, sweeps over methods/capacities, and result tables."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .baselines import estimate_fisher, fisher_samples, nr_update
from .data import Corpus, SynthConfig, frame_targets, read_corpus, split_tasks, synth_dataset
from .memory import ExemplarStore, event_durations, save_store, update_memory, weak_durations
from .model import ModelConfig, SedModel, expand_heads, forward, init_model, model_hash, snapshot
from .trainer import RECIPES, Recipe, TaskContext, TrainConfig, format_log, train_task

log = logging.getLogger(__name__)

METHODS = ("ucil", "finetune", "joint", "nr", "ewc", "lwf")


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 6
    strong: int = 600
    weak: int = 300
    unlabeled: int = 1200
    test: int = 200
    seed: int = 0
    n_frames: int = 156
    n_mels: int = 64
    path: str | None = None


# full-size constants live in TrainConfig defaults; this is the desk-scale profile
DESK_TRAIN = TrainConfig(epochs=30, warmup_epochs=8, patience=50, ema_decay=0.99, steps_per_epoch=20)
DESK_MODEL = ModelConfig(n_mels=64, frame_count=156, conv_channels=(16, 32, 32), kernel_width=3, embedding_dim=32)


def scale_capacity(full_capacity, spec: DatasetSpec = DatasetSpec()) -> tuple[int, int]:
    """Map a full-size [strong, weak] rehearsal size onto the desk corpus."""
    s, w = full_capacity
    return (int(round(s * spec.strong / 10000)), int(round(w * spec.weak / 1578)))


# the ablation table's reference rehearsal size, [1000, 200], on the desk corpus
DESK_CAPACITY = scale_capacity((1000, 200))


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "ucil"
    task_mode: str = "two_task"
    capacity: tuple = DESK_CAPACITY
    toggles: dict | None = None  # {"fd", "ul", "mu"} -> bool, UCIL only
    seeds: tuple = (0,)
    train: TrainConfig = DESK_TRAIN
    model: ModelConfig = DESK_MODEL
    psds1: ev.PsdsConfig = ev.PSDS1
    psds2: ev.PsdsConfig = ev.PSDS2
    dataset: DatasetSpec = DatasetSpec()
    median_width: int = 7
    evaluate_each_task: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.task_mode not in ("two_task", "four_task"):
            raise ValueError(f"unknown task mode {self.task_mode!r}")
        if self.toggles is not None and self.method != "ucil":
            raise ValueError("FD/UL/MU toggles only apply to method=ucil")
        if self.toggles is not None and not set(self.toggles) <= {"fd", "ul", "mu"}:
            raise ValueError(f"unknown toggles {sorted(set(self.toggles) - {'fd', 'ul', 'mu'})}")
        if not self.seeds:
            raise ValueError("seeds list is empty")
        object.__setattr__(self, "capacity", tuple(int(c) for c in self.capacity))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def flags(self) -> dict:
        base = {"fd": True, "ul": True, "mu": True}
        if self.method == "ucil" and self.toggles:
            base.update({k: bool(v) for k, v in self.toggles.items()})
        return base

    @property
    def label(self) -> str:
        name = self.method
        if self.method == "ucil":
            off = [k.upper() for k, v in self.flags.items() if not v]
            if off:
                name += "-no" + "-no".join(off)
        return name

    @property
    def uses_memory(self) -> bool:
        return self.method in ("ucil", "nr", "ewc", "lwf")

    def recipe(self) -> Recipe:
        r = RECIPES[self.method]
        if self.method == "ucil":
            f = self.flags
            r = replace(r, fd=f["fd"], uod=f["ul"])
        return r

    def to_dict(self) -> dict:
        d = asdict(self)
        d["toggles"] = self.flags if self.method == "ucil" else None
        return d


@dataclass
class RunRecord:
    method: str
    label: str
    capacity: tuple
    seed: int
    final: dict
    per_task: list = field(default_factory=list)
    logs: list = field(default_factory=list)  # per task: list of epoch records
    stages: list = field(default_factory=list)  # (stage name, sha256)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "label": self.label,
            "capacity": list(self.capacity),
            "seed": self.seed,
            "final": self.final,
            "per_task": self.per_task,
            "logs": self.logs,
            "stages": [list(s) for s in self.stages],
            "error": self.error,
        }


@dataclass
class RunReport:
    config: dict
    runs: list
    wall_clock: dict = field(default_factory=dict)  # kept out of the serialized report

    def to_json(self) -> str:
        body = {"config": self.config, "runs": [r.to_dict() for r in self.runs]}
        return json.dumps(body, sort_keys=True, indent=1, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def _sha(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else json.dumps(p, sort_keys=True, default=_json_default).encode())
    return h.hexdigest()


def store_hash(store: ExemplarStore) -> str:
    return _sha(
        list(store.capacity),
        {k: store.strong[k] for k in sorted(store.strong)},
        {k: store.weak[k] for k in sorted(store.weak)},
        {k: store.assigned[k] for k in sorted(store.assigned)},
    )


@lru_cache(maxsize=4)
def load_corpus(spec: DatasetSpec) -> Corpus:
    if spec.path:
        return read_corpus(spec.path)
    counts = {"strong": spec.strong, "weak": spec.weak, "unlabeled": spec.unlabeled, "test": spec.test}
    return synth_dataset(spec.n_classes, counts, spec.seed, SynthConfig(n_frames=spec.n_frames, n_mels=spec.n_mels))


def task_candidates(corpus: Corpus, task) -> dict:
    """Rehearsal candidates of a task: clip -> {class: exposure seconds} over its classes."""
    cls = set(task.classes)
    strong = {}
    for cid in task.strong:
        exp = event_durations([e for e in corpus.clip(cid).events if e.label in cls])
        if exp:
            strong[cid] = exp
    weak = {}
    for cid in task.weak:
        exp = weak_durations([corpus.clip(cid).labels & cls])
        if exp:
            weak[cid] = exp
    return {"strong": strong, "weak": weak}


def evaluate(model: SedModel, corpus: Corpus, classes, config: ExperimentConfig, clip_ids=None) -> dict:
    """PSDS-like 1/2 and segment F1 on the test split, restricted to ``classes``."""
    clip_ids = corpus.select("test") if clip_ids is None else clip_ids
    cols = model.class_index(classes)
    probs = {}
    batch = 64
    for k in range(0, len(clip_ids), batch):
        ids = clip_ids[k : k + batch]
        logits, _ = forward(model, corpus.feats(ids))
        p = 1.0 / (1.0 + np.exp(-logits.data[..., cols]))
        for cid, pc in zip(ids, p):
            probs[cid] = pc
    gt = [
        ev.DetectedEvent(e.label, e.onset, e.offset, cid)
        for cid in clip_ids
        for e in corpus.clip(cid).events
        if e.label in set(classes)
    ]
    hop = corpus.hop_seconds
    labels = np.stack([frame_targets(corpus.clip(c), classes, hop, corpus.n_frames) for c in clip_ids])
    stacked = np.stack([probs[c] for c in clip_ids])
    per_class = {c: ev.segment_f1(stacked[..., [j]], labels[..., [j]], 0.5) for j, c in enumerate(classes)}
    decoded = ev.decode_grid(probs, config.psds1.thresholds, classes, hop, config.median_width)
    shared = decoded if config.psds2.thresholds == config.psds1.thresholds else None
    return {
        "psds1": ev.psds_from_probs(probs, gt, config.psds1, classes, hop, config.median_width, decoded),
        "psds2": ev.psds_from_probs(probs, gt, config.psds2, classes, hop, config.median_width, shared),
        "seg_f1": ev.segment_f1(stacked, labels, 0.5),
        "class_f1": per_class,
    }


def run_single(config: ExperimentConfig, seed: int) -> RunRecord:
    """Train tasks 0..N in order and evaluate the final model on every class."""
    corpus = load_corpus(config.dataset)
    mode = "joint" if config.method == "joint" else config.task_mode
    tasks = split_tasks(corpus, mode, seed)
    rec = RunRecord(config.method, config.label, config.capacity, seed, final={})
    rec.stages.append(("split", _sha([t.classes for t in tasks], [t.validation for t in tasks])))
    recipe = config.recipe()
    flags = config.flags

    if config.model.n_mels != corpus.features.shape[2] or config.model.frame_count != corpus.n_frames:
        mcfg = replace(config.model, n_mels=corpus.features.shape[2], frame_count=corpus.n_frames)
    else:
        mcfg = config.model

    model = init_model(mcfg, tasks[0].classes, seed)
    previous = None
    store = ExemplarStore(capacity=config.capacity) if config.uses_memory else None
    ewc_terms = []
    stage = "init"
    try:
        for i, task in enumerate(tasks):
            if i > 0:
                stage = f"expand[{i}]"
                previous = snapshot(model)
                model = expand_heads(model, task.classes, seed * 1000 + i)
                rec.stages.append((stage, model_hash(model)))
            ctx = TaskContext(
                task_index=i,
                existing=list(previous.class_order) if previous is not None else [],
                new=list(task.classes),
                omega=config.train.omega,
                previous=previous,
                recipe=recipe,
                ewc_terms=list(ewc_terms),
                lambda_ewc=config.train.lambda_ewc,
                lwf_weight=config.train.lwf_weight,
            )
            stage = f"train[{i}]"
            result = train_task(model, task, corpus, config.train, ctx, store, seed)
            model = result.teacher
            rec.logs.append(result.log)
            rec.stages.append((stage, _sha(model_hash(model).encode(), format_log(result.log).encode())))
            log.info("%s seed=%d task %d: %d steps, final total %.4f", config.label, seed, i, result.steps, result.log[-1]["total"])

            if config.evaluate_each_task:
                stage = f"eval[{i}]"
                seen = list(model.class_order)
                rec.per_task.append({"task": i, "classes": seen, **evaluate(model, corpus, seen, config)})

            last = i == len(tasks) - 1
            if store is not None and not last:
                stage = f"memory[{i}]"
                cands = task_candidates(corpus, task)
                mseed = seed * 1000 + i
                if config.method == "ucil" and flags["mu"]:
                    store = update_memory(store, cands, model.class_order, mseed)
                else:
                    store = nr_update(store, cands, model.class_order, mseed)
                rec.stages.append((stage, store_hash(store)))
            if recipe.ewc and not last:
                stage = f"fisher[{i}]"
                samples = fisher_samples(model, corpus, task.strong + task.weak, set(task.classes))
                fisher = estimate_fisher(model, samples, config.train.fisher_samples, seed=seed * 1000 + i)
                ewc_terms.append(({k: v.copy() for k, v in model.params.items()}, fisher.values))
                rec.stages.append((stage, _sha(*[v.tobytes() for v in fisher.values.values()])))
        stage = "final_eval"
        rec.final = evaluate(model, corpus, list(model.class_order), config)
        rec.stages.append((stage, _sha(rec.final)))
    except Exception as exc:  # surfaced per row by run_matrix
        rec.error = f"{stage}: {type(exc).__name__}: {exc}"
        raise RuntimeError(rec.error) from exc
    return rec


def run_experiment(config: ExperimentConfig) -> RunReport:
    runs, clock = [], {}
    for seed in config.seeds:
        t0 = time.perf_counter()
        runs.append(run_single(config, seed))
        clock[seed] = time.perf_counter() - t0
    return RunReport(config.to_dict(), runs, clock)


def write_report(report: RunReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "timing.json").write_text(json.dumps({str(k): v for k, v in report.wall_clock.items()}, indent=1))
    for r in report.runs:
        for i, records in enumerate(r.logs):
            (out / f"train_{r.label}_seed{r.seed}_task{i}.log").write_text(format_log(records))
    return out


def _run_config(config):
    try:
        return run_experiment(config), None
    except Exception as exc:  # noqa: BLE001 - row-level failure
        return None, str(exc)


def run_matrix(configs, workers: int = 1) -> dict:
    """Run every config; rows hold medians over seeds (failed rows keep their error)."""
    configs = list(configs)
    if not configs:
        raise ValueError("run_matrix: empty config list")
    for c in configs:
        if not c.seeds:
            raise ValueError("run_matrix: a config has no seeds")
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(_run_config, configs))
    else:
        outcomes = [_run_config(c) for c in configs]
    rows = []
    for cfg, (report, err) in zip(configs, outcomes):
        row = {"method": cfg.label, "capacity": list(cfg.capacity) if cfg.uses_memory else None, "toggles": cfg.flags if cfg.method == "ucil" else None}
        if report is None:
            row.update({"psds1": None, "psds2": None, "seg_f1": None, "error": err})
        else:
            for m in ("psds1", "psds2", "seg_f1"):
                row[m] = float(np.median([r.final[m] for r in report.runs]))
            row["error"] = None
        rows.append(row)
    return {"rows": rows, "reports": [o[0] for o in outcomes]}


def format_table(rows) -> str:
    head = f"{'method':<22} {'rehearsal':<12} {'PSDS-like-1':>11} {'PSDS-like-2':>11} {'segF1':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        cap = "-" if r["capacity"] is None else f"[{r['capacity'][0]}, {r['capacity'][1]}]"
        if r.get("error"):
            lines.append(f"{r['method']:<22} {cap:<12} FAILED: {r['error']}")
            continue
        lines.append(f"{r['method']:<22} {cap:<12} {r['psds1']:>11.3f} {r['psds2']:>11.3f} {r['seg_f1']:>7.3f}")
    return "\n".join(lines) + "\n"


def emit_plotdata(report: RunReport, out_dir) -> list:
    """Per-epoch loss curves and a score-vs-rehearsal-size series as TSV files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for r in report.runs:
        for i, records in enumerate(r.logs):
            p = out / f"loss_{r.label}_cap{r.capacity[0]}-{r.capacity[1]}_seed{r.seed}_task{i}.tsv"
            p.write_text(format_log(records))
            written.append(p)
    by_cap: dict = {}
    for r in report.runs:
        by_cap.setdefault(tuple(r.capacity), []).append(r.final)
    lines = ["capacity_strong\tcapacity_weak\tpsds1\tpsds2\tseg_f1"]
    for cap in sorted(by_cap):
        finals = by_cap[cap]
        med = [float(np.median([f[m] for f in finals])) for m in ("psds1", "psds2", "seg_f1")]
        lines.append("\t".join([str(cap[0]), str(cap[1])] + [repr(v) for v in med]))
    p = out / "rehearsal_sweep.tsv"
    p.write_text("\n".join(lines) + "\n")
    written.append(p)
    return written


def merge_reports(reports) -> RunReport:
    reports = [r for r in reports if r is not None]
    return RunReport({"merged": [r.config for r in reports]}, [run for r in reports for run in r.runs])


# --- table-shaped presets ----------------------------------------------------


def table_configs(table: str, base: ExperimentConfig | None = None) -> list:
    """Method x rehearsal-size (x toggles) rows shaped like the result tables."""
    base = base or ExperimentConfig()
    sc = scale_capacity
    if table == "table1":
        mode = "two_task"
        caps = [sc((4000, 400)), sc((2000, 200)), sc((1000, 100))]
        ref = caps[0]
    elif table == "table2":
        mode = "four_task"
        caps = [sc((2000, 200)), sc((1000, 200)), sc((1000, 100))]
        ref = caps[0]
    elif table == "table3":
        mode = base.task_mode
        cap = sc((1000, 200))
        return [
            replace(base, method="ucil", task_mode=mode, capacity=cap, toggles=t)
            for t in (
                {"fd": True, "ul": True, "mu": True},
                {"fd": True, "ul": True, "mu": False},
                {"fd": True, "ul": False, "mu": True},
                {"fd": False, "ul": True, "mu": True},
            )
        ]
    else:
        raise ValueError(f"unknown table preset {table!r}")
    rows = [
        replace(base, method="finetune", task_mode=mode, toggles=None),
        replace(base, method="joint", task_mode=mode, toggles=None),
        replace(base, method="ewc", task_mode=mode, capacity=ref, toggles=None),
        replace(base, method="lwf", task_mode=mode, capacity=ref, toggles=None),
        replace(base, method="nr", task_mode=mode, capacity=ref, toggles=None),
    ]
    rows += [replace(base, method="ucil", task_mode=mode, capacity=c, toggles=None) for c in caps]
    return rows
