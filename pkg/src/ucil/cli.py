"""Command-line entry point: synth, run, matrix, score, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import yaml

from . import evaluation as ev
from .data import SynthConfig, synth_dataset, write_corpus, write_ground_truth
from .experiment import (
    DatasetSpec,
    ExperimentConfig,
    emit_plotdata,
    format_table,
    merge_reports,
    run_experiment,
    run_matrix,
    table_configs,
    write_report,
)
from .model import ModelConfig
from .trainer import TrainConfig

log = logging.getLogger("ucil")

SECTIONS = {"train": TrainConfig, "model": ModelConfig, "dataset": DatasetSpec, "psds1": ev.PsdsConfig, "psds2": ev.PsdsConfig}


def _build(cls, base, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return replace(base, **values)


def config_from_dict(d: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Overlay a nested mapping (as read from YAML) onto the desk defaults."""
    base = base or ExperimentConfig()
    d = dict(d or {})
    kw = {}
    for name in SECTIONS:
        if name in d:
            kw[name] = _build(SECTIONS[name], getattr(base, name), d.pop(name) or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kw.update(d)
    return replace(base, **kw)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


def _toggle_arg(text: str) -> dict:
    out = {}
    for part in text.split(","):
        key, _, val = part.partition("=")
        if val not in ("on", "off"):
            raise argparse.ArgumentTypeError(f"toggle {part!r}: expected name=on|off")
        out[key.strip().lower()] = val == "on"
    return out


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    kw = {}
    if args.method:
        kw["method"] = args.method
    if args.task_mode:
        kw["task_mode"] = args.task_mode
    if args.capacity:
        kw["capacity"] = tuple(args.capacity)
    if args.seeds is not None:
        kw["seeds"] = tuple(args.seeds)
    if args.toggles:
        kw["toggles"] = args.toggles
    if args.per_task:
        kw["evaluate_each_task"] = True
    train = {k: v for k, v in (("epochs", args.epochs), ("batch_size", args.batch_size), ("omega", args.omega), ("lambda_ewc", args.lambda_ewc)) if v is not None}
    if train:
        kw["train"] = replace(cfg.train, **train)
    if args.corpus:
        kw["dataset"] = replace(cfg.dataset, path=str(args.corpus))
    return replace(cfg, **kw)


def _add_run_flags(p):
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--method", choices=("ucil", "finetune", "joint", "nr", "ewc", "lwf"))
    p.add_argument("--task-mode", choices=("two_task", "four_task"))
    p.add_argument("--capacity", type=int, nargs=2, metavar=("S", "W"))
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--toggles", type=_toggle_arg, help="e.g. fd=on,ul=off,mu=on")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--lambda-ewc", type=float)
    p.add_argument("--corpus", type=Path, help="corpus directory written by `synth`")
    p.add_argument("--per-task", action="store_true", help="also evaluate after every task")
    p.add_argument("--out", type=Path, default=Path("runs/latest"))


def cmd_synth(args) -> int:
    counts = {"strong": args.strong, "weak": args.weak, "unlabeled": args.unlabeled, "test": args.test}
    corpus = synth_dataset(args.n_classes, counts, args.seed, SynthConfig(n_frames=args.frames, n_mels=args.mels))
    out = write_corpus(corpus, args.out)
    test = [corpus.clip(c) for c in corpus.select("test")]
    write_ground_truth(test, out / "test_ground_truth.tsv")
    print(f"wrote {len(corpus.clips)} clips to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = _apply_overrides(cfg, args)
    try:
        report = run_experiment(cfg)
    except RuntimeError as exc:
        print(f"run failed at stage {exc}", file=sys.stderr)
        return 1
    out = write_report(report, args.out)
    emit_plotdata(report, out / "plots")
    for r in report.runs:
        f = r.final
        print(f"{r.label} seed={r.seed} psds1={f['psds1']:.4f} psds2={f['psds2']:.4f} seg_f1={f['seg_f1']:.4f}")
    return 0


def cmd_matrix(args) -> int:
    base = load_config(args.config) if args.config else ExperimentConfig()
    base = _apply_overrides(base, args)
    configs = table_configs(args.table, base)
    result = run_matrix(configs, workers=args.workers)
    table = format_table(result["rows"])
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.table}.txt").write_text(table)
    (out / f"{args.table}.json").write_text(json.dumps(result["rows"], indent=1, sort_keys=True))
    merged = merge_reports(result["reports"])
    emit_plotdata(merged, out / "plots")
    print(table, end="")
    return 1 if any(r["error"] for r in result["rows"]) else 0


def cmd_score(args) -> int:
    gt = ev.read_events(args.ground_truth)
    classes = sorted({e.class_id for e in gt})
    clips = {e.clip_id for e in gt}
    dets = [ev.read_events(p) for p in args.detections]
    for d in dets:
        clips |= {e.clip_id for e in d}
    hours = args.hours if args.hours else len(clips) * 10.0 / 3600.0
    rows = {}
    for name, cfg in (("PSDS-like-1", ev.PSDS1), ("PSDS-like-2", ev.PSDS2)):
        counts = [ev.intersection_match(d, gt, cfg) for d in dets]
        rows[name] = ev.psds_score(counts, cfg, hours, classes)
    print(ev.score_table(rows), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    worst = run_suite(range(args.seeds))
    bad = 0
    for name, err in worst.items():
        ok = err <= TOLERANCE
        bad += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:<22} max rel err {err:.2e}")
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ucil", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-classes", type=int, default=6)
    p.add_argument("--strong", type=int, default=600)
    p.add_argument("--weak", type=int, default=300)
    p.add_argument("--unlabeled", type=int, default=1200)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--frames", type=int, default=156)
    p.add_argument("--mels", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("run", help="run one experiment config over its seeds")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("matrix", help="run a table-shaped sweep")
    _add_run_flags(p)
    p.add_argument("--table", choices=("table1", "table2", "table3"), required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_matrix)

    p = sub.add_parser("score", help="PSDS-like scores of detection files (one file per threshold)")
    p.add_argument("ground_truth", type=Path)
    p.add_argument("detections", type=Path, nargs="+")
    p.add_argument("--hours", type=float, help="evaluated duration; default 10 s per clip")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("gradcheck", help="finite-difference check of the autodiff primitives and losses")
    p.add_argument("--seeds", type=int, default=100)
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
