"""Command-line entry point: generate, train, exit-bench, ablate, eval, repro.

Every command writes into its own run directory (command, UTC timestamp, seed)
holding the resolved config snapshot, its outputs and a checksum manifest of
all non-timing files.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import sys
import warnings
from pathlib import Path

import numpy as np

from . import data as dd
from .config import RunConfig, parse_tau_sweep
from .distill import PlanError, train_kd_single, train_mskd, train_teacher
from .earlyexit import write_stats_csv, write_traces_csv, sweep_tau
from .evaluation import f1_multi_reference, select_summary
from .model import (ConfigError, LifecycleError, calibrate_exit_heads, finalize_prototype,
                    load_model, save_model)
from .numerics import ParameterError
from .tables import (run_ablation_table, run_distill_matrix, run_tradeoff_table, write_ablation_csv,
                     write_matrix_csv, write_plot_data, write_tradeoff_csv)

SNAPSHOT = "config.ini"
MANIFEST = "checksums.sha256"
# files whose content includes wall-clock measurements
TIMING_FILES = ("tradeoff.csv", "traces_ee.csv", "traces_no_ee.csv")
SPLITS = ("train", "val", "test")

EXIT_CODES = {"ERROR": 1, "CONFIG": 2, "FILE": 3, "PARSE": 4, "DATA": 5, "PARAMETER": 6, "LIFECYCLE": 7}


def _error_code(exc: BaseException) -> str:
    if isinstance(exc, (ConfigError, PlanError)):
        return "CONFIG"
    if isinstance(exc, FileNotFoundError):
        return "FILE"
    if isinstance(exc, dd.ParseError):
        return "PARSE"
    if isinstance(exc, (dd.DataError, dd.SpecError)):
        return "DATA"
    if isinstance(exc, ParameterError):
        return "PARAMETER"
    if isinstance(exc, LifecycleError):
        return "LIFECYCLE"
    return "ERROR"


# --- run directory ---------------------------------------------------------

def make_run_dir(out: Path, command: str, seed: int) -> Path:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = Path(out) / f"{command}_{stamp}_seed{seed}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}_{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def write_manifest(run_dir: Path) -> Path:
    lines = []
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != MANIFEST and p.name not in TIMING_FILES:
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            lines.append(f"{digest}  {p.relative_to(run_dir).as_posix()}")
    path = run_dir / MANIFEST
    path.write_text("\n".join(lines) + "\n")
    return path


def _dataset_path(directory: Path, name: str) -> Path:
    for suffix in (".jsonl", ".jsonl.gz"):
        p = Path(directory) / f"{name}{suffix}"
        if p.is_file():
            return p
    raise FileNotFoundError(f"no {name}.jsonl[.gz] in {directory}")


def load_splits(directory) -> tuple:
    if directory is None:
        raise FileNotFoundError("--data DIR is required (a generate run directory)")
    return tuple(dd.load_dataset(_dataset_path(Path(directory), s)) for s in SPLITS)


# --- commands --------------------------------------------------------------

def cmd_generate(cfg: RunConfig, run_dir: Path, args) -> dict:
    d = cfg.sections["dataset"]
    ds = dd.generate(cfg.planted(), cfg.header(), d["num_videos"], d["segments_per_video"])
    parts = dd.split(ds, cfg.split_fractions(), cfg.seed)
    suffix = ".jsonl.gz" if d["compress"] else ".jsonl"
    paths = {}
    for name, part in zip(SPLITS, parts):
        paths[name] = run_dir / f"{name}{suffix}"
        dd.save_dataset(part, paths[name])
    print(f"generated {len(ds)} segments: " +
          ", ".join(f"{n}={len(p)}" for n, p in zip(SPLITS, parts)))
    return paths


def _require_roles(cfg: RunConfig, mode: str) -> None:
    need = {"teacher": ("teacher",), "kd": ("teacher", "student"),
            "mskd": ("teacher", "mentor", "student")}[mode]
    for role in need:
        if not cfg.has_role(role):
            raise ConfigError(f"config section [{role}] is required for --mode {mode}")


def _seeds(cfg: RunConfig) -> list:
    return list(range(cfg.seed, cfg.seed + cfg.get("run", "seeds")))


def cmd_train(cfg: RunConfig, run_dir: Path, args) -> dict:
    _require_roles(cfg, args.mode)
    train, val, test = load_splits(args.data)
    dim = train.header.input_dim
    out = {}
    if args.mode == "teacher":
        plan = cfg.plan(dim, "teacher_only")
        model, report = train_teacher(plan, train, val)
        models = {"teacher": model}
    elif args.mode == "kd":
        plan = cfg.plan(dim, "kd_single")
        if args.teacher:
            teacher = load_model(args.teacher)
            report_t = None
        else:
            teacher, report_t = train_teacher(cfg.plan(dim, "teacher_only"), train, val)
        model, report = train_kd_single(plan, teacher, train, val, edge="teacher")
        if report_t is not None:
            report.losses = report_t.losses + report.losses
            report.val_f1 = {**report_t.val_f1, **report.val_f1}
        models = {"teacher": teacher, "student": model}
    else:
        plan = cfg.plan(dim, "mskd_joint")
        teacher, mentor, student, report = train_mskd(plan, train, val)
        models = {"teacher": teacher, "mentor": mentor, "student": student}
    for role, m in models.items():
        out[role] = run_dir / f"{role}.npz"
        save_model(m, out[role])
    report.write_csv(run_dir / "train_report.csv")
    with open(run_dir / "val_f1.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_role", "val_f1"])
        for role, f1 in report.val_f1.items():
            w.writerow([role, repr(f1)])
            print(f"{role}: validation F1 {100 * f1:.2f}")
    if args.matrix:
        if args.mode != "mskd":
            raise ConfigError("--matrix requires --mode mskd")
        matrix = run_distill_matrix(train, test, _seeds(cfg), cfg.plan(dim, "mskd_joint"), cfg.get("run", "jobs"))
        write_matrix_csv(matrix, run_dir / "distill_matrix.csv")
        for r in matrix.rows:
            imp = "" if r.improvement_pct is None else f"  {r.improvement_pct:+.2f}%"
            print(f"{r.variant:<20} {r.mean_f1:6.2f} +/- {r.std_f1:5.2f}{imp}")
    return out


def cmd_exit_bench(cfg: RunConfig, run_dir: Path, args) -> dict:
    if args.model is None:
        raise FileNotFoundError("--model PATH is required (a trained student artifact)")
    model = load_model(args.model)
    train, val, test = load_splits(args.data)
    if not model.is_finalized():
        if args.no_calibrate:
            raise LifecycleError("model is not finalized for early exit: rerun without --no-calibrate "
                                 "or calibrate heads and finalize the prototype first")
        calibrate_exit_heads(model, train.inputs(), train.labels(), cfg.get("routing", "calibrate_epochs"),
                             cfg.get("routing", "calibrate_learning_rate"), seed=cfg.seed)
        finalize_prototype(model, train.inputs(), train.labels(),
                           stream=cfg.get("routing", "prototype") == "ema")
        save_model(model, run_dir / "model_finalized.npz")
    taus = parse_tau_sweep(args.tau_sweep) if args.tau_sweep else cfg.taus()
    max_drop = args.max_f1_drop if args.max_f1_drop is not None else cfg.get("routing", "max_f1_drop")
    budget = cfg.get("eval", "budget")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        table = run_tradeoff_table(model, val, test, taus, max_drop, cfg.get("routing", "repetitions"), budget)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_stats_csv(table.sweep, run_dir / "sweep_val.csv")
    write_stats_csv(sweep_tau(model, test, taus, budget), run_dir / "sweep_test.csv")
    write_plot_data(table.sweep, run_dir)
    write_tradeoff_csv(table, run_dir / "tradeoff.csv")
    write_traces_csv(table.no_ee.traces, run_dir / "traces_no_ee.csv")
    write_traces_csv(table.ee.traces, run_dir / "traces_ee.csv")
    with open(run_dir / "selected_tau.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "fallback", "max_f1_drop", "test_relative_saving", "test_f1_drop_points"])
        w.writerow([repr(table.choice.tau), int(table.choice.fallback), repr(max_drop),
                    repr(table.ee.relative_saving), repr(table.ee.f1_routed * 100 - table.no_ee.f1_routed * 100)])
    print(f"selected tau {table.choice.tau:g}{' (fallback: no early exit)' if table.choice.fallback else ''}")
    for name, tau, f1, blocks, saving, wall in table.rows():
        print(f"{name:<6} tau={tau:<5g} F1={f1:6.2f} blocks={blocks:.3f} saving={100 * saving:5.1f}% "
              f"wall/sample={wall * 1e6:.1f}us")
    return {"tradeoff": run_dir / "tradeoff.csv"}


def cmd_ablate(cfg: RunConfig, run_dir: Path, args) -> dict:
    keeps = [k for k in args.groups.split(";") if k.strip()] if args.groups else cfg.keep_sets()
    for k in keeps:
        dd.parse_keep(k)
    if not cfg.has_role("student"):
        raise ConfigError("config section [student] is required for ablate")
    train, val, test = load_splits(args.data)
    dim = train.header.input_dim
    student = cfg.model_config("student", dim)
    plan = cfg.plan(dim, "teacher_only", roles={"teacher": student})
    table = run_ablation_table(train, test, student, plan, keeps, _seeds(cfg),
                               cfg.get("run", "jobs"))
    write_ablation_csv(table, run_dir / "ablation.csv")
    for c in table.columns:
        print(f"{c.keep:<14} {c.mean_f1:6.2f} +/- {c.std_f1:5.2f}")
    return {"ablation": run_dir / "ablation.csv"}


def read_predictions(path, refs: dd.Dataset) -> np.ndarray:
    """Score table: video_id, segment_index, score (tab-separated); aligned to ``refs`` rows."""
    index = {(v, int(s)): k for k, (v, s) in enumerate(zip(refs.video_ids, refs.segment_index))}
    scores = np.full(len(refs), np.nan)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if cols[0] == "video_id":
                continue
            if len(cols) != 3:
                raise dd.ParseError(f"expected 3 tab-separated columns, got {len(cols)}", lineno)
            try:
                key, value = (cols[0], int(cols[1])), float(cols[2])
            except ValueError as exc:
                raise dd.ParseError(str(exc), lineno) from None
            if key not in index:
                raise dd.ParseError(f"segment {key[0]}:{key[1]} is not in the reference table", lineno)
            scores[index[key]] = value
    missing = np.flatnonzero(np.isnan(scores))
    if len(missing):
        k = missing[0]
        raise dd.ParseError(f"no prediction for segment {refs.video_ids[k]}:{refs.segment_index[k]}")
    return scores


def cmd_eval(cfg: RunConfig, run_dir: Path, args) -> dict:
    if args.pred is None or args.refs is None:
        raise FileNotFoundError("eval needs --pred FILE and --refs FILE")
    refs = dd.ingest_annotations(args.refs)
    scores = read_predictions(args.pred, refs)
    budget = args.budget if args.budget is not None else cfg.get("eval", "budget")
    mode = args.agg or cfg.get("eval", "agg")
    rows = []
    for v, r in refs.video_rows().items():
        dur = refs.durations[r]
        sel = select_summary(scores[r], dur, budget, v)
        gold = [select_summary(refs.gold_scores[r][:, a], dur, budget, v) for a in range(refs.gold_scores.shape[1])]
        res = f1_multi_reference(sel, gold, dur, mode)
        rows.append((v, res.precision, res.recall, res.f1))
    p, r, f1 = (float(np.mean([x[k] for x in rows])) for k in (1, 2, 3))
    path = run_dir / "eval.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "precision", "recall", "f1"])
        for row in rows:
            w.writerow([row[0]] + [repr(x) for x in row[1:]])
        w.writerow(["mean", repr(p), repr(r), repr(f1)])
    print(f"precision={p:.6f} recall={r:.6f} f1={f1:.6f} agg={mode} budget={budget:g} videos={len(rows)}")
    return {"eval": path}


def cmd_repro(cfg: RunConfig, run_dir: Path, args) -> dict:
    """generate -> train --mode mskd --matrix -> exit-bench -> ablate, in subdirectories."""
    sub = {n: run_dir / n for n in ("generate", "train", "exit_bench", "ablate")}
    for p in sub.values():
        p.mkdir()
    cmd_generate(cfg, sub["generate"], args)
    ns = argparse.Namespace(data=sub["generate"], mode="mskd", matrix=True, teacher=None)
    models = cmd_train(cfg, sub["train"], ns)
    ns = argparse.Namespace(data=sub["generate"], model=models["student"], tau_sweep=None,
                            max_f1_drop=None, no_calibrate=False)
    cmd_exit_bench(cfg, sub["exit_bench"], ns)
    ns = argparse.Namespace(data=sub["generate"], groups=None, seeds=None)
    cmd_ablate(cfg, sub["ablate"], ns)
    return sub


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "exit-bench": cmd_exit_bench,
            "ablate": cmd_ablate, "eval": cmd_eval, "repro": cmd_repro}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file (flags override its keys)")
    common.add_argument("--out", type=Path, default=Path("runs"), help="parent directory for run outputs")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--jobs", type=int, help="worker processes for matrix/ablation runners")

    parser = argparse.ArgumentParser(prog="exitdistill", description=__doc__.splitlines()[0])
    cmds = parser.add_subparsers(dest="command", required=True)
    cmds.add_parser("generate", parents=[common], help="draw the planted dataset and split it")
    p = cmds.add_parser("train", parents=[common], help="train teacher, single KD or joint MSKD")
    p.add_argument("--data", type=Path)
    p.add_argument("--mode", choices=("teacher", "kd", "mskd"), default="mskd")
    p.add_argument("--matrix", action="store_true", help="also run the six-variant multi-seed comparison")
    p.add_argument("--teacher", type=Path, help="trained teacher artifact for --mode kd")
    p.add_argument("--seeds", type=int, help="number of seeds for --matrix")
    p = cmds.add_parser("exit-bench", parents=[common], help="tau sweep, selection and trade-off table")
    p.add_argument("--data", type=Path)
    p.add_argument("--model", type=Path)
    p.add_argument("--tau-sweep", metavar="A:B:STEP")
    p.add_argument("--max-f1-drop", type=float)
    p.add_argument("--no-calibrate", action="store_true", help="fail instead of calibrating an unfinalized model")
    p = cmds.add_parser("ablate", parents=[common], help="feature-group ablation table")
    p.add_argument("--data", type=Path)
    p.add_argument("--groups", help='keep-sets separated by ";", e.g. "T;T+Tr"')
    p.add_argument("--seeds", type=int)
    p = cmds.add_parser("eval", parents=[common], help="score a prediction file against annotations")
    p.add_argument("--pred", type=Path)
    p.add_argument("--refs", type=Path)
    p.add_argument("--budget", type=float)
    p.add_argument("--agg", choices=("mean", "max"))
    cmds.add_parser("repro", parents=[common], help="regenerate every report in one run")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg.set("run", "jobs", args.jobs)
    if getattr(args, "tau_sweep", None):
        cfg.set("routing", "tau_sweep", args.tau_sweep)
    if getattr(args, "max_f1_drop", None) is not None:
        cfg.set("routing", "max_f1_drop", args.max_f1_drop)
    if getattr(args, "budget", None) is not None:
        cfg.set("eval", "budget", args.budget)
    if getattr(args, "agg", None):
        cfg.set("eval", "agg", args.agg)
    if getattr(args, "groups", None):
        cfg.set("ablate", "groups", args.groups)
    if getattr(args, "seeds", None) is not None:
        cfg.set("run", "seeds", args.seeds)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        run_dir = make_run_dir(args.out, args.command.replace("-", "_"), cfg.seed)
        cfg.write(run_dir / SNAPSHOT)
        COMMANDS[args.command](cfg, run_dir, args)
        write_manifest(run_dir)
    except (ValueError, RuntimeError, OSError) as exc:
        code = _error_code(exc)
        msg = " ".join(str(exc).split())
        print(f"error[{code}] {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_CODES[code]
    print(f"outputs: {run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
