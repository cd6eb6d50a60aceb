"""Multi-seed experiment runners that emit the three report tables:
distillation comparison, feature-group ablation and the early-exit trade-off."""
from __future__ import annotations

import csv
import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, ablate_groups, keep_label, parse_keep
from .distill import DistillPlan, train_kd_single, train_mskd, train_student_plain, train_teacher
from .earlyexit import ExitStats, RoutingPolicy, TauChoice, bench, select_tau, sweep_tau
from .evaluation import DEFAULT_BUDGET, ReferenceCache, evaluate_model
from .model import ExitableModel, ModelConfig
from .numerics import ParameterError

VARIANTS = ("teacher", "mentor", "student_no_kd", "student_kd_mentor",
            "student_kd_teacher", "student_mskd")
ABLATION_KEEP_SETS = ("T", "T+Tr", "T+Tr+Ge", "T+Tr+Ge+Sd")
ROLE_OFFSETS = {"teacher": 1, "mentor": 2, "student": 3}


def seeded_plan(plan: DistillPlan, seed: int) -> DistillPlan:
    """Plan for one seed: batch order from ``seed``, role inits from seed*10 + offset."""
    roles = {}
    for role, off in ROLE_OFFSETS.items():
        cfg = getattr(plan, role)
        roles[role] = None if cfg is None else dataclasses.replace(cfg, seed=seed * 10 + off)
    return dataclasses.replace(plan, seed=seed, **roles)


def _pct(value: float, base: float) -> float:
    return 100.0 * (value - base) / base if base else float("nan")


def _spread(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


# --- distillation matrix ---------------------------------------------------

@dataclass
class MatrixRow:
    variant: str
    mean_f1: float
    std_f1: float
    improvement_pct: float | None
    per_seed: list


@dataclass
class DistillMatrix:
    rows: list
    seeds: list

    def row(self, variant: str) -> MatrixRow:
        return next(r for r in self.rows if r.variant == variant)

    def best_single_kd(self) -> MatrixRow:
        return max((self.row("student_kd_mentor"), self.row("student_kd_teacher")),
                   key=lambda r: r.mean_f1)


def _matrix_cell(args) -> dict:
    plan, train, evaluation = args
    refs = ReferenceCache(evaluation, plan.budget)
    score = lambda m: 100.0 * evaluate_model(m, evaluation, plan.budget, references=refs)
    solo = dataclasses.replace(plan, mentor=None, student=None, mode="teacher_only")
    teacher, _ = train_teacher(solo, train)
    mentor, _ = train_teacher(dataclasses.replace(solo, teacher=plan.mentor), train, role="mentor")
    plain, _ = train_student_plain(plan, train)
    kd = dataclasses.replace(plan, mentor=None, mode="kd_single")
    kd_m, _ = train_kd_single(dataclasses.replace(kd, teacher=plan.mentor), mentor, train, edge="mentor")
    kd_t, _ = train_kd_single(kd, teacher, train, edge="teacher")
    _, _, mskd, _ = train_mskd(dataclasses.replace(plan, mode="mskd_joint"), train)
    models = (teacher, mentor, plain, kd_m, kd_t, mskd)
    return {v: score(m) for v, m in zip(VARIANTS, models)}


def _map(fn, cells, jobs: int) -> list:
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cells))


def run_distill_matrix(train: Dataset, evaluation: Dataset, seeds, plan: DistillPlan,
                       jobs: int = 1) -> DistillMatrix:
    """Train all six variants per seed and report mean/std F1 (points) on ``evaluation``.

    Within one seed every student starts from the same initialization and sees
    the same batch order, so variant differences are paired.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ParameterError(f"run_distill_matrix needs >= 3 seeds, got {len(seeds)}")
    if plan.mentor is None or plan.student is None:
        raise ParameterError("run_distill_matrix needs teacher, mentor and student configs")
    cells = _map(_matrix_cell, [(seeded_plan(plan, s), train, evaluation) for s in seeds], jobs)
    base = float(np.mean([c["student_no_kd"] for c in cells]))
    rows = []
    for v in VARIANTS:
        per = [c[v] for c in cells]
        mean, std = _spread(per)
        rows.append(MatrixRow(v, mean, std, _pct(mean, base) if v.startswith("student") else None, per))
    return DistillMatrix(rows, seeds)


def write_matrix_csv(matrix: DistillMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "mean_f1", "std_f1", "improvement_pct", "seeds", "per_seed_f1"])
        for r in matrix.rows:
            w.writerow([r.variant, repr(r.mean_f1), repr(r.std_f1),
                        "" if r.improvement_pct is None else repr(r.improvement_pct),
                        len(r.per_seed), "|".join(repr(x) for x in r.per_seed)])


# --- ablation --------------------------------------------------------------

@dataclass
class AblationColumn:
    keep: str
    mean_f1: float
    std_f1: float
    per_seed: list


@dataclass
class AblationTable:
    columns: list
    seeds: list

    def mean(self, keep: str) -> float:
        label = keep_label(keep)
        return next(c.mean_f1 for c in self.columns if c.keep == label)


def _ablation_cell(args) -> float:
    plan, train, evaluation = args
    model, _ = train_student_plain(plan, train)
    return 100.0 * evaluate_model(model, evaluation, plan.budget)


def run_ablation_table(train: Dataset, evaluation: Dataset, student: ModelConfig, plan: DistillPlan,
                       keep_sets=ABLATION_KEEP_SETS, seeds=range(5), jobs: int = 1) -> AblationTable:
    """One plain (no KD) student per (keep-set, seed); columns in keep-set order."""
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ParameterError(f"run_ablation_table needs >= 3 seeds, got {len(seeds)}")
    keeps = [parse_keep(k) for k in keep_sets]
    base = dataclasses.replace(plan, teacher=student, student=student, mentor=None, mode="teacher_only")
    cells = [(seeded_plan(base, s), ablate_groups(train, k), ablate_groups(evaluation, k))
             for k in keeps for s in seeds]
    scores = _map(_ablation_cell, cells, jobs)
    cols = []
    for j, k in enumerate(keeps):
        per = scores[j * len(seeds):(j + 1) * len(seeds)]
        mean, std = _spread(per)
        cols.append(AblationColumn(keep_label(k), mean, std, per))
    return AblationTable(cols, seeds)


def write_ablation_csv(table: AblationTable, path) -> None:
    """Wide layout: one column per keep-set, rows for mean and std."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic"] + [c.keep for c in table.columns])
        w.writerow(["mean_f1"] + [repr(c.mean_f1) for c in table.columns])
        w.writerow(["std_f1"] + [repr(c.std_f1) for c in table.columns])
        for k, s in enumerate(table.seeds):
            w.writerow([f"seed_{s}"] + [repr(c.per_seed[k]) for c in table.columns])


# --- early-exit trade-off --------------------------------------------------

@dataclass
class TradeoffTable:
    no_ee: ExitStats
    ee: ExitStats
    choice: TauChoice
    sweep: list = field(default_factory=list)

    def rows(self) -> list:
        out = []
        for name, s in (("no_ee", self.no_ee), ("ee", self.ee)):
            out.append((name, s.tau, 100.0 * s.f1_routed, s.mean_blocks, s.relative_saving,
                        s.mean_wall_seconds))
        return out


def run_tradeoff_table(model: ExitableModel, validation: Dataset, test: Dataset, taus,
                       max_f1_drop: float = 3.0, repetitions: int = 3,
                       budget: float = DEFAULT_BUDGET) -> TradeoffTable:
    """Pick tau on ``validation``, then bench no-EE (tau = 1) and EE on ``test``."""
    sweep = sweep_tau(model, validation, taus, budget)
    choice = select_tau(sweep, max_f1_drop)
    no_ee = bench(model, test, RoutingPolicy(1.0), repetitions, budget)
    ee = bench(model, test, RoutingPolicy(choice.tau), repetitions, budget)
    return TradeoffTable(no_ee, ee, choice, sweep)


def write_tradeoff_csv(table: TradeoffTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", "tau", "f1", "mean_blocks", "relative_saving", "wall_seconds_per_sample"])
        for row in table.rows():
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def write_plot_data(sweep, directory) -> list:
    """Two-column numeric series per curve: tau vs F1 and tau vs mean blocks."""
    directory = Path(directory)
    paths = []
    for name, getter in (("tau_vs_f1", lambda s: 100.0 * s.f1_routed),
                         ("tau_vs_blocks", lambda s: s.mean_blocks)):
        p = directory / f"plot_{name}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tau", name.split("_vs_")[1]])
            for s in sweep:
                w.writerow([repr(float(s.tau)), repr(float(getter(s)))])
        paths.append(p)
    return paths
