"""Inference-only early exit: route each sample through the exits in order and
stop at the first head whose prototype cosine confidence reaches tau."""
from __future__ import annotations

import csv
import statistics
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .evaluation import DEFAULT_BUDGET, ReferenceCache, evaluate_scores, importance_from_probs
from .model import ExitableModel, LifecycleError
from .numerics import ParameterError


@dataclass(frozen=True)
class RoutingPolicy:
    """Exit at the first head with confidence >= tau.

    tau = 0 and tau = 1 are accepted as sentinels: always take the first exit,
    and never exit early.
    """

    tau: float

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ParameterError(f"tau must lie in [0, 1], got {self.tau}")

    def exits_at(self, confidence: float) -> bool:
        if self.tau >= 1.0:
            return False
        return self.tau <= 0.0 or confidence >= self.tau


@dataclass
class ExitTrace:
    sample_id: int
    exit_index: int
    confidences: list
    blocks_traversed: int
    predicted_class: int
    probs: np.ndarray
    wall_nanos: int = 0


@dataclass
class ExitStats:
    tau: float
    mean_blocks: float
    median_blocks: float
    exit_histogram: list
    f1_routed: float
    f1_full: float
    relative_saving: float
    n: int
    mean_wall_seconds: float | None = None
    traces: list = field(default_factory=list, repr=False)

    @property
    def f1_drop_points(self) -> float:
        return 100.0 * (self.f1_full - self.f1_routed)


def _require_finalized(model: ExitableModel) -> None:
    if not model.is_finalized():
        raise LifecycleError(
            "model is not finalized for early exit: run calibrate_exit_heads() and "
            "finalize_prototype() first")


def route(model: ExitableModel, x, policy: RoutingPolicy, sample_id: int = 0) -> ExitTrace:
    """Evaluate exits 1..N in order, sharing the block prefix, and stop at the first
    confident one (or at exit N)."""
    _require_finalized(model)
    start = time.perf_counter_ns()
    cfg = model.config
    n = cfg.num_exits
    h = model.np_embed(np.asarray(x, dtype=np.float64))
    done = 0
    confidences = []
    for i, depth in enumerate(cfg.exit_depths, start=1):
        h = model.np_advance(h, done, depth)
        done = depth
        probs = model.np_head_probs(h, i)
        conf = model.confidence(probs)
        confidences.append(conf)
        if i == n or policy.exits_at(conf):
            break
    wall = time.perf_counter_ns() - start
    return ExitTrace(sample_id, i, confidences, depth + 1, int(np.argmax(probs)), probs, wall)


def exit_table(model: ExitableModel, X) -> tuple:
    """Probabilities and confidences at every exit for every sample.

    Returns (probs[N, n, K], confidences[n, N]), computed per sample with the
    same arithmetic as :func:`route`, so routing decisions derived from the
    table are identical to routing each sample directly.
    """
    cfg = model.config
    X = np.asarray(X, dtype=np.float64)
    probs = np.zeros((cfg.num_exits, len(X), cfg.num_classes))
    confs = np.zeros((len(X), cfg.num_exits))
    for k, x in enumerate(X):
        h = model.np_embed(x)
        done = 0
        for i, depth in enumerate(cfg.exit_depths, start=1):
            h = model.np_advance(h, done, depth)
            done = depth
            p = model.np_head_probs(h, i)
            probs[i - 1, k] = p
            confs[k, i - 1] = model.confidence(p)
    return probs, confs


def first_exit(confidences: np.ndarray, tau: float) -> np.ndarray:
    """0-based exit taken per sample for a confidence table [n, N]."""
    n_exits = confidences.shape[1]
    if tau >= 1.0:
        return np.full(len(confidences), n_exits - 1)
    hit = confidences[:, :-1] >= tau if tau > 0.0 else np.ones_like(confidences[:, :-1], dtype=bool)
    return np.where(hit.any(axis=1), hit.argmax(axis=1), n_exits - 1)


def _stats(model, dataset, tau, exit_idx, probs, refs, budget, f1_full, traces=None, wall=None):
    cfg = model.config
    rows = np.arange(len(exit_idx))
    routed = probs[exit_idx, rows]
    blocks = np.asarray(cfg.exit_depths)[exit_idx] + 1
    f1 = evaluate_scores(dataset, importance_from_probs(routed), budget, references=refs).f1
    hist = np.bincount(exit_idx, minlength=cfg.num_exits).tolist()
    mean_blocks = float(blocks.mean())
    return ExitStats(tau, mean_blocks, float(np.median(blocks)), hist, f1, f1_full,
                     1.0 - mean_blocks / (cfg.depth + 1), len(exit_idx), wall, traces or [])


def sweep_tau(model: ExitableModel, dataset: Dataset, taus, budget: float = DEFAULT_BUDGET) -> list:
    """One ExitStats per tau, all computed over the same sample order."""
    taus = list(taus)
    if not taus:
        raise ParameterError("sweep_tau needs at least one tau")
    if any(b < a for a, b in zip(taus, taus[1:])):
        raise ParameterError("taus must be sorted ascending")
    _require_finalized(model)
    probs, confs = exit_table(model, dataset.inputs())
    refs = ReferenceCache(dataset, budget)
    full = probs[-1]
    f1_full = evaluate_scores(dataset, importance_from_probs(full), budget, references=refs).f1
    return [_stats(model, dataset, t, first_exit(confs, t), probs, refs, budget, f1_full) for t in taus]


@dataclass
class TauChoice:
    tau: float
    stats: ExitStats | None
    fallback: bool = False


def select_tau(sweep: list, max_f1_drop: float) -> TauChoice:
    """Cheapest tau whose F1 drop (in points) stays within ``max_f1_drop``.

    Ties on mean blocks go to the smaller tau. When nothing qualifies the
    no-early-exit policy (tau = 1) is returned with ``fallback`` set.
    """
    if not sweep:
        raise ParameterError("select_tau needs a non-empty sweep")
    if max_f1_drop < 0:
        raise ParameterError("max_f1_drop must be >= 0")
    ok = [s for s in sweep if s.f1_drop_points <= max_f1_drop + 1e-12]
    if not ok:
        warnings.warn("no tau satisfies the F1-drop constraint; early exit disabled", RuntimeWarning)
        return TauChoice(1.0, None, fallback=True)
    best = min(ok, key=lambda s: (s.mean_blocks, s.tau))
    return TauChoice(best.tau, best)


def bench(model: ExitableModel, dataset: Dataset, policy: RoutingPolicy, repetitions: int = 3,
          budget: float = DEFAULT_BUDGET) -> ExitStats:
    """Route every sample ``repetitions`` times through :func:`route`.

    Wall time per sample is the median over repetitions; the blocks proxy and
    predictions come from the traces and must agree across repetitions.
    """
    if repetitions < 3:
        raise ParameterError("bench needs at least 3 repetitions")
    _require_finalized(model)
    X = dataset.inputs()
    runs = [[route(model, x, policy, k) for k, x in enumerate(X)] for _ in range(repetitions)]
    first = runs[0]
    for other in runs[1:]:
        if any(a.exit_index != b.exit_index for a, b in zip(first, other)):
            raise RuntimeError("routing is not deterministic across repetitions")
    for k, tr in enumerate(first):
        tr.wall_nanos = int(statistics.median(r[k].wall_nanos for r in runs))
    exit_idx = np.array([t.exit_index - 1 for t in first])
    probs = np.zeros((model.config.num_exits, len(first), model.config.num_classes))
    for k, t in enumerate(first):
        probs[t.exit_index - 1, k] = t.probs
    refs = ReferenceCache(dataset, budget)
    full = np.array([model.predict_proba(x) for x in X])
    f1_full = evaluate_scores(dataset, importance_from_probs(full), budget, references=refs).f1
    wall = float(np.mean([t.wall_nanos for t in first])) * 1e-9
    return _stats(model, dataset, policy.tau, exit_idx, probs, refs, budget, f1_full, first, wall)


def write_traces_csv(traces, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "exit_index", "blocks", "confidence_at_exit", "predicted_class", "wall_nanos"])
        for t in traces:
            w.writerow([t.sample_id, t.exit_index, t.blocks_traversed, repr(t.confidences[-1]),
                        t.predicted_class, t.wall_nanos])


def write_stats_csv(stats, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "mean_blocks", "median_blocks", "exit_histogram", "f1_routed", "f1_full",
                    "relative_saving", "n"])
        for s in stats:
            w.writerow([repr(s.tau), repr(s.mean_blocks), repr(s.median_blocks),
                        "|".join(str(c) for c in s.exit_histogram), repr(s.f1_routed),
                        repr(s.f1_full), repr(s.relative_saving), s.n])
