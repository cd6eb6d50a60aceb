"""Budgeted summary selection and overlap-based precision/recall/F1."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, Dataset
from .model import class_values
from .numerics import ParameterError

DEFAULT_BUDGET = 0.15


@dataclass
class SummarySelection:
    video_id: str
    selected: tuple
    budget_fraction: float
    selected_duration: int
    total_duration: int


@dataclass
class EvalResult:
    precision: float
    recall: float
    f1: float
    mode: str = "single"
    per_reference: list = field(default_factory=list)


def knapsack_select(values, weights, capacity: int) -> list:
    """Exact 0/1 knapsack over integer weights.

    Among optimal subsets, the one whose membership vector is lexicographically
    largest (earliest indices included first) is returned.
    """
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.int64)
    n = len(values)
    if capacity < 0:
        return []
    # best[i][c]: optimum using items i..n-1 with capacity c
    best = np.zeros((n + 1, capacity + 1))
    for i in range(n - 1, -1, -1):
        w, v = weights[i], values[i]
        row = best[i + 1].copy()
        if w <= capacity:
            take = best[i + 1][: capacity + 1 - w] + v
            row[w:] = np.maximum(row[w:], take)
        best[i] = row
    chosen, c = [], capacity
    for i in range(n):
        w = weights[i]
        if w <= c and values[i] + best[i + 1][c - w] >= best[i + 1][c]:
            chosen.append(i)
            c -= w
    return chosen


def select_summary(scores, durations, budget_fraction: float = DEFAULT_BUDGET,
                   video_id: str = "") -> SummarySelection:
    """Pick segments maximizing total score within budget_fraction of the duration."""
    scores = np.asarray(scores, dtype=np.float64)
    durations = np.asarray(durations, dtype=np.int64)
    if scores.shape != durations.shape:
        raise DataError(f"{len(scores)} scores for {len(durations)} durations")
    if not 0 < budget_fraction <= 1:
        raise ParameterError(f"budget_fraction must lie in (0, 1], got {budget_fraction}")
    if np.any(durations <= 0):
        raise DataError("segment durations must be positive")
    total = int(durations.sum())
    capacity = int(math.floor(budget_fraction * total + 1e-9))
    picks = knapsack_select(scores, durations, capacity)
    return SummarySelection(video_id, tuple(picks), budget_fraction,
                            int(durations[picks].sum()) if picks else 0, total)


def _frames(selection, durations) -> float:
    return float(sum(durations[i] for i in selection))


def f1_against_reference(selected, reference, durations) -> EvalResult:
    """Frame-unit overlap between a system selection and one reference selection."""
    durations = np.asarray(durations, dtype=np.int64)
    n = len(durations)
    s = set(getattr(selected, "selected", selected))
    g = set(getattr(reference, "selected", reference))
    bad = [i for i in s | g if not 0 <= i < n]
    if bad:
        raise DataError(f"segment index {bad[0]} out of range for {n} segments")
    overlap = _frames(s & g, durations)
    size_s, size_g = _frames(s, durations), _frames(g, durations)
    p = overlap / size_s if size_s else 0.0
    r = overlap / size_g if size_g else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return EvalResult(p, r, f1)


def f1_multi_reference(selected, references, durations, mode: str = "mean") -> EvalResult:
    """Score against every reference and aggregate by ``mean`` or ``max``.

    ``max`` reports the best reference's (P, R, F1). ``mean`` averages P, R and
    F1 separately, so the F1 identity holds per reference, not for the means.
    """
    if not references:
        raise ParameterError("f1_multi_reference needs at least one reference")
    if mode not in ("mean", "max"):
        raise ParameterError(f"aggregation mode must be 'mean' or 'max', got {mode!r}")
    per = [f1_against_reference(selected, ref, durations) for ref in references]
    if mode == "max":
        best = max(per, key=lambda e: e.f1)
        return EvalResult(best.precision, best.recall, best.f1, "max", per)
    return EvalResult(float(np.mean([e.precision for e in per])),
                      float(np.mean([e.recall for e in per])),
                      float(np.mean([e.f1 for e in per])), "mean", per)


def importance_from_probs(probs: np.ndarray) -> np.ndarray:
    """Expected score for 5 classes; positive-class probability for 2."""
    probs = np.asarray(probs)
    k = probs.shape[-1]
    if k == 2:
        return probs[..., 1]
    return probs @ class_values(k)


@dataclass
class DatasetScore:
    f1: float
    precision: float
    recall: float
    per_video: dict


class ReferenceCache:
    """Per-annotator reference selections for every video of a dataset."""

    def __init__(self, dataset: Dataset, budget: float = DEFAULT_BUDGET):
        self.budget = budget
        self.rows = dataset.video_rows()
        self.durations = {v: dataset.durations[r] for v, r in self.rows.items()}
        self.refs = {}
        for v, r in self.rows.items():
            gold = dataset.gold_scores[r]
            self.refs[v] = [select_summary(gold[:, a], self.durations[v], budget, v)
                            for a in range(gold.shape[1])]


def evaluate_scores(dataset: Dataset, scores, budget: float = DEFAULT_BUDGET, mode: str = "mean",
                    references: ReferenceCache | None = None) -> DatasetScore:
    """Per-video summary F1 against all annotators, averaged over videos."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(dataset):
        raise DataError(f"{len(scores)} predictions for {len(dataset)} segments")
    refs = references or ReferenceCache(dataset, budget)
    per_video = {}
    for v, rows in refs.rows.items():
        sel = select_summary(scores[rows], refs.durations[v], budget, v)
        per_video[v] = f1_multi_reference(sel, refs.refs[v], refs.durations[v], mode)
    res = list(per_video.values())
    return DatasetScore(float(np.mean([e.f1 for e in res])),
                        float(np.mean([e.precision for e in res])),
                        float(np.mean([e.recall for e in res])), per_video)


def evaluate_model(model, dataset: Dataset, budget: float = DEFAULT_BUDGET, mode: str = "mean",
                   references: ReferenceCache | None = None) -> float:
    """Mean per-video F1 of a model's final-exit predictions."""
    scores = importance_from_probs(model.predict_proba(dataset.inputs()))
    return evaluate_scores(dataset, scores, budget, mode, references).f1
