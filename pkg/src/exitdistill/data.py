"""Synthetic segment-importance datasets with planted multimodal signal.

Each video is a sequence of uniform shots ("segments"). Every segment carries
five feature groups: visual (V), title affinity (T), transcript (Tr),
gender-emotion (Ge) and speaker diarization (Sd). Gold importance is a known
function of the features, so tests can recompute it exactly.
"""
from __future__ import annotations

import csv
import dataclasses
import gzip
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .numerics import ParameterError

GROUPS = ("V", "T", "Tr", "Ge", "Sd")
FORMAT_VERSION = 1


class SpecError(ValueError):
    pass


class DataError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _default_weights() -> dict:
    return {"V": 1.0, "T": 0.8, "Tr": 0.7, "Ge": 0.5, "Sd": 0.0}


def _default_dims() -> dict:
    return {"V": 16, "T": 4, "Tr": 8, "Ge": 4, "Sd": 4}


@dataclass
class PlantedSpec:
    weights: dict = field(default_factory=_default_weights)
    label_noise: float = 0.6
    nonlinear: bool = True
    interaction: float = 1.5
    interaction_terms: int = 4
    disagreement: float = 0.1
    max_duration: int = 1

    def validate(self) -> None:
        unknown = set(self.weights) - set(GROUPS)
        if unknown:
            raise SpecError(f"unknown feature groups in weights: {sorted(unknown)}")
        if not any(self.weights.get(g, 0.0) != 0.0 for g in GROUPS):
            raise SpecError("at least one group weight must be non-zero")
        if self.label_noise < 0:
            raise SpecError(f"label_noise must be >= 0, got {self.label_noise}")
        if not 0.0 <= self.disagreement <= 1.0:
            raise SpecError(f"disagreement must lie in [0, 1], got {self.disagreement}")
        if self.nonlinear and self.interaction_terms < 1:
            raise SpecError("a nonlinear spec needs interaction_terms >= 1")
        if self.max_duration < 1:
            raise SpecError(f"max_duration must be >= 1, got {self.max_duration}")


@dataclass
class DatasetHeader:
    dims: dict = field(default_factory=_default_dims)
    num_classes: int = 5
    annotators: int = 20
    seed: int = 0
    planted: PlantedSpec | None = None
    # unit-norm planted directions per group, filled in by generate()
    directions: dict | None = None
    format_version: int = FORMAT_VERSION

    def validate(self) -> None:
        if set(self.dims) != set(GROUPS):
            raise SpecError(f"dims must name exactly the groups {GROUPS}")
        if any(int(d) < 1 for d in self.dims.values()):
            raise SpecError("every feature dim must be >= 1")
        if self.num_classes not in (2, 5):
            raise SpecError(f"num_classes must be 2 or 5, got {self.num_classes}")
        if self.annotators < 1:
            raise SpecError("at least one annotator is required")

    @property
    def input_dim(self) -> int:
        return sum(int(self.dims[g]) for g in GROUPS)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetHeader":
        d = dict(d)
        if d.get("planted") is not None:
            d["planted"] = PlantedSpec(**d["planted"])
        return cls(**d)


@dataclass
class SegmentSample:
    video_id: str
    segment_index: int
    features: dict | None
    gold_scores: list
    duration_units: int = 1


@dataclass
class Dataset:
    """Column-oriented segment table; rows are grouped by video."""

    header: DatasetHeader
    video_ids: list
    segment_index: np.ndarray
    gold_scores: np.ndarray
    durations: np.ndarray
    features: dict | None = None

    def __len__(self) -> int:
        return len(self.video_ids)

    def videos(self) -> list:
        return list(dict.fromkeys(self.video_ids))

    def video_rows(self) -> dict:
        rows: dict = {}
        for i, v in enumerate(self.video_ids):
            rows.setdefault(v, []).append(i)
        return {v: np.asarray(r) for v, r in rows.items()}

    def inputs(self) -> np.ndarray:
        if self.features is None:
            raise DataError("dataset has no feature vectors (annotation-only)")
        return np.concatenate([self.features[g] for g in GROUPS], axis=1)

    def labels(self) -> np.ndarray:
        """Training class index per segment, from the rounded mean annotator score."""
        mean = self.gold_scores.mean(axis=1)
        score = np.clip(np.floor(mean + 0.5), 1, 5).astype(np.int64)
        if self.header.num_classes == 2:
            return (score >= 4).astype(np.int64)
        return score - 1

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            header=self.header,
            video_ids=[self.video_ids[i] for i in rows],
            segment_index=self.segment_index[rows],
            gold_scores=self.gold_scores[rows],
            durations=self.durations[rows],
            features=None if self.features is None else {g: a[rows] for g, a in self.features.items()},
        )

    def select_videos(self, videos: Iterable[str]) -> "Dataset":
        wanted = set(videos)
        return self.subset([i for i, v in enumerate(self.video_ids) if v in wanted])

    def samples(self) -> Iterator[SegmentSample]:
        for i, v in enumerate(self.video_ids):
            feats = None
            if self.features is not None:
                feats = {g: self.features[g][i].tolist() for g in GROUPS}
            yield SegmentSample(v, int(self.segment_index[i]), feats,
                                self.gold_scores[i].tolist(), int(self.durations[i]))


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def latent_importance(features: dict, header: DatasetHeader) -> np.ndarray:
    """Planted importance u for every row of a feature table."""
    spec = header.planted
    dirs = header.directions
    u = np.zeros(len(features["V"]))
    for g in GROUPS:
        w = spec.weights.get(g, 0.0)
        if w:
            u = u + w * (features[g] @ np.asarray(dirs[g]))
    if spec.nonlinear:
        # sum of products of visual projections: invisible to any linear read-out
        proj = features["V"] @ np.asarray(dirs["V_pairs"]).T
        m = proj.shape[1] // 2
        u = u + spec.interaction * (proj[:, 0::2] * proj[:, 1::2]).sum(axis=1) / math.sqrt(m)
    return u


def score_scale(spec: PlantedSpec) -> float:
    """Multiplier mapping u onto the 1..5 score axis (std of u -> 1.1 score points)."""
    var = sum(spec.weights.get(g, 0.0) ** 2 for g in GROUPS)
    if spec.nonlinear:
        var += spec.interaction ** 2
    return 1.1 / math.sqrt(var)


def generate(spec: PlantedSpec, header: DatasetHeader, num_videos: int,
             segments_per_video: int) -> Dataset:
    """Draw a planted dataset; a pure function of its arguments."""
    spec.validate()
    header.validate()
    if num_videos < 1 or segments_per_video < 1:
        raise SpecError("num_videos and segments_per_video must be >= 1")

    rng = np.random.default_rng(header.seed)
    dirs = {}
    for g in GROUPS:
        d = rng.standard_normal(int(header.dims[g]))
        dirs[g] = (d / np.linalg.norm(d)).tolist()
    # orthonormal visual directions, orthogonal to the linear one, for the product terms
    m = spec.interaction_terms if spec.nonlinear else 0
    if 2 * m > int(header.dims["V"]) - 1:
        raise SpecError(f"{m} interaction terms need dim V >= {2 * m + 1}, got {header.dims['V']}")
    if m:
        v_lin = np.asarray(dirs["V"])[:, None]
        raw = rng.standard_normal((int(header.dims["V"]), 2 * m))
        raw = raw - v_lin @ (v_lin.T @ raw)
        basis = np.linalg.qr(raw)[0].T
        dirs["V_pairs"] = basis.tolist()
    header = dataclasses.replace(header, planted=spec, directions=dirs)
    n = num_videos * segments_per_video
    features = {g: rng.standard_normal((n, int(header.dims[g]))) for g in GROUPS}
    u = latent_importance(features, header)
    centre = 3.0 + score_scale(spec) * u

    a = header.annotators
    noise = rng.standard_normal((n, a)) * spec.label_noise
    scores = np.clip(_round_half_up(centre[:, None] + noise), 1, 5).astype(np.int64)
    flip = rng.random((n, a)) < spec.disagreement
    random_scores = rng.integers(1, 6, size=(n, a))
    scores = np.where(flip, random_scores, scores)
    durations = rng.integers(1, spec.max_duration + 1, size=n) if spec.max_duration > 1 \
        else np.ones(n, dtype=np.int64)

    width = len(str(num_videos - 1))
    video_ids = [f"video_{v:0{width}d}" for v in range(num_videos) for _ in range(segments_per_video)]
    seg = np.tile(np.arange(segments_per_video), num_videos)
    return Dataset(header, video_ids, seg, scores, durations.astype(np.int64), features)


def ablate_groups(dataset: Dataset, keep) -> Dataset:
    """Zero-mask every feature group not in ``keep``; V is always kept."""
    keep = parse_keep(keep)
    feats = {g: (a if g in keep else np.zeros_like(a)) for g, a in dataset.features.items()}
    return dataclasses.replace(dataset, features=feats)


def parse_keep(keep) -> frozenset:
    """Accept a set of names or a "T+Tr+Ge" label; returns the set including V."""
    if isinstance(keep, str):
        keep = [k.strip() for k in keep.split("+") if k.strip()]
    keep = set(keep)
    if not keep:
        raise ParameterError("keep-set must name at least one group")
    unknown = keep - set(GROUPS)
    if unknown:
        raise ParameterError(f"unknown feature group(s): {sorted(unknown)}")
    return frozenset(keep | {"V"})


def keep_label(keep) -> str:
    """Table-style label with V left implicit, e.g. ``T+Tr+Ge``."""
    keep = parse_keep(keep)
    shown = [g for g in GROUPS if g in keep and g != "V"]
    return "+".join(shown) if shown else "V"


def split(dataset: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Partition by video into (train, val, test); no video straddles splits."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    videos = dataset.videos()
    order = np.random.default_rng(seed).permutation(len(videos))
    n = len(videos)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if fractions[2] == 0:
        n_val = n - n_train
    counts = (n_train, n_val, n - n_train - n_val)
    if any(c < 0 for c in counts) or any(f > 0 and c == 0 for f, c in zip(fractions, counts)):
        raise DataError(f"{n} videos cannot fill splits with fractions {fractions}")
    bounds = np.cumsum((0,) + counts)
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        chosen = {videos[i] for i in order[lo:hi]}
        parts.append(dataset.select_videos(chosen))
    return tuple(parts)


# --- serialization ---------------------------------------------------------

def _open_text(path: Path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        if "w" in mode:
            raw = gzip.GzipFile(str(path), mode="wb", mtime=0)
            return io.TextIOWrapper(raw, encoding="utf-8", newline="\n")
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, mode, encoding="utf-8", newline="\n" if "w" in mode else None)


def save_dataset(dataset: Dataset, path) -> None:
    """Write one header line followed by one JSON record per segment."""
    with _open_text(path, "w") as fh:
        fh.write(json.dumps({"format_version": FORMAT_VERSION,
                             "header": dataset.header.to_dict()}, sort_keys=True) + "\n")
        for s in dataset.samples():
            fh.write(json.dumps(dataclasses.asdict(s), sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    with _open_text(path, "r") as fh:
        first = fh.readline()
        try:
            head = json.loads(first)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad header: {exc}", 1) from None
        if head.get("format_version") != FORMAT_VERSION:
            raise ParseError(f"unsupported format_version {head.get('format_version')!r}", 1)
        header = DatasetHeader.from_dict(head["header"])
        vids, seg, gold, dur = [], [], [], []
        feats = {g: [] for g in GROUPS}
        has_features = True
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), lineno) from None
            if len(rec["gold_scores"]) != header.annotators:
                raise ParseError(f"expected {header.annotators} gold scores", lineno)
            if any(not 1 <= s <= 5 for s in rec["gold_scores"]):
                raise ParseError("gold score outside 1..5", lineno)
            vids.append(rec["video_id"])
            seg.append(rec["segment_index"])
            gold.append(rec["gold_scores"])
            dur.append(rec["duration_units"])
            if rec["features"] is None:
                has_features = False
                continue
            for g in GROUPS:
                if len(rec["features"][g]) != int(header.dims[g]):
                    raise ParseError(f"group {g} has wrong dimension", lineno)
                feats[g].append(rec["features"][g])
    features = None
    if has_features and vids:
        features = {g: np.asarray(feats[g], dtype=np.float64) for g in GROUPS}
    return Dataset(header, vids, np.asarray(seg, dtype=np.int64),
                   np.asarray(gold, dtype=np.int64).reshape(len(vids), header.annotators),
                   np.asarray(dur, dtype=np.int64), features)


def write_annotations(dataset: Dataset, path) -> None:
    """Tab-separated: video_id, segment_index, duration_units, comma-joined scores."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for s in dataset.samples():
            w.writerow([s.video_id, s.segment_index, s.duration_units,
                        ",".join(str(x) for x in s.gold_scores)])


def ingest_annotations(path, score_range=(1, 5)) -> Dataset:
    """Load a per-segment, per-annotator importance table (no features)."""
    lo, hi = score_range
    vids, seg, gold, dur = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if cols[0] == "video_id":
                continue
            if len(cols) != 4:
                raise ParseError(f"expected 4 tab-separated columns, got {len(cols)}", lineno)
            try:
                idx, units = int(cols[1]), int(cols[2])
                scores = [float(x) for x in cols[3].split(",")]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if units < 1:
                raise ParseError(f"duration_units must be positive, got {units}", lineno)
            bad = [s for s in scores if not lo <= s <= hi]
            if bad:
                raise DataError(f"line {lineno}: score {bad[0]:g} outside declared range {lo}..{hi}")
            if gold and len(scores) != len(gold[0]):
                raise ParseError(f"expected {len(gold[0])} annotator scores, got {len(scores)}", lineno)
            vids.append(cols[0])
            seg.append(idx)
            dur.append(units)
            gold.append(scores)
    if not vids:
        raise ParseError("annotation table has no rows")
    gold_arr = np.asarray(gold)
    if np.all(gold_arr == np.round(gold_arr)):
        gold_arr = gold_arr.astype(np.int64)
    header = DatasetHeader(annotators=gold_arr.shape[1])
    return Dataset(header, vids, np.asarray(seg, dtype=np.int64), gold_arr,
                   np.asarray(dur, dtype=np.int64), None)
