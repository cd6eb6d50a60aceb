"""Teacher, single-stage KD and joint teacher/mentor/student training."""
from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import DataError, Dataset
from .evaluation import DEFAULT_BUDGET, ReferenceCache, evaluate_model
from .model import ExitableModel, LifecycleError, ModelConfig, init_model
from .numerics import Tensor

MODES = ("teacher_only", "kd_single", "mskd_joint")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class DistillPlan:
    teacher: ModelConfig
    student: ModelConfig | None = None
    mentor: ModelConfig | None = None
    phi: float = 0.5
    psi: float = 0.25
    lam: float = 0.5
    temperature: float = 1.0
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    mode: str = "mskd_joint"
    budget: float = DEFAULT_BUDGET

    def validate(self) -> None:
        if self.mode not in MODES:
            raise PlanError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("phi", "psi", "lam"):
            if getattr(self, name) < 0:
                raise PlanError(f"{name} must be >= 0")
        if not self.temperature > 0:
            raise PlanError("temperature must be > 0")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise PlanError("epochs >= 0, batch_size >= 1 and learning_rate > 0 are required")
        if self.mode == "mskd_joint":
            if self.mentor is None:
                raise PlanError("mskd_joint needs a mentor model config")
            if self.student is None:
                raise PlanError("mskd_joint needs a student model config")
        if self.mode == "kd_single" and self.student is None:
            raise PlanError("kd_single needs a student model config")
        roles = [c for c in (self.teacher, self.mentor, self.student) if c is not None]
        caps = [c.capacity for c in roles]
        if any(b > a for a, b in zip(caps, caps[1:])):
            raise PlanError(f"capacity must not increase teacher -> mentor -> student, got {caps}")


@dataclass
class EpochLoss:
    epoch: int
    model_role: str
    ce: float
    kl_mentor: float
    kl_teacher: float
    total: float


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    val_f1: dict = field(default_factory=dict)
    seed: int = 0
    wall_seconds: float = 0.0

    def role_losses(self, role: str) -> list:
        return [r for r in self.losses if r.model_role == role]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "model_role", "ce", "kl_mentor", "kl_teacher", "total"])
            for r in self.losses:
                w.writerow([r.epoch, r.model_role, repr(r.ce), repr(r.kl_mentor),
                            repr(r.kl_teacher), repr(r.total)])


def role_loss(model: ExitableModel, xb, yb, temperature: float = 1.0, p_mentor=None, p_teacher=None,
              w_mentor: float = 0.0, w_teacher: float = 0.0) -> tuple:
    """CE on the final head plus weighted KL to each supplied target.

    Targets are plain arrays (no graph). Returns (total, ce, kl_mentor, kl_teacher)
    with the total still attached for backward().
    """
    probs = model.forward_full(xb)
    ce = nx.cross_entropy(probs, yb)
    loss, kl_m, kl_t = ce, 0.0, 0.0
    soft = probs if temperature == 1.0 else model.forward_full(xb, temperature)
    scale = temperature * temperature
    if p_mentor is not None:
        term = nx.kl_divergence(soft, p_mentor) * scale
        loss = loss + w_mentor * term
        kl_m = term.item()
    if p_teacher is not None:
        term = nx.kl_divergence(soft, p_teacher) * scale
        loss = loss + w_teacher * term
        kl_t = term.item()
    return loss, ce, kl_m, kl_t


class _Learner:
    """One model under SGD, with its running per-epoch loss sums."""

    def __init__(self, role: str, model: ExitableModel, w_mentor: float = 0.0, w_teacher: float = 0.0):
        self.role = role
        self.model = model
        self.params = model.backbone_params()
        self.w_mentor = w_mentor
        self.w_teacher = w_teacher
        self.sums = np.zeros(4)
        self.batches = 0

    def step(self, xb, yb, lr: float, temperature: float, p_mentor=None, p_teacher=None) -> None:
        loss, ce, kl_m, kl_t = role_loss(self.model, xb, yb, temperature, p_mentor, p_teacher,
                                         self.w_mentor, self.w_teacher)
        loss.backward()
        for p in self.params:
            p.data -= lr * p.grad
            p.zero_grad()
        self.sums += (ce.item(), kl_m, kl_t, loss.item())
        self.batches += 1

    def close_epoch(self, epoch: int) -> EpochLoss:
        m = self.sums / max(self.batches, 1)
        self.sums[:] = 0.0
        self.batches = 0
        return EpochLoss(epoch, self.role, *(float(v) for v in m))


def _final_logits(model: ExitableModel, xb) -> np.ndarray:
    with nx.no_grad():
        return model.head_logits(model.trunk(xb, model.config.depth), model.config.num_exits).data


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _check_data(data: Dataset):
    if data is None or len(data) == 0:
        raise DataError("training dataset is empty")
    return data.inputs(), data.labels()


def _run(plan: DistillPlan, data: Dataset, learners: list, val: Dataset | None,
         teachers: dict | None = None) -> TrainReport:
    """Shared SGD schedule. ``learners`` are stepped in order on every batch;
    each learner's targets come from the models named in ``teachers``."""
    X, y = _check_data(data)
    rng = np.random.default_rng(plan.seed)
    report = TrainReport(seed=plan.seed)
    start = time.perf_counter()
    teachers = teachers or {}
    by_role = {lr.role: lr for lr in learners}
    for epoch in range(1, plan.epochs + 1):
        for idx in _batches(len(X), plan.batch_size, rng):
            xb, yb = X[idx], y[idx]
            for learner in learners:
                src = teachers.get(learner.role, {})
                targets = {}
                for slot, source in src.items():
                    model = by_role[source].model if isinstance(source, str) else source
                    targets[slot] = model.predict_proba(xb) if plan.temperature == 1.0 else \
                        nx.softmax(Tensor(_final_logits(model, xb)), plan.temperature).data
                learner.step(xb, yb, plan.learning_rate, plan.temperature,
                             targets.get("mentor"), targets.get("teacher"))
        for learner in learners:
            report.losses.append(learner.close_epoch(epoch))
    for learner in learners:
        learner.model.backbone_trained = True
    if val is not None:
        refs = ReferenceCache(val, plan.budget)
        for learner in learners:
            report.val_f1[learner.role] = evaluate_model(learner.model, val, plan.budget, references=refs)
    report.wall_seconds = time.perf_counter() - start
    return report


def train_teacher(plan: DistillPlan, data: Dataset, val: Dataset | None = None, role: str = "teacher"):
    """Plain cross-entropy training of ``plan.teacher``."""
    plan.validate()
    model = init_model(plan.teacher)
    report = _run(plan, data, [_Learner(role, model)], val)
    return model, report


def train_student_plain(plan: DistillPlan, data: Dataset, val: Dataset | None = None):
    """Cross-entropy-only training of ``plan.student`` (the no-KD baseline)."""
    return train_teacher(dataclasses.replace(plan, teacher=plan.student, mentor=None,
                                             mode="teacher_only"), data, val, role="student")


def train_kd_single(plan: DistillPlan, teacher: ExitableModel, data: Dataset,
                    val: Dataset | None = None, edge: str = "teacher"):
    """Student minimizes CE + lam * KL(P_student || P_source); the source stays frozen.

    ``edge`` names the report column the KL term is logged under
    (``"teacher"`` or ``"mentor"``).
    """
    plan.validate()
    if not teacher.backbone_trained:
        raise LifecycleError("train_kd_single needs a trained teacher")
    if edge not in ("teacher", "mentor"):
        raise PlanError(f"edge must be 'teacher' or 'mentor', got {edge!r}")
    student = init_model(plan.student)
    learner = _Learner("student", student, w_mentor=plan.lam if edge == "mentor" else 0.0,
                       w_teacher=plan.lam if edge == "teacher" else 0.0)
    report = _run(plan, data, [learner], val, teachers={"student": {edge: teacher}})
    return student, report


def train_mskd(plan: DistillPlan, data: Dataset, val: Dataset | None = None):
    """Joint teacher/mentor/student training, stepped in that order per batch.

    teacher: CE; mentor: CE + phi KL(P_m || P_t); student: CE + phi KL(P_s || P_m)
    + psi KL(P_s || P_t). Targets are read after the source's own update on the
    same batch and are treated as constants.
    """
    plan.validate()
    if plan.mode != "mskd_joint":
        raise PlanError(f"train_mskd requires mode 'mskd_joint', got {plan.mode!r}")
    teacher, mentor, student = (init_model(c) for c in (plan.teacher, plan.mentor, plan.student))
    learners = [
        _Learner("teacher", teacher),
        _Learner("mentor", mentor, w_teacher=plan.phi),
        _Learner("student", student, w_mentor=plan.phi, w_teacher=plan.psi),
    ]
    teachers = {"mentor": {"teacher": "teacher"},
                "student": {"mentor": "mentor", "teacher": "teacher"}}
    report = _run(plan, data, learners, val, teachers)
    return teacher, mentor, student, report
