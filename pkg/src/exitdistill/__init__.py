"""Multi-stage distillation and early-exit routing for small exitable classifiers."""
from .numerics import Tensor, softmax, cross_entropy, kl_divergence, cosine_similarity, grad_check
from .data import PlantedSpec, DatasetHeader, Dataset, generate, split, ablate_groups
from .model import ModelConfig, ExitableModel, init_model, calibrate_exit_heads, finalize_prototype
from .distill import DistillPlan, train_teacher, train_student_plain, train_kd_single, train_mskd
from .earlyexit import RoutingPolicy, route, sweep_tau, select_tau, bench
from .evaluation import select_summary, f1_against_reference, f1_multi_reference, evaluate_model

__version__ = "0.1.0"
