"""Sequentially trained early-exit networks with forgetting-aware regularisers."""

from ._kernels import BACKEND
from .config import BENCHMARK, RunConfig, load_config
from .data import Dataset, load_csv, save_csv, synth_blobs
from .evaluator import (
    ExitPolicy, FlopsTable, accuracy_at_budget, budget_curve, evaluate, flops_of,
    threshold_inference,
)
from .model import ExitNetwork, ModelSpec, ParamId, load_checkpoint, save_checkpoint
from .objectives import (
    FisherStore, LossConfig, TeacherCache, cross_entropy, empirical_fisher, ewc_penalty,
    kl_divergence, lwf_penalty, total_stage_loss,
)
from .tensor import NonFiniteError, ShapeError, Tape, Tensor
from .trainer import StageReport, TrainConfig, TrainingDiverged, forgetting, run_regime, sgd_step

__all__ = [
    "BACKEND", "BENCHMARK", "Dataset", "ExitNetwork", "ExitPolicy", "FisherStore", "FlopsTable",
    "LossConfig", "ModelSpec", "NonFiniteError", "ParamId", "RunConfig", "ShapeError", "StageReport",
    "Tape", "TeacherCache", "Tensor", "TrainConfig", "TrainingDiverged", "accuracy_at_budget",
    "budget_curve", "cross_entropy", "empirical_fisher", "evaluate", "ewc_penalty", "flops_of",
    "forgetting", "kl_divergence", "load_checkpoint", "load_config", "load_csv", "lwf_penalty",
    "run_regime", "save_checkpoint", "save_csv", "sgd_step", "synth_blobs", "threshold_inference",
    "total_stage_loss",
]
