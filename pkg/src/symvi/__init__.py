"""Variational symbolic regression over soft expression trees."""

from .bench import Dataset, GeneratorSpec, fit_and_rank, generate, rmse, run_benchmark, split
from .prior import PriorConfig
from .relax import TempSchedule
from .sampler import Candidate, sample_hard, score_candidates, top_k
from .train import FitResult, TrainConfig, fit
from .trees import DEFAULT_OPERATORS, OperatorSet, Topology

__all__ = [
    "Dataset",
    "GeneratorSpec",
    "generate",
    "split",
    "rmse",
    "run_benchmark",
    "fit_and_rank",
    "PriorConfig",
    "TempSchedule",
    "TrainConfig",
    "FitResult",
    "fit",
    "Candidate",
    "sample_hard",
    "score_candidates",
    "top_k",
    "DEFAULT_OPERATORS",
    "OperatorSet",
    "Topology",
]

__version__ = "0.1.0"
