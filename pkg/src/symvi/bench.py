"""Synthetic regeneration of the evaluation suite: two simulation models,
four physics laws, train/test splitting, RMSE, and timed end-to-end runs."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .numerics import RandomSource
from .prior import PriorConfig
from .sampler import Candidate, sample_hard, score_candidates
from .train import STREAM_HARD, FitResult, TrainConfig, fit
from .trees import DEFAULT_OPERATORS, OperatorSet, Topology, design_matrix
from .linmodel import predict

__all__ = [
    "Dataset",
    "GeneratorSpec",
    "MODEL_NAMES",
    "generate",
    "split",
    "rmse",
    "fit_and_rank",
    "BenchmarkRepeat",
    "BenchmarkReport",
    "run_benchmark",
    "save_csv",
    "load_csv",
]


@dataclass
class Dataset:
    x: np.ndarray  # (n, p)
    y: np.ndarray  # (n,)
    feature_names: tuple[str, ...]

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError("feature matrix and response sizes disagree")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


def _sim_features(n: int, src: RandomSource) -> np.ndarray:
    cols = [2 * j + src.uniform01(n) for j in range(3)]
    return np.column_stack(cols)


def _unif_features(n: int, p: int, src: RandomSource, ranges) -> np.ndarray:
    if ranges is None:
        ranges = [(1.0, 5.0)] * p
    cols = [lo + (hi - lo) * src.uniform01(n) for lo, hi in ranges]
    return np.column_stack(cols)


# name -> (feature names, feature sampler, target formula)
_MODELS = {
    "sim1": (
        ("x0", "x1", "x2"),
        lambda n, src, ranges: _sim_features(n, src),
        lambda x: x[:, 0] ** 2 - x[:, 1] + 0.5 * x[:, 2] ** 2,
    ),
    "sim2": (
        ("x0", "x1", "x2"),
        lambda n, src, ranges: _sim_features(n, src),
        lambda x: 6.0 * np.sin(x[:, 0]) * np.cos(x[:, 1]),
    ),
    "CL": (
        ("q1", "q2", "r", "epsilon"),
        lambda n, src, ranges: _unif_features(n, 4, src, ranges),
        lambda x: 0.08 * x[:, 0] * x[:, 1] / (x[:, 3] * x[:, 2] ** 2),
    ),
    "CPE": (
        ("m1", "m2", "r1", "r2", "G"),
        lambda n, src, ranges: _unif_features(n, 5, src, ranges),
        lambda x: x[:, 4] * x[:, 0] * x[:, 1] * (1.0 / x[:, 3] - 1.0 / x[:, 2]),
    ),
    "FCE": (
        ("q", "Ef", "v", "B", "theta"),
        lambda n, src, ranges: _unif_features(n, 5, src, ranges),
        lambda x: x[:, 0] * (x[:, 1] + x[:, 2] * x[:, 3] * np.sin(x[:, 4])),
    ),
    "FTC": (
        ("A", "T1", "T2", "d", "kappa"),
        lambda n, src, ranges: _unif_features(n, 5, src, ranges),
        lambda x: x[:, 4] * x[:, 0] * (x[:, 2] - x[:, 1]) / x[:, 3],
    ),
}

MODEL_NAMES = tuple(_MODELS)


@dataclass
class GeneratorSpec:
    model: str
    n: int = 2000
    noise_sd: float = 0.0
    seed: int = 0
    ranges: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.model not in _MODELS:
            raise ValueError(f"unknown model {self.model!r}; choose from {MODEL_NAMES}")
        if self.n < 1 or self.noise_sd < 0:
            raise ValueError("need n >= 1 and noise_sd >= 0")


def generate(spec: GeneratorSpec) -> Dataset:
    """Draw features, apply the model formula, add Gaussian response noise."""
    names, sampler, formula = _MODELS[spec.model]
    x = sampler(spec.n, RandomSource(spec.seed, 0), spec.ranges)
    y = formula(x)
    if spec.noise_sd > 0:
        y = y + spec.noise_sd * RandomSource(spec.seed, 1).gaussian(spec.n)
    return Dataset(x=x, y=np.asarray(y, dtype=float), feature_names=names)


def split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Uniform random partition without replacement, deterministic in seed."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = int(round(data.n * test_fraction))
    if n_test == 0 or n_test == data.n:
        raise ValueError("split would leave an empty side")
    order = np.argsort(RandomSource(seed, 2).uniform01(data.n), kind="stable")
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    make = lambda idx: Dataset(data.x[idx], data.y[idx], data.feature_names)
    return make(train_idx), make(test_idx)


def rmse(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError("rmse needs two equal-length non-empty vectors")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def fit_and_rank(
    train: Dataset,
    prior_cfg: PriorConfig,
    train_cfg: TrainConfig,
    ops: OperatorSet = DEFAULT_OPERATORS,
    n_trees: int = 3,
    depth: int = 3,
    hard_samples: int = 2000,
) -> tuple[FitResult, list[Candidate], Topology]:
    """Optimize the variational parameters, then draw and rank hard ensembles."""
    topo = Topology(depth)
    prior = prior_cfg.resolved(n_trees + 1, ops.size, train.p)
    result = fit(train.x, train.y, prior, train_cfg, ops, n_trees, depth)
    ensembles = sample_hard(
        result.phi, hard_samples, topo, ops, RandomSource(train_cfg.seed, STREAM_HARD)
    )
    candidates = score_candidates(ensembles, train.x, train.y, prior, topo, ops)
    return result, candidates, topo


def holdout_rmse(cand: Candidate, test: Dataset) -> float:
    t_matrix = design_matrix(cand.trees, test.x)
    if not np.all(np.isfinite(t_matrix)):
        return float("inf")
    return rmse(test.y, predict(t_matrix, cand.beta_pm))


@dataclass
class BenchmarkRepeat:
    repeat: int
    seed: int
    test_rmse: float
    in_rmse: float
    canonical: tuple[str, ...]
    expression: str
    seconds: float
    skipped_steps: int


@dataclass
class BenchmarkReport:
    model: str
    noise_sd: float
    repeats: list[BenchmarkRepeat] = field(default_factory=list)
    single_run: bool = False

    @property
    def mean_rmse(self) -> float:
        return float(np.mean([r.test_rmse for r in self.repeats]))

    @property
    def sd_rmse(self) -> float:
        vals = [r.test_rmse for r in self.repeats]
        return 0.0 if len(vals) < 2 else float(np.std(vals, ddof=1))

    @property
    def mean_seconds(self) -> float:
        return float(np.mean([r.seconds for r in self.repeats]))


def run_benchmark(
    spec: GeneratorSpec,
    prior_cfg: PriorConfig,
    train_cfg: TrainConfig,
    repeats: int,
    ops: OperatorSet = DEFAULT_OPERATORS,
    n_trees: int = 3,
    depth: int = 3,
    hard_samples: int = 2000,
    test_fraction: float = 0.1,
) -> BenchmarkReport:
    """generate -> split -> fit -> sample -> rank, repeated with shifted seeds."""
    from dataclasses import replace

    from .sampler import render_candidate

    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    report = BenchmarkReport(model=spec.model, noise_sd=spec.noise_sd, single_run=repeats == 1)
    for r in range(repeats):
        seed = spec.seed + r
        data = generate(replace(spec, seed=seed))
        train, test = split(data, test_fraction, seed)
        cfg = replace(train_cfg, seed=seed)
        started = time.perf_counter()
        result, candidates, _ = fit_and_rank(
            train, prior_cfg, cfg, ops, n_trees, depth, hard_samples
        )
        elapsed = time.perf_counter() - started
        best = candidates[0]
        report.repeats.append(
            BenchmarkRepeat(
                repeat=r,
                seed=seed,
                test_rmse=holdout_rmse(best, test),
                in_rmse=best.in_rmse,
                canonical=best.canonical,
                expression=render_candidate(best, data.feature_names),
                seconds=elapsed,
                skipped_steps=result.skipped_steps,
            )
        )
    return report


def save_csv(data: Dataset, path: str):
    """Comma-separated with a header row; response column named ``y``."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(data.feature_names) + ["y"])
        for row, target in zip(data.x, data.y):
            writer.writerow([repr(v) for v in row] + [repr(target)])


def load_csv(path: str) -> Dataset:
    """Load a dataset; the response is the column named ``y`` or ``target``,
    otherwise the last column."""
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty CSV") from None
        rows = [row for row in reader if row]
    if len(header) < 2:
        raise ValueError("CSV needs at least one feature column and a response")
    header = [h.strip() for h in header]
    y_col = len(header) - 1
    for candidate in ("y", "target"):
        if candidate in header:
            y_col = header.index(candidate)
            break
    try:
        values = np.array([[float(cell) for cell in row] for row in rows], dtype=float)
    except ValueError as err:
        raise ValueError(f"non-numeric cell in CSV: {err}") from None
    if values.ndim != 2 or values.shape[1] != len(header):
        raise ValueError("ragged CSV rows")
    if not np.all(np.isfinite(values)):
        raise ValueError("CSV contains missing or non-finite cells")
    feature_idx = [i for i in range(len(header)) if i != y_col]
    return Dataset(
        x=values[:, feature_idx],
        y=values[:, y_col],
        feature_names=tuple(header[i] for i in feature_idx),
    )
