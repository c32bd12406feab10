"""Stochastic ELBO estimation and the gradient-based optimization loop.

The loop follows one recovery rule: any step whose objective or gradient is
non-finite is skipped without touching the parameters or optimizer state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .numerics import RandomSource
from .prior import ResolvedPrior, kl_total, split_probs
from .relax import (
    StructuralNoise,
    TempSchedule,
    VariationalParams,
    draw_noise,
    sample_soft,
    soft_eval,
    temperature,
)
from .linmodel import log_marginal_tape
from .trees import OperatorSet, Topology

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "ElboParts",
    "TraceRow",
    "FitResult",
    "FitError",
    "init_variational_params",
    "approx_elbo",
    "adamw_step",
    "global_grad_norm",
    "fit",
    "write_trace_csv",
]

# stream-id layout: one stream per purpose so draws never collide
STREAM_INIT = 1
STREAM_NOISE_BASE = 1 << 20
STREAM_HARD = 1 << 40


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    mc_samples: int = 8
    learning_rate: float = 5e-5
    clip: float = 1.0
    adam_betas: tuple[float, float] = (0.90, 0.99)
    weight_decay: float = 0.0
    adam_eps: float = 1e-8
    seed: int = 0
    schedule: TempSchedule = field(default_factory=TempSchedule)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, phi: VariationalParams) -> "OptimizerState":
        zeros = {name: np.zeros_like(getattr(phi, name)) for name in phi.names()}
        return cls(m=zeros, v={k: np.zeros_like(a) for k, a in zeros.items()})


@dataclass
class ElboParts:
    elbo: ad.Node
    ml_mean: ad.Node
    kl: ad.Node
    phi_nodes: VariationalParams


@dataclass
class TraceRow:
    step: int
    tau: float
    elbo: float
    grad_norm: float
    skipped: bool


@dataclass
class FitResult:
    phi: VariationalParams
    phi_init: VariationalParams
    trace: list[TraceRow]
    applied_steps: int
    skipped_steps: int


def init_variational_params(
    n_trees: int,
    topo: Topology,
    ops: OperatorSet,
    n_features: int,
    prior: ResolvedPrior,
    src: RandomSource,
) -> VariationalParams:
    """Prior-centered start: gates begin at the prior split probabilities,
    label logits get tiny symmetry-breaking noise, concentrations match the
    prior exactly (so the Dirichlet KL terms start at zero)."""
    p = split_probs(topo, prior.alpha, prior.delta)
    ell = np.tile(np.log(p / (1.0 - p)), (n_trees, 1))
    a_op = 0.01 * src.gaussian((n_trees, topo.n_internal, ops.size))
    a_ft = 0.01 * src.gaussian((n_trees, topo.n_nodes, n_features))
    return VariationalParams(
        ell=ell,
        a_op=np.asarray(a_op),
        a_ft=np.asarray(a_ft),
        log_eta_op=np.log(prior.eta_op),
        log_eta_ft=np.log(prior.eta_ft),
    )


def approx_elbo(
    phi: VariationalParams,
    x_matrix: np.ndarray,
    y: np.ndarray,
    prior: ResolvedPrior,
    ops: OperatorSet,
    topo: Topology,
    tau,
    noise: StructuralNoise,
    tape: ad.Tape,
) -> ElboParts:
    """Monte Carlo ELBO: mean relaxed log marginal minus analytic KL.

    One batched tape evaluates all samples; the KL term is computed once.
    """
    phi_nodes = phi.on_tape(tape)
    n_samples = noise.logit_u.shape[0]
    sample = sample_soft(phi_nodes, tau, noise, tape)
    cols = soft_eval(sample, x_matrix, ops, topo)
    ml = log_marginal_tape(cols, y, prior)  # (S,) or 0.0 when n == 0
    ml_mean = ad.vsum(ml) / n_samples if isinstance(ml, ad.Node) else tape.leaf(0.0) * 0.0
    kl = kl_total(phi_nodes, prior, topo)
    return ElboParts(elbo=ml_mean - kl, ml_mean=ml_mean, kl=kl, phi_nodes=phi_nodes)


def adamw_step(
    state: OptimizerState,
    grads: dict[str, np.ndarray],
    params: dict[str, np.ndarray],
    cfg: TrainConfig,
) -> dict[str, np.ndarray]:
    """Bias-corrected moment update with decoupled weight decay; returns the
    per-coordinate deltas to add to the parameters."""
    beta1, beta2 = cfg.adam_betas
    state.step += 1
    t = state.step
    deltas = {}
    for name, g in grads.items():
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1**t)
        v_hat = state.v[name] / (1.0 - beta2**t)
        deltas[name] = -cfg.learning_rate * (
            m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * params[name]
        )
    return deltas


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _noise_sources(seed: int, step: int, n_samples: int) -> list[RandomSource]:
    base = STREAM_NOISE_BASE + (step - 1) * n_samples
    return [RandomSource(seed, base + s) for s in range(n_samples)]


def fit(
    x_matrix: np.ndarray,
    y: np.ndarray,
    prior: ResolvedPrior,
    cfg: TrainConfig,
    ops: OperatorSet,
    n_trees: int,
    depth: int,
) -> FitResult:
    """Run the full optimization loop and return the final parameters plus a
    per-step trace (ELBO value, temperature, pre-clip gradient norm, skip flag)."""
    x_matrix = np.asarray(x_matrix, dtype=float)
    y = np.asarray(y, dtype=float)
    if x_matrix.shape[0] < 1 or x_matrix.shape[1] < 1:
        raise ValueError("need at least one row and one feature")
    topo = Topology(depth)
    phi = init_variational_params(
        n_trees, topo, ops, x_matrix.shape[1], prior, RandomSource(cfg.seed, STREAM_INIT)
    )
    phi_init = phi.copy()
    state = OptimizerState.for_params(phi)
    trace: list[TraceRow] = []
    applied = 0

    for step in range(1, cfg.steps + 1):
        tau = temperature(step, cfg.schedule)
        tape = ad.Tape()
        noise = draw_noise(
            _noise_sources(cfg.seed, step, cfg.mc_samples),
            n_trees,
            topo,
            ops.size,
            x_matrix.shape[1],
        )
        parts = approx_elbo(phi, x_matrix, y, prior, ops, topo, tau, noise, tape)
        elbo_value = float(parts.elbo.value)
        objective = -elbo_value

        if not np.isfinite(objective):
            trace.append(TraceRow(step, tau, elbo_value, float("nan"), True))
            continue

        grad_map = tape.backward(parts.elbo)
        grads = {name: -grad_map[getattr(parts.phi_nodes, name)] for name in phi.names()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            trace.append(TraceRow(step, tau, elbo_value, float("nan"), True))
            continue

        norm = global_grad_norm(grads)
        if norm > cfg.clip:
            scale = cfg.clip / norm
            grads = {name: g * scale for name, g in grads.items()}

        params = {name: getattr(phi, name) for name in phi.names()}
        deltas = adamw_step(state, grads, params, cfg)
        for name in phi.names():
            setattr(phi, name, params[name] + deltas[name])
        applied += 1
        trace.append(TraceRow(step, tau, elbo_value, norm, False))

    if cfg.steps > 0 and applied == 0:
        raise FitError("optimization produced no valid step")
    return FitResult(
        phi=phi,
        phi_init=phi_init,
        trace=trace,
        applied_steps=applied,
        skipped_steps=cfg.steps - applied,
    )


def write_trace_csv(trace: list[TraceRow], path: str):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "tau", "elbo", "grad_norm", "skipped"])
        for row in trace:
            writer.writerow([row.step, repr(row.tau), repr(row.elbo), repr(row.grad_norm), int(row.skipped)])
