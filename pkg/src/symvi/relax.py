"""Continuous relaxation of skeletons: Binary Concrete gates, Gumbel-Softmax
label weights, soft tree evaluation, and the temperature schedule.

Noise is drawn separately from the parameters so the same draw can be reused
across evaluations (gradient checks hold the noise fixed).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Any

import numpy as np

from . import autodiff as ad
from .numerics import RandomSource
from .trees import EXP_ARG_MAX, HardSkeleton, OperatorSet, Topology

__all__ = [
    "TempSchedule",
    "temperature",
    "VariationalParams",
    "StructuralNoise",
    "draw_noise",
    "SoftSample",
    "sample_soft",
    "one_hot_sample",
    "soft_eval_node",
    "soft_eval",
]


@dataclass(frozen=True)
class TempSchedule:
    tau_start: float = 1.0
    tau_end: float = 0.5
    t_tau: int = 1500

    def __post_init__(self):
        if not (self.tau_start >= self.tau_end > 0.0):
            raise ValueError("need tau_start >= tau_end > 0")
        if self.t_tau <= 0:
            raise ValueError("t_tau must be positive")


def temperature(step: int, sched: TempSchedule) -> float:
    """Linear anneal from tau_start to tau_end, clamped after t_tau steps."""
    frac = min(step / sched.t_tau, 1.0)
    return sched.tau_start + (sched.tau_end - sched.tau_start) * frac


@dataclass
class VariationalParams:
    """Per-node logits plus log Dirichlet concentrations.

    Shapes: ell (K, I), a_op (K, I, m), a_ft (K, N, p),
    log_eta_op (m,), log_eta_ft (p,), where I is the number of
    internal-capable nodes and N the full node count.  Maximum-depth nodes
    carry feature logits only; their gates are hard zeros.
    """

    ell: Any
    a_op: Any
    a_ft: Any
    log_eta_op: Any
    log_eta_ft: Any

    def on_tape(self, tape: ad.Tape) -> "VariationalParams":
        return VariationalParams(**{f.name: tape.leaf(getattr(self, f.name)) for f in fields(self)})

    def copy(self) -> "VariationalParams":
        return VariationalParams(**{f.name: np.array(getattr(self, f.name)) for f in fields(self)})

    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in fields(self))


@dataclass
class StructuralNoise:
    """Fixed uniform/Gumbel draws, one batch row per Monte Carlo sample."""

    logit_u: np.ndarray  # (S, K, I) logistic noise log u - log(1 - u)
    g_op: np.ndarray  # (S, K, I, m)
    g_ft: np.ndarray  # (S, K, N, p)


def draw_noise(
    sources: list[RandomSource], n_trees: int, topo: Topology, n_ops: int, n_features: int
) -> StructuralNoise:
    """One independent stream per Monte Carlo sample, stacked along axis 0."""
    i, n = topo.n_internal, topo.n_nodes
    logit_u, g_op, g_ft = [], [], []
    for src in sources:
        u = src.uniform01((n_trees, i))
        logit_u.append(np.log(u) - np.log1p(-u))
        g_op.append(src.gumbel((n_trees, i, n_ops)))
        g_ft.append(src.gumbel((n_trees, n, n_features)))
    return StructuralNoise(np.stack(logit_u), np.stack(g_op), np.stack(g_ft))


@dataclass
class SoftSample:
    """Relaxed structural variables on the tape, batched over samples."""

    e: Any  # (S, K, I) in (0, 1)
    o: Any  # (S, K, I, m) rows on the simplex
    h: Any  # (S, K, N, p) rows on the simplex


def _expand_taus(tau) -> tuple[float, float, float]:
    if np.isscalar(tau):
        return float(tau), float(tau), float(tau)
    tau_ex, tau_op, tau_ft = tau
    return float(tau_ex), float(tau_op), float(tau_ft)


def sample_soft(phi: VariationalParams, tau, noise: StructuralNoise, tape: ad.Tape) -> SoftSample:
    """Reparameterized soft structures; differentiable through phi with the
    noise held fixed.  Maximum-depth nodes have no gate entry at all, which
    realizes their hard-leaf constraint."""
    tau_ex, tau_op, tau_ft = _expand_taus(tau)
    e = ad.sigmoid((phi.ell + noise.logit_u) / tau_ex)
    o = ad.softmax_last((phi.a_op + noise.g_op) / tau_op)
    h = ad.softmax_last((phi.a_ft + noise.g_ft) / tau_ft)
    return SoftSample(e=e, o=o, h=h)


def one_hot_sample(
    ensemble: list[HardSkeleton], topo: Topology, ops: OperatorSet, n_features: int, tape: ad.Tape
) -> SoftSample:
    """Exact 0/1 soft sample matching a hard ensemble (S = 1 batch row)."""
    k = len(ensemble)
    i, n, m = topo.n_internal, topo.n_nodes, ops.size
    e = np.zeros((1, k, i))
    o = np.zeros((1, k, i, m))
    h = np.zeros((1, k, n, n_features))
    for j, skel in enumerate(ensemble):
        e[0, j, :] = skel.expand[:i]
        o[0, j, np.arange(i), skel.op[:i]] = 1.0
        h[0, j, np.arange(n), skel.feat] = 1.0
    return SoftSample(e=tape.leaf(e), o=tape.leaf(o), h=tape.leaf(h))


def _all_zero(node) -> bool:
    return bool(np.all(node.value == 0.0))


def _unary_value(name: str, child):
    if name == "exp":
        return ad.exp(ad.clamp_max(child, EXP_ARG_MAX))
    if name == "log":
        return ad.log(child)
    if name == "sin":
        return ad.sin(child)
    if name == "cos":
        return ad.cos(child)
    if name == "sq":
        return ad.square(child)
    raise ValueError(f"unknown unary operator {name!r}")


def _binary_value(name: str, left, right):
    if name == "add":
        return left + right
    if name == "mul":
        return left * right
    if name == "sub":
        return left - right
    if name == "div":
        return left / right
    raise ValueError(f"unknown binary operator {name!r}")


def _eval_at(
    zeta: int,
    x_t: np.ndarray,
    jsel: slice,
    sample: SoftSample,
    ops: OperatorSet,
    topo: Topology,
) -> ad.Node:
    """Soft gate between the terminal feature mixture and the operator mixture,
    evaluated for the selected trees at once; returns an (S, K', n) node.

    Terms whose weight is exactly zero across the whole selection are
    skipped, so hand-built one-hot samples evaluate exactly like the pruned
    hard tree (0 * non-finite never poisons a branch pruning would have
    removed).  Softmax and sigmoid outputs are strictly interior, so
    training tapes never skip anything.
    """
    h = ad.take(sample.h, (slice(None), jsel, zeta, slice(None)))  # (S, K', p)
    term = ad.matmul(h, x_t)  # (S, K', n)
    if topo.is_max_depth(zeta):
        return term

    gate = ad.take(sample.e, (slice(None), jsel, zeta, None))  # (S, K', 1)
    left = right = None

    def child(which: int):
        nonlocal left, right
        if which == 0:
            if left is None:
                left = _eval_at(topo.left(zeta), x_t, jsel, sample, ops, topo)
            return left
        if right is None:
            right = _eval_at(topo.right(zeta), x_t, jsel, sample, ops, topo)
        return right

    mix = None
    for k, name in enumerate(ops.members):
        weight = ad.take(sample.o, (slice(None), jsel, zeta, slice(k, k + 1)))  # (S, K', 1)
        if _all_zero(weight):
            continue
        if ops.is_unary(k):
            value = _unary_value(name, child(0))
        else:
            value = _binary_value(name, child(0), child(1))
        contrib = weight * value
        mix = contrib if mix is None else mix + contrib

    if _all_zero(gate) or mix is None:
        return term
    if bool(np.all(gate.value == 1.0)):
        return mix
    return (1.0 - gate) * term + gate * mix


def _has_hard_weights(sample: SoftSample) -> bool:
    e = sample.e.value
    return bool(np.any((e == 0.0) | (e == 1.0)) or np.any(sample.o.value == 0.0))


def soft_eval_node(
    zeta: int,
    x_matrix: np.ndarray,
    tree_index: int,
    sample: SoftSample,
    ops: OperatorSet,
    topo: Topology,
) -> ad.Node:
    """Evaluate one tree's subtree rooted at zeta on every row; (S, n) node."""
    x_t = np.asarray(x_matrix, dtype=float).T
    j = tree_index
    out = _eval_at(zeta, x_t, slice(j, j + 1), sample, ops, topo)
    return ad.take(out, (slice(None), 0, slice(None)))


def soft_eval(
    sample: SoftSample, x_matrix: np.ndarray, ops: OperatorSet, topo: Topology
) -> list:
    """Soft design matrix as K+1 columns: a constant intercept followed by
    one (S, n) node per tree, each evaluated at the root.

    Interior samples (every training draw) evaluate all trees in a single
    batched recursion; samples containing exact 0/1 weights fall back to a
    per-tree pass so the zero-weight short-circuit applies tree by tree.
    """
    x_matrix = np.asarray(x_matrix, dtype=float)
    n_trees = sample.h.value.shape[1]
    cols: list = [np.ones(x_matrix.shape[0])]
    if _has_hard_weights(sample):
        for j in range(n_trees):
            cols.append(soft_eval_node(0, x_matrix, j, sample, ops, topo))
        return cols
    root = _eval_at(0, x_matrix.T, slice(None), sample, ops, topo)  # (S, K, n)
    for j in range(n_trees):
        cols.append(ad.take(root, (slice(None), j, slice(None))))
    return cols
