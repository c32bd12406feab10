"""Hard ensemble sampling from optimized variational parameters, posterior
coefficient estimates, and in-sample RMSE ranking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax

from .linmodel import nig_update, posterior_means, predict
from .numerics import RandomSource
from .prior import ResolvedPrior
from .relax import VariationalParams
from .trees import (
    HardSkeleton,
    OperatorSet,
    SymbolicTree,
    Topology,
    canonicalize,
    design_matrix,
    infix,
    prune,
)

__all__ = [
    "Candidate",
    "sample_hard",
    "score_candidates",
    "top_k",
    "render_candidate",
]


@dataclass
class Candidate:
    trees: tuple[SymbolicTree, ...]
    beta_pm: np.ndarray
    sigma2_pm: float
    in_rmse: float
    canonical: tuple[str, ...]
    rank: int
    draw_index: int


def _categorical_draws(u: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws; u broadcasts over the leading axis of probs."""
    cum = np.cumsum(probs, axis=-1)
    return np.sum(u[..., None] > cum[None, ..., :-1], axis=-1)


def sample_hard(
    phi: VariationalParams,
    n_draws: int,
    topo: Topology,
    ops: OperatorSet,
    src: RandomSource,
) -> list[list[HardSkeleton]]:
    """Draw hard skeleton ensembles from the variational marginals.

    Expansion bits are Bernoulli at the gate probabilities with maximum-depth
    nodes forced to leaves; operator and feature labels are categorical at
    the softmax of the logits, sampled independently everywhere (labels at
    unexpanded nodes never influence the pruned tree).
    """
    if n_draws < 1:
        raise ValueError("need at least one draw")
    n_trees, n_internal = phi.ell.shape
    n_nodes = topo.n_nodes
    p_gate = expit(phi.ell)
    pi_op = softmax(phi.a_op, axis=-1)
    pi_ft = softmax(phi.a_ft, axis=-1)

    e = (src.uniform01((n_draws, n_trees, n_internal)) < p_gate).astype(np.int8)
    o_internal = _categorical_draws(src.uniform01((n_draws, n_trees, n_internal)), pi_op)
    feat = _categorical_draws(src.uniform01((n_draws, n_trees, n_nodes)), pi_ft)

    ensembles = []
    pad = n_nodes - n_internal
    for s in range(n_draws):
        ensemble = []
        for j in range(n_trees):
            ensemble.append(
                HardSkeleton(
                    expand=np.concatenate([e[s, j], np.zeros(pad, dtype=np.int8)]),
                    op=np.concatenate([o_internal[s, j], np.zeros(pad, dtype=int)]),
                    feat=feat[s, j].astype(int),
                )
            )
        ensembles.append(ensemble)
    return ensembles


def score_candidates(
    ensembles: list[list[HardSkeleton]],
    x_matrix: np.ndarray,
    y: np.ndarray,
    prior: ResolvedPrior,
    topo: Topology,
    ops: OperatorSet,
) -> list[Candidate]:
    """Prune, fit, and rank every ensemble by in-sample RMSE (ascending,
    stable in the draw index).  Ensembles whose design matrix has any
    non-finite entry on the training data are discarded, not repaired."""
    x_matrix = np.asarray(x_matrix, dtype=float)
    y = np.asarray(y, dtype=float)
    scored = []
    for draw_index, ensemble in enumerate(ensembles):
        trees = tuple(prune(skel, topo, ops) for skel in ensemble)
        t_matrix = design_matrix(trees, x_matrix)
        if not np.all(np.isfinite(t_matrix)):
            continue
        try:
            post = nig_update(t_matrix, y, prior)
        except np.linalg.LinAlgError:
            continue
        beta_pm, sigma2_pm = posterior_means(post)
        residual = y - predict(t_matrix, beta_pm)
        in_rmse = float(np.sqrt(np.mean(residual**2))) if len(y) else 0.0
        scored.append(
            Candidate(
                trees=trees,
                beta_pm=beta_pm,
                sigma2_pm=float(sigma2_pm),
                in_rmse=in_rmse,
                canonical=tuple(canonicalize(tree) for tree in trees),
                rank=0,
                draw_index=draw_index,
            )
        )
    if not scored:
        raise RuntimeError("no valid candidate")
    scored.sort(key=lambda c: c.in_rmse)  # stable: ties keep draw order
    for rank, cand in enumerate(scored, start=1):
        cand.rank = rank
    return scored


def top_k(candidates: list[Candidate], k: int, dedupe: bool = False) -> tuple[list[Candidate], bool]:
    """First k candidates plus a truncation flag when fewer are available.

    With dedupe=True, later candidates repeating an earlier canonical tuple
    are dropped from the view (the raw ranked list keeps duplicates since
    duplicate frequency is itself uncertainty information).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pool = candidates
    if dedupe:
        seen = set()
        pool = []
        for cand in candidates:
            if cand.canonical in seen:
                continue
            seen.add(cand.canonical)
            pool.append(cand)
    truncated = k > len(pool)
    return pool[:k], truncated


def render_candidate(cand: Candidate, feature_names=None, decimals: int = 3) -> str:
    """Infix rendering with posterior-mean coefficients, intercept first."""
    parts = [f"{cand.beta_pm[0]:.{decimals}f}"]
    for beta, tree in zip(cand.beta_pm[1:], cand.trees):
        parts.append(f"{beta:+.{decimals}f}*{infix(tree, feature_names)}")
    return " ".join(parts)
