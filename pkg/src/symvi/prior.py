"""Prior over skeletons and regression parameters, plus closed-form KL terms.

The KL pieces are built on the differentiation tape so the whole divergence
between the mean-field family and the prior is one differentiable node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .numerics import log_mv_beta
from .trees import Topology

__all__ = [
    "PriorConfig",
    "ResolvedPrior",
    "split_prob",
    "split_probs",
    "kl_bernoulli",
    "kl_dirichlet",
    "expected_kl_categorical",
    "kl_total",
    "dropped_leaf_constant",
]


@dataclass
class PriorConfig:
    """Hyperparameters; array-valued fields default to the standard choices.

    Defaults: (alpha, delta) = (0.95, 2.0), mu0 = 0, Sigma0 = 10 I,
    a0 = b0 = 2, unit Dirichlet concentrations.
    """

    alpha: float = 0.95
    delta: float = 2.0
    a0: float = 2.0
    b0: float = 2.0
    sigma0_scale: float = 10.0
    mu0: np.ndarray | None = None
    sigma0: np.ndarray | None = None
    eta_op: np.ndarray | None = None
    eta_ft: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.delta <= 0.0 or self.a0 <= 0.0 or self.b0 <= 0.0 or self.sigma0_scale <= 0.0:
            raise ValueError("delta, a0, b0, sigma0_scale must be positive")

    def resolved(self, n_coef: int, n_ops: int, n_features: int) -> "ResolvedPrior":
        mu0 = np.zeros(n_coef) if self.mu0 is None else np.asarray(self.mu0, dtype=float)
        sigma0 = (
            self.sigma0_scale * np.eye(n_coef)
            if self.sigma0 is None
            else np.asarray(self.sigma0, dtype=float)
        )
        eta_op = np.ones(n_ops) if self.eta_op is None else np.asarray(self.eta_op, dtype=float)
        eta_ft = np.ones(n_features) if self.eta_ft is None else np.asarray(self.eta_ft, dtype=float)
        if mu0.shape != (n_coef,) or sigma0.shape != (n_coef, n_coef):
            raise ValueError("mu0/sigma0 shapes do not match the ensemble size")
        if eta_op.shape != (n_ops,) or eta_ft.shape != (n_features,):
            raise ValueError("Dirichlet concentration shapes do not match")
        if np.any(eta_op <= 0) or np.any(eta_ft <= 0):
            raise ValueError("Dirichlet concentrations must be positive")
        chol = np.linalg.cholesky(sigma0)
        logdet_sigma0 = 2.0 * float(np.sum(np.log(np.diag(chol))))
        sigma0_inv = np.linalg.inv(sigma0)
        sigma0_inv = 0.5 * (sigma0_inv + sigma0_inv.T)
        return ResolvedPrior(
            alpha=self.alpha,
            delta=self.delta,
            a0=self.a0,
            b0=self.b0,
            mu0=mu0,
            sigma0=sigma0,
            sigma0_inv=sigma0_inv,
            sigma0_inv_mu0=sigma0_inv @ mu0,
            logdet_sigma0=logdet_sigma0,
            eta_op=eta_op,
            eta_ft=eta_ft,
        )


@dataclass(frozen=True)
class ResolvedPrior:
    alpha: float
    delta: float
    a0: float
    b0: float
    mu0: np.ndarray
    sigma0: np.ndarray
    sigma0_inv: np.ndarray
    sigma0_inv_mu0: np.ndarray
    logdet_sigma0: float
    eta_op: np.ndarray
    eta_ft: np.ndarray


def split_prob(depth: int, alpha: float, delta: float) -> float:
    """Depth-dependent expansion probability alpha * (1 + depth)^(-delta)."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    return alpha * (1.0 + depth) ** (-delta)


def split_probs(topo: Topology, alpha: float, delta: float) -> np.ndarray:
    """Expansion probabilities for the internal-capable nodes, heap order."""
    depths = topo.depths()[: topo.n_internal]
    return alpha * (1.0 + depths) ** (-delta)


def kl_bernoulli(p_tilde: ad.Node, p) -> ad.Node:
    """KL(Ber(p_tilde) || Ber(p)), elementwise on array-valued nodes."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("prior Bernoulli probability must lie in (0, 1)")
    return p_tilde * (ad.log(p_tilde) - np.log(p)) + (1.0 - p_tilde) * (
        ad.log(1.0 - p_tilde) - np.log(1.0 - p)
    )


def kl_dirichlet(eta_tilde: ad.Node, eta) -> ad.Node:
    """KL(Dir(eta_tilde) || Dir(eta)) as a scalar tape node."""
    eta = np.asarray(eta, dtype=float)
    log_beta_prior = log_mv_beta(eta)
    log_beta_q = ad.vsum(ad.lgamma(eta_tilde)) - ad.lgamma(ad.vsum(eta_tilde))
    centered = ad.digamma(eta_tilde) - ad.digamma(ad.vsum(eta_tilde))
    return (log_beta_prior - log_beta_q) + ad.vsum((eta_tilde - eta) * centered)


def expected_kl_categorical(pi_tilde: ad.Node, eta_tilde: ad.Node) -> ad.Node:
    """E_{w ~ Dir(eta_tilde)} KL(Cat(pi_tilde) || Cat(w)), reduced over the last axis.

    Exactly zero probabilities contribute zero (the x log x limit); the tiny
    clamp below only ever fires for hand-built one-hot inputs since softmax
    outputs are strictly interior.
    """
    safe_log = ad.log(ad.clamp_min(pi_tilde, 1e-300))
    inner = safe_log - ad.digamma(eta_tilde) + ad.digamma(ad.vsum(eta_tilde))
    return ad.vsum(pi_tilde * inner, axis=-1)


def kl_total(phi, prior: ResolvedPrior, topo: Topology) -> ad.Node:
    """Full KL between the mean-field family and the prior.

    Two Dirichlet terms plus, per tree and per internal-capable node, the
    Bernoulli term and both expected categorical terms.  Maximum-depth nodes
    are forced leaves, so their expansion term is a constant we drop (see
    dropped_leaf_constant) and they carry no per-node KL here.
    """
    eta_op = ad.exp(phi.log_eta_op)
    eta_ft = ad.exp(phi.log_eta_ft)
    total = kl_dirichlet(eta_op, prior.eta_op) + kl_dirichlet(eta_ft, prior.eta_ft)

    n_trees = phi.ell.value.shape[0]
    if n_trees == 0:
        return total

    p_prior = split_probs(topo, prior.alpha, prior.delta)
    p_tilde = ad.sigmoid(phi.ell)
    total = total + ad.vsum(kl_bernoulli(p_tilde, p_prior))

    pi_op = ad.softmax_last(phi.a_op)
    total = total + ad.vsum(expected_kl_categorical(pi_op, eta_op))

    a_ft_internal = ad.take(phi.a_ft, (slice(None), slice(0, topo.n_internal), slice(None)))
    pi_ft = ad.softmax_last(a_ft_internal)
    total = total + ad.vsum(expected_kl_categorical(pi_ft, eta_ft))
    return total


def dropped_leaf_constant(prior: ResolvedPrior, topo: Topology, n_trees: int) -> float:
    """Constant KL mass of the forced max-depth leaves, reported but not optimized.

    Each forced leaf has a degenerate expansion distribution at zero, whose
    divergence from Ber(p_D) is -log(1 - p_D) independent of the variational
    parameters.
    """
    p_leaf = split_prob(topo.depth, prior.alpha, prior.delta)
    n_leaf_nodes = topo.n_nodes - topo.n_internal
    return float(n_trees * n_leaf_nodes * (-np.log1p(-p_leaf)))
