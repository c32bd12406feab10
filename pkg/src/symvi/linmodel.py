"""Conjugate Normal-Inverse-Gamma linear model over design-matrix columns.

The log marginal likelihood comes in two forms: a fast numpy path for
scoring hard candidates, and a tape path whose Cholesky factorization is
unrolled into differentiable scalars so the relaxed training objective can
be backpropagated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .numerics import cholesky_logdet_solve, lgamma
from .prior import ResolvedPrior

__all__ = [
    "NIGPosterior",
    "nig_update",
    "log_marginal",
    "log_marginal_tape",
    "posterior_means",
    "predict",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class NIGPosterior:
    mu_n: np.ndarray
    sigma_n: np.ndarray
    a_n: float
    b_n: float


def _check_design(t_matrix: np.ndarray, y: np.ndarray):
    if t_matrix.ndim != 2 or t_matrix.shape[0] != y.shape[0]:
        raise ValueError("design matrix and response sizes disagree")
    if not np.all(np.isfinite(t_matrix)):
        raise ValueError("invalid design: non-finite entries")


def nig_update(t_matrix: np.ndarray, y: np.ndarray, prior: ResolvedPrior) -> NIGPosterior:
    """Posterior hyperparameters after conditioning on (T, y)."""
    t_matrix = np.asarray(t_matrix, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_design(t_matrix, y)
    n, d = t_matrix.shape
    precision = prior.sigma0_inv + t_matrix.T @ t_matrix
    rhs = prior.sigma0_inv_mu0 + t_matrix.T @ y
    solved, _ = cholesky_logdet_solve(precision, np.column_stack([rhs, np.eye(d)]))
    mu_n = solved[:, 0]
    sigma_n = solved[:, 1:]
    a_n = prior.a0 + 0.5 * n
    b_n = prior.b0 + 0.5 * (y @ y + prior.mu0 @ prior.sigma0_inv_mu0 - mu_n @ rhs)
    return NIGPosterior(mu_n=mu_n, sigma_n=0.5 * (sigma_n + sigma_n.T), a_n=a_n, b_n=float(b_n))


def log_marginal(t_matrix: np.ndarray, y: np.ndarray, prior: ResolvedPrior) -> float:
    """Complete log marginal likelihood log p(y | T), constants included.

    Returns -inf when the posterior precision fails to factor, which the
    caller treats exactly like any other non-finite objective sample.
    """
    t_matrix = np.asarray(t_matrix, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_design(t_matrix, y)
    n = t_matrix.shape[0]
    if n == 0:
        return 0.0
    precision = prior.sigma0_inv + t_matrix.T @ t_matrix
    rhs = prior.sigma0_inv_mu0 + t_matrix.T @ y
    try:
        mu_n, logdet_precision = cholesky_logdet_solve(precision, rhs)
    except np.linalg.LinAlgError:
        return -np.inf
    a_n = prior.a0 + 0.5 * n
    b_n = prior.b0 + 0.5 * (y @ y + prior.mu0 @ prior.sigma0_inv_mu0 - mu_n @ rhs)
    if b_n <= 0.0:
        return -np.inf
    return float(
        lgamma(a_n)
        - lgamma(prior.a0)
        + 0.5 * (-logdet_precision - prior.logdet_sigma0)
        + prior.a0 * math.log(prior.b0)
        - a_n * math.log(b_n)
        - 0.5 * n * _LOG_2PI
    )


def _is_node(x) -> bool:
    return isinstance(x, ad.Node)


def _sqrt(x):
    return ad.sqrt(x) if _is_node(x) else math.sqrt(x)


def _log(x):
    return ad.log(x) if _is_node(x) else math.log(x)


def _dot_last(a, b):
    """Row-wise dot of two columns, each a Node (S, n) or a plain array (n,)."""
    if _is_node(a) or _is_node(b):
        return ad.vsum(a * b if _is_node(a) else b * a, axis=-1)
    return float(np.dot(a, b))


def log_marginal_tape(columns: list, y: np.ndarray, prior: ResolvedPrior) -> ad.Node | float:
    """Tape form of log_marginal over K+1 design columns.

    Columns may be differentiable (S, n) nodes or constant arrays (the
    intercept).  The Cholesky factorization of the posterior precision and
    both triangular solves are unrolled into scalar tape operations, so a
    failed factorization surfaces as sqrt of a negative value, i.e. a
    non-finite objective.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    d = len(columns)
    if n == 0:
        return 0.0

    gram = [[None] * d for _ in range(d)]
    for i in range(d):
        for j in range(i, d):
            gram[i][j] = _dot_last(columns[i], columns[j]) + prior.sigma0_inv[i, j]
    rhs = [_dot_last(columns[i], y) + prior.sigma0_inv_mu0[i] for i in range(d)]

    # unrolled lower Cholesky of the posterior precision
    low = [[None] * d for _ in range(d)]
    for i in range(d):
        for j in range(i + 1):
            acc = gram[j][i] if j < i else gram[i][i]
            for k in range(j):
                acc = acc - low[i][k] * low[j][k]
            low[i][j] = _sqrt(acc) if j == i else acc / low[j][j]
    logdet_precision = low[0][0] * 0.0
    for i in range(d):
        logdet_precision = logdet_precision + 2.0 * _log(low[i][i])

    # forward then backward substitution for mu_n
    z = [None] * d
    for i in range(d):
        acc = rhs[i]
        for k in range(i):
            acc = acc - low[i][k] * z[k]
        z[i] = acc / low[i][i]
    mu = [None] * d
    for i in reversed(range(d)):
        acc = z[i]
        for k in range(i + 1, d):
            acc = acc - low[k][i] * mu[k]
        mu[i] = acc / low[i][i]

    quad = mu[0] * rhs[0]
    for i in range(1, d):
        quad = quad + mu[i] * rhs[i]
    a_n = prior.a0 + 0.5 * n
    b_n = prior.b0 + 0.5 * (float(y @ y) + float(prior.mu0 @ prior.sigma0_inv_mu0) - quad)

    return (
        lgamma(a_n)
        - lgamma(prior.a0)
        + 0.5 * (-logdet_precision - prior.logdet_sigma0)
        + prior.a0 * math.log(prior.b0)
        - a_n * _log(b_n)
        - 0.5 * n * _LOG_2PI
    )


def posterior_means(post: NIGPosterior) -> tuple[np.ndarray, float]:
    """Posterior mean of the coefficients and of the noise variance."""
    if post.a_n <= 1.0:
        raise ValueError("sigma^2 posterior mean undefined for a_n <= 1")
    return post.mu_n, post.b_n / (post.a_n - 1.0)


def predict(t_matrix: np.ndarray, beta: np.ndarray) -> np.ndarray:
    t_matrix = np.asarray(t_matrix, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if t_matrix.shape[1] != beta.shape[0]:
        raise ValueError("coefficient length does not match design columns")
    return t_matrix @ beta
