"""Special functions, small dense linear algebra, and seedable random streams.

Everything downstream (KL terms, marginal likelihoods, relaxed sampling)
is built on these few primitives.  Matrices here are tiny (order K+1 <= 16),
so dense Cholesky is always the right tool.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import gammaln as _gammaln
from scipy.special import polygamma as _polygamma
from scipy.special import psi as _psi

__all__ = [
    "lgamma",
    "digamma",
    "trigamma",
    "log_mv_beta",
    "cholesky_lower",
    "cholesky_logdet_solve",
    "RandomSource",
]


def _require_positive(x, name: str):
    arr = np.asarray(x, dtype=float)
    if arr.size == 0:
        raise ValueError(f"{name} requires a non-empty positive argument")
    if not np.all(arr > 0.0):
        raise ValueError(f"{name} requires strictly positive input, got {x!r}")
    return arr


def lgamma(x):
    """log Gamma(x) for x > 0, elementwise on arrays."""
    arr = _require_positive(x, "lgamma")
    out = _gammaln(arr)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def digamma(x):
    """Psi(x) = d/dx log Gamma(x) for x > 0, elementwise on arrays."""
    arr = _require_positive(x, "digamma")
    out = _psi(arr)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def trigamma(x):
    """Psi'(x) for x > 0; backward rule of digamma on the tape."""
    arr = _require_positive(x, "trigamma")
    out = _polygamma(1, arr)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def log_mv_beta(eta) -> float:
    """log of the multivariate Beta function: sum lgamma(eta_k) - lgamma(sum eta)."""
    arr = _require_positive(eta, "log_mv_beta")
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError("log_mv_beta expects a vector of length >= 2")
    return float(np.sum(_gammaln(arr)) - _gammaln(np.sum(arr)))


def cholesky_lower(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix; raises LinAlgError if not SPD."""
    return np.linalg.cholesky(np.asarray(a, dtype=float))


def cholesky_logdet_solve(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve A X = B for SPD A and return (X, log det A).

    Non-SPD input raises numpy.linalg.LinAlgError; callers in the training
    loop treat that as a non-finite objective sample.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    chol = np.linalg.cholesky(a)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    z = scipy.linalg.solve_triangular(chol, b, lower=True)
    x = scipy.linalg.solve_triangular(chol.T, z, lower=False)
    return x, logdet


_U53 = float(2**53)


@dataclass
class RandomSource:
    """Counter-based random stream keyed by (seed, stream_id).

    Distinct stream ids give statistically independent Philox streams, so
    per-sample and per-step noise can be drawn reproducibly in any order.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        key = np.array(
            [np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF), np.uint64(self.stream_id & 0xFFFFFFFFFFFFFFFF)],
            dtype=np.uint64,
        )
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream_id: int) -> "RandomSource":
        """Fresh stream with the same seed; independent of this one."""
        return RandomSource(self.seed, stream_id)

    def uniform01(self, size=None):
        """Uniform draws on the open interval (0, 1)."""
        raw = self._gen.integers(0, 2**53, size=size)
        return (np.asarray(raw, dtype=float) + 0.5) / _U53 if size is not None else (float(raw) + 0.5) / _U53

    def gaussian(self, size=None):
        out = self._gen.standard_normal(size=size)
        return float(out) if size is None else out

    def gumbel(self, size=None):
        """Standard Gumbel via -log(-log u) with u drawn open-interval."""
        u = self.uniform01(size=size)
        return -np.log(-np.log(u))

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)
