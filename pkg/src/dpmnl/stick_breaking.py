"""Truncated stick-breaking and Dirichlet-process arithmetic.

Weights: ``pi_k = eta_k * prod_{l<k} (1 - eta_l)`` for k < K and the
remaining stick for k = K. Under ``eta_k ~ Beta(1, alpha)`` the expected
weights are ``alpha^(k-1) / (1 + alpha)^k`` with residual
``(alpha / (1 + alpha))^(K-1)`` at index K.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import gammaln

# Gamma(shape, scale); switch to "rate" to read the second parameter as a rate.
GAMMA_PARAMETERISATION = "scale"


@dataclass(frozen=True)
class StickWeights:
    eta: np.ndarray
    pi: np.ndarray

    @property
    def K(self) -> int:
        return len(self.pi)


@dataclass(frozen=True)
class ConcentrationPrior:
    """Gamma prior on the concentration parameter, default Gamma(2, 2)."""

    shape: float = 2.0
    scale: float = 2.0

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("gamma shape and scale must be positive")

    @property
    def _theta(self) -> float:
        return self.scale if GAMMA_PARAMETERISATION == "scale" else 1.0 / self.scale

    def logpdf(self, alpha: float) -> float:
        th = self._theta
        return ((self.shape - 1.0) * math.log(alpha) - alpha / th
                - gammaln(self.shape) - self.shape * math.log(th))

    def dlogpdf(self, alpha: float) -> float:
        return (self.shape - 1.0) / alpha - 1.0 / self._theta

    @property
    def mode(self) -> float:
        return max(self.shape - 1.0, 0.0) * self._theta

    def to_dict(self) -> dict:
        return {"shape": self.shape, "scale": self.scale,
                "parameterisation": GAMMA_PARAMETERISATION}


@dataclass(frozen=True)
class GDParams:
    """Generalised Dirichlet parameters, one (a_k, b_k) per stick k < K."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.shape != b.shape or a.ndim != 1:
            raise ValueError("a and b must be 1-d of equal length")
        if np.any(a <= 0) or np.any(b <= 0):
            raise ValueError("generalised Dirichlet parameters must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def gem(cls, alpha: float, K: int) -> "GDParams":
        return cls(np.ones(K - 1), np.full(K - 1, float(alpha)))


def _stick(eta: np.ndarray) -> np.ndarray:
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - eta)])
    return np.concatenate([eta * remaining[:-1], remaining[-1:]])


def gem_weights(eta, K: int) -> StickWeights:
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (K - 1,):
        raise ValueError(f"eta must have length K-1={K - 1}")
    if np.any(eta <= 0) or np.any(eta >= 1):
        raise ValueError("stick proportions must lie in (0, 1)")
    return StickWeights(eta, _stick(eta))


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise ValueError("concentration parameter must be positive")


def log_component_prior_probs(alpha: float, K: int) -> np.ndarray:
    """log P(q = k | alpha) for k = 1..K, residual mass at K."""
    _check_alpha(alpha)
    k = np.arange(1, K + 1, dtype=float)
    la, l1a = math.log(alpha), math.log1p(alpha)
    out = (k - 1.0) * la - k * l1a
    out[-1] = (K - 1.0) * (la - l1a)
    return out


def component_prior_probs(alpha: float, K: int) -> np.ndarray:
    """Expected stick-breaking weights ``alpha^(k-1) / (1 + alpha)^k``, residual at K."""
    _check_alpha(alpha)
    if K < 1:
        raise ValueError("K must be positive")
    r = alpha / (1.0 + alpha)
    p = np.empty(K)
    p[:-1] = r ** np.arange(K - 1) / (1.0 + alpha)
    p[-1] = r ** (K - 1)
    return p


def log_eta_density(eta, alpha: float) -> float:
    """Joint density of K-1 independent Beta(1, alpha) stick proportions."""
    _check_alpha(alpha)
    eta = np.asarray(eta, dtype=float)
    if np.any(eta < 0) or np.any(eta > 1):
        raise ValueError("stick proportions must lie in [0, 1]")
    out = len(eta) * math.log(alpha)
    if alpha == 1.0:
        return float(out)
    if np.any(eta == 1.0):
        if alpha > 1:
            return -math.inf
        raise ValueError("density unbounded at eta = 1 for alpha < 1")
    return float(out + (alpha - 1.0) * np.sum(np.log1p(-eta)))


def gdm_log_marginal(counts, params: GDParams) -> float:
    """Log mass of a count vector under the generalised-Dirichlet-multinomial."""
    x = np.asarray(counts)
    if x.ndim != 1 or len(x) != len(params.a) + 1:
        raise ValueError("counts must have length K")
    if np.any(x < 0):
        raise ValueError("counts must be nonnegative")
    x = x.astype(float)
    N = x.sum()
    m = np.cumsum(x[::-1])[::-1]  # m_k = sum_{k' >= k} x_k'
    a, b = params.a, params.b
    terms = (gammaln(a + x[:-1]) + gammaln(b + m[1:]) + gammaln(a + b)
             - gammaln(a) - gammaln(b) - gammaln(a + b + m[:-1]))
    return float(gammaln(N + 1.0) - gammaln(x + 1.0).sum() + terms.sum())


def sample_stick_dp(alpha: float, base_sampler: Callable[[int, np.random.Generator], np.ndarray],
                    K: int, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from one truncated stick-breaking realisation G ~ DP(alpha, G0).

    `base_sampler(size, rng)` returns `size` atoms from G0.
    """
    _check_alpha(alpha)
    atoms = np.asarray(base_sampler(K, rng))
    eta = rng.beta(1.0, alpha, size=K - 1)
    pi = _stick(np.clip(eta, 0.0, 1.0))
    idx = rng.choice(K, size=n_draws, p=pi / pi.sum())
    return atoms[idx]


def sample_crp_partition(alpha: float, N: int, rng: np.random.Generator) -> np.ndarray:
    """Chinese restaurant process seating; returns cluster labels 0..C-1."""
    _check_alpha(alpha)
    if N < 1:
        raise ValueError("N must be positive")
    labels = np.empty(N, dtype=np.int64)
    sizes = np.zeros(N, dtype=float)
    n_tables = 0
    u = rng.random(N)
    for n in range(N):
        # customer n (0-based) finds n seated customers
        threshold = u[n] * (alpha + n)
        k = int(np.searchsorted(np.cumsum(sizes[:n_tables]), threshold, side="right"))
        if k == n_tables:
            n_tables += 1
        sizes[k] += 1
        labels[n] = k
    return labels


def expected_occupied_components(alpha: float, N: int) -> float:
    """Expected number of distinct clusters among N CRP customers."""
    _check_alpha(alpha)
    n = np.arange(N, dtype=float)
    return float(np.sum(alpha / (alpha + n)))
