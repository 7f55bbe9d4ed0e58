"""EM estimation of the Dirichlet process mixture MNL under a truncated
stick-breaking prior.

One iteration:

1. E-step. ``omega[n, k]`` is proportional to ``P(q=k | alpha) * P(y_n | beta_k)``.
   The first iteration uses equal component weights instead of the
   stick-breaking prior.
2. M-step for alpha: 1-D maximisation in ``log(alpha)`` of the
   generalised-Dirichlet-multinomial factor plus the Gamma log-prior.
3. M-step for each beta_k: weighted MAP MNL with the base measure as prior.

Convergence is declared when the expected complete-data log posterior
(``surrogate_Q``) changes by less than ``rel_tol * |Q|`` between iterations.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import digamma, gammaln, logsumexp

from ._parallel import ordered_map
from .choice_data import Dataset
from .mnl import (DEFAULT_PRIOR_SCALE, ParamVector, Prior, UtilitySpec, Transform,
                  base_measure as default_base_measure, component_loglik_matrix,
                  fit_mnl, fit_weighted_mnl, log_prior, neutral_start, prior_mode)
from .stick_breaking import (ConcentrationPrior, GDParams, component_prior_probs,
                             gdm_log_marginal, log_component_prior_probs)

logger = logging.getLogger(__name__)


class DegenerateLikelihood(FloatingPointError):
    """Every component assigns zero likelihood to some individual."""


@dataclass(frozen=True)
class DPMConfig:
    K: int = 150
    alpha_prior: ConcentrationPrior = ConcentrationPrior()
    prior_scale: float = DEFAULT_PRIOR_SCALE
    base_measure: tuple[Prior, ...] | None = None
    rel_tol: float = 1e-4
    max_iter: int = 1000
    seed: int = 0
    empty_component_weight_threshold: float = 1e-8
    occupancy_threshold: float | None = None
    inner_tol: float = 1e-6
    inner_max_iter: int = 500
    threads: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")

    def priors_for(self, spec: UtilitySpec) -> tuple[Prior, ...]:
        if self.base_measure is not None:
            return tuple(self.base_measure)
        return default_base_measure(spec.attributes, self.prior_scale)


# -- starting values ----------------------------------------------------------------

def init_train(spec: UtilitySpec, data: Dataset, K: int, seed: int,
               fallback: ParamVector | None = None, tol: float = 1e-6,
               max_iter: int = 500, threads: int = 1
               ) -> tuple[list[ParamVector], list[str]]:
    """Random partition of individuals into K groups, one ML MNL per group.

    Groups that cannot be fitted (no members, optimiser failure, no finite
    optimum) start at `fallback` instead, and a warning is recorded.
    """
    fallback = neutral_start(spec.transforms) if fallback is None else fallback
    perm = np.random.default_rng(seed).permutation(data.n_individuals)
    groups = [np.sort(perm[k::K]) for k in range(K)]

    def fit_group(k):
        members = groups[k]
        if len(members) == 0:
            return fallback, f"component {k}: empty start group, prior-mode start"
        try:
            res = fit_mnl(spec, data.subset(members), tol=tol, max_iter=max_iter)
        except (FloatingPointError, ValueError) as exc:
            return fallback, f"component {k}: start fit failed ({exc})"
        if not res.converged or not res.params.is_feasible():
            return fallback, f"component {k}: start fit did not converge"
        return res.params, None

    out = ordered_map(fit_group, range(K), threads)
    return [b for b, _ in out], [w for _, w in out if w]


# -- E-step ----------------------------------------------------------------------------

def responsibilities(log_weights: np.ndarray, ll: np.ndarray) -> np.ndarray:
    """Row-normalised ``exp(log_weights + ll)`` computed in the log domain."""
    a = ll + np.asarray(log_weights)[None, :]
    top = a.max(axis=1)
    if not np.all(np.isfinite(top)):
        n = int(np.flatnonzero(~np.isfinite(top))[0])
        raise DegenerateLikelihood(f"degenerate individual likelihood (individual {n})")
    w = np.exp(a - top[:, None])
    return w / w.sum(axis=1, keepdims=True)


def e_step(alpha: float, betas: Sequence[ParamVector], data: Dataset, spec: UtilitySpec,
           ll: np.ndarray | None = None) -> np.ndarray:
    ll = component_loglik_matrix(spec, betas, data) if ll is None else ll
    return responsibilities(log_component_prior_probs(alpha, len(betas)), ll)


# -- M-step: concentration -------------------------------------------------------------

def _tail_sums(omega: np.ndarray) -> np.ndarray:
    """w_k = sum_{k' >= k} sum_n omega[n, k']."""
    counts = omega.sum(axis=0)
    return np.cumsum(counts[::-1])[::-1]


def alpha_objective(alpha: float, w: np.ndarray, prior: ConcentrationPrior) -> float:
    K = len(w)
    data_terms = np.sum(gammaln(alpha + w[1:]) - gammaln(1.0 + alpha + w[:-1]))
    return float((K - 1) * math.log(alpha) + data_terms + prior.logpdf(alpha))


def _alpha_score_u(u: float, w: np.ndarray, prior: ConcentrationPrior) -> float:
    """d/d(log alpha) of :func:`alpha_objective`."""
    a = math.exp(u)
    K = len(w)
    d = (K - 1) / a + np.sum(digamma(a + w[1:]) - digamma(1.0 + a + w[:-1])) + prior.dlogpdf(a)
    return float(a * d)


@dataclass(frozen=True)
class AlphaStep:
    alpha: float
    objective: float
    score: float
    converged: bool


def m_step_alpha(omega: np.ndarray, prior: ConcentrationPrior, alpha_init: float,
                 u_range: tuple[float, float] = (math.log(1e-6), math.log(1e5)),
                 n_grid: int = 241) -> AlphaStep:
    """Maximise the concentration objective over ``u = log(alpha)``.

    A coarse grid locates the best basin; Brent's method then solves for the
    stationary point inside the bracketing grid cells. The result is never
    worse than `alpha_init`.
    """
    w = _tail_sums(np.asarray(omega))
    grid = np.linspace(*u_range, n_grid)
    vals = np.array([alpha_objective(math.exp(u), w, prior) for u in grid])
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    g_lo, g_hi = _alpha_score_u(lo, w, prior), _alpha_score_u(hi, w, prior)
    if g_lo > 0 > g_hi:
        u = brentq(_alpha_score_u, lo, hi, args=(w, prior), xtol=1e-14, rtol=1e-15,
                   maxiter=200)
        # Brent stops on the bracket width; a few Newton steps tighten the score
        for _ in range(5):
            g = _alpha_score_u(u, w, prior)
            if abs(g) <= 1e-10:
                break
            h = 1e-6
            dg = (_alpha_score_u(u + h, w, prior) - _alpha_score_u(u - h, w, prior)) / (2 * h)
            if dg >= 0:
                break
            u_new = u - g / dg
            if not lo <= u_new <= hi:
                break
            u = u_new
    else:
        u = grid[i]
    alpha = math.exp(u)
    obj = alpha_objective(alpha, w, prior)
    score = _alpha_score_u(u, w, prior)
    init_obj = alpha_objective(alpha_init, w, prior)
    if init_obj > obj:
        return AlphaStep(alpha_init, init_obj, _alpha_score_u(math.log(alpha_init), w, prior),
                         False)
    return AlphaStep(alpha, obj, score, abs(score) <= 1e-8)


# -- M-step: component tastes ----------------------------------------------------------

@dataclass(frozen=True)
class BetaStep:
    betas: list[ParamVector]
    flags: list[str]


def m_step_betas(omega: np.ndarray, data: Dataset, spec: UtilitySpec,
                 base_measure: Sequence[Prior] | None, betas_init: Sequence[ParamVector],
                 empty_threshold: float = 1e-8, tol: float = 1e-6, max_iter: int = 500,
                 threads: int = 1) -> BetaStep:
    """Weighted MAP MNL per component.

    Components whose total weight is below `empty_threshold` are reset to the
    prior mode (or left unchanged when there is no prior).
    """
    omega = np.asarray(omega)
    has_prior = base_measure is not None and any(p.kind != "none" for p in base_measure)
    mode = prior_mode(spec.transforms, base_measure) if has_prior else None
    totals = omega.sum(axis=0)

    def update(k):
        if totals[k] < empty_threshold:
            return (mode if mode is not None else betas_init[k]), None
        try:
            res = fit_weighted_mnl(spec, data, omega[:, k], base_measure, betas_init[k],
                                   tol, max_iter)
        except (FloatingPointError, ValueError) as exc:
            return betas_init[k], f"component {k}: fit failed ({exc})"
        flag = None if res.converged else (
            f"component {k}: inner optimiser stopped at |grad|={res.grad_norm:.2e}")
        return res.params, flag

    out = ordered_map(update, range(omega.shape[1]), threads)
    return BetaStep([b for b, _ in out], [f for _, f in out if f])


# -- objectives --------------------------------------------------------------------

def assignment_log_prior(alpha: float, omega: np.ndarray) -> float:
    """Generalised-Dirichlet-multinomial factor with soft counts."""
    K = omega.shape[1]
    return gdm_log_marginal(omega.sum(axis=0), GDParams.gem(alpha, K))


def surrogate_Q(alpha: float, betas: Sequence[ParamVector], omega: np.ndarray, data: Dataset,
                spec: UtilitySpec, alpha_prior: ConcentrationPrior,
                base_measure: Sequence[Prior] | None, ll: np.ndarray | None = None) -> float:
    """Expected complete-data log posterior with [q_n = k] replaced by omega."""
    ll = component_loglik_matrix(spec, betas, data) if ll is None else ll
    kernel = float(np.sum(omega * ll))
    priors = sum(log_prior(b, base_measure) for b in betas)
    return assignment_log_prior(alpha, omega) + kernel + alpha_prior.logpdf(alpha) + priors


def incomplete_objective(alpha: float, betas: Sequence[ParamVector], data: Dataset,
                         spec: UtilitySpec, alpha_prior: ConcentrationPrior,
                         base_measure: Sequence[Prior] | None,
                         ll: np.ndarray | None = None) -> float:
    """sum_n log sum_k P(q=k|alpha) P(y_n|beta_k) + log f(alpha) + sum_k log g(beta_k)."""
    ll = component_loglik_matrix(spec, betas, data) if ll is None else ll
    mix = logsumexp(ll + log_component_prior_probs(alpha, len(betas))[None, :], axis=1)
    priors = sum(log_prior(b, base_measure) for b in betas)
    return float(np.sum(mix)) + alpha_prior.logpdf(alpha) + priors


# -- fitted model ---------------------------------------------------------------------

@dataclass
class DPMModel:
    spec: UtilitySpec
    alpha_hat: float
    betas: list[ParamVector]
    omega: np.ndarray
    trace: list[dict]
    converged: bool
    n_iter: int
    flags: list[str] = field(default_factory=list)
    config: DPMConfig = field(default_factory=DPMConfig)

    kind = "dpm"

    @property
    def K(self) -> int:
        return len(self.betas)

    @property
    def empirical_shares(self) -> np.ndarray:
        return self.omega.mean(axis=0)

    @property
    def prior_shares(self) -> np.ndarray:
        return component_prior_probs(self.alpha_hat, self.K)

    @property
    def masses(self) -> np.ndarray:
        return self.empirical_shares

    @property
    def occupied(self) -> int:
        return occupied_components(self)

    def to_dict(self) -> dict:
        names = self.spec.names
        return {
            "model": "dpm",
            "spec": self.spec.to_dict(),
            "alpha_hat": self.alpha_hat,
            "K": self.K,
            "components": [b.to_dict(names) for b in self.betas],
            "empirical_shares": self.empirical_shares.tolist(),
            "prior_shares": self.prior_shares.tolist(),
            "occupied": self.occupied,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "flags": list(self.flags),
            "trace": self.trace,
        }


def occupied_components(model: DPMModel, threshold: float | None = None) -> int:
    """Components whose empirical share is at least `threshold` (default 0.5 / N)."""
    N = model.omega.shape[0]
    if threshold is None:
        threshold = model.config.occupancy_threshold
    if threshold is None:
        threshold = 0.5 / N
    return int(np.sum(model.empirical_shares >= threshold))


def fit(data: Dataset, spec: UtilitySpec, config: DPMConfig = DPMConfig(),
        init_betas: Sequence[ParamVector] | None = None) -> DPMModel:
    """Estimate a DPM-MNL model by EM; see the module docstring for the loop."""
    K = config.K
    base = config.priors_for(spec)
    flags: list[str] = []
    if init_betas is None:
        fallback = prior_mode(spec.transforms, base)
        betas, warnings = init_train(spec, data, K, config.seed, fallback,
                                     config.inner_tol, config.inner_max_iter, config.threads)
        flags.extend(f"init: {w}" for w in warnings)
    else:
        betas = list(init_betas)
    alpha = config.alpha_prior.mode if config.alpha_prior.mode > 0 else 1.0

    trace: list[dict] = []
    converged = False
    q_prev = None
    it = 0
    ll = component_loglik_matrix(spec, betas, data)
    for it in range(1, config.max_iter + 1):
        log_w = (np.full(K, -math.log(K)) if it == 1
                 else log_component_prior_probs(alpha, K))
        omega = responsibilities(log_w, ll)
        q_before = surrogate_Q(alpha, betas, omega, data, spec, config.alpha_prior, base, ll)

        a_step = m_step_alpha(omega, config.alpha_prior, alpha)
        b_step = m_step_betas(omega, data, spec, base, betas,
                              config.empty_component_weight_threshold, config.inner_tol,
                              config.inner_max_iter, config.threads)
        alpha, betas = a_step.alpha, b_step.betas
        if not a_step.converged:
            flags.append(f"iter {it}: alpha step score {a_step.score:.2e}")
        flags.extend(f"iter {it}: {f}" for f in b_step.flags)

        ll = component_loglik_matrix(spec, betas, data)
        q_after = surrogate_Q(alpha, betas, omega, data, spec, config.alpha_prior, base, ll)
        obj = incomplete_objective(alpha, betas, data, spec, config.alpha_prior, base, ll)
        shares = omega.mean(axis=0)
        trace.append({
            "iter": it, "alpha": alpha, "Q_before": q_before, "Q": q_after,
            "incomplete_objective": obj,
            "occupied": int(np.sum(shares >= 0.5 / data.n_individuals)),
        })
        logger.debug("iter %d alpha=%.4f Q=%.6f obj=%.6f", it, alpha, q_after, obj)
        if q_prev is not None and abs(q_after - q_prev) < config.rel_tol * abs(q_after):
            converged = True
            break
        q_prev = q_after

    omega = e_step(alpha, betas, data, spec, ll)
    if not converged:
        flags.append(f"EM stopped at max_iter={config.max_iter} without converging")
    return DPMModel(spec, alpha, list(betas), omega, trace, converged, it, flags, config)


def model_from_dict(d: dict) -> DPMModel:
    """Rebuild a fitted model from :meth:`DPMModel.to_dict` output.

    Responsibilities are not serialised; the returned model carries a single
    pseudo-row holding the empirical shares so that mixture summaries work.
    """
    spec = UtilitySpec.from_dict(d["spec"])
    names = spec.names
    betas = [ParamVector([c["values"][n] for n in names],
                         [Transform.from_label(c["transforms"][n]) for n in names])
             for c in d["components"]]
    omega = np.asarray(d["empirical_shares"], dtype=float)[None, :]
    return DPMModel(spec, d["alpha_hat"], betas, omega, d.get("trace", []),
                    d.get("converged", True), d.get("n_iter", 0), d.get("flags", []),
                    replace(DPMConfig(), K=len(betas)))
