"""Latent-class MNL by EM, with an information-criterion sweep over K."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .choice_data import Dataset
from .dpm_em import init_train, m_step_betas, responsibilities
from .mnl import ParamVector, Transform, UtilitySpec, component_loglik_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LCConfig:
    rel_tol: float = 1e-4
    max_iter: int = 1000
    seed: int = 0
    n_starts: int = 1
    empty_component_weight_threshold: float = 1e-8
    inner_tol: float = 1e-6
    inner_max_iter: int = 500
    threads: int = 1

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")


@dataclass
class LCModel:
    spec: UtilitySpec
    pi: np.ndarray
    betas: list[ParamVector]
    omega: np.ndarray
    loglik: float
    trace: list[dict]
    converged: bool
    n_iter: int
    flags: list[str] = field(default_factory=list)

    kind = "lc"

    @property
    def K(self) -> int:
        return len(self.betas)

    @property
    def masses(self) -> np.ndarray:
        return self.pi

    def to_dict(self) -> dict:
        names = self.spec.names
        return {
            "model": "lc",
            "spec": self.spec.to_dict(),
            "K": self.K,
            "pi": self.pi.tolist(),
            "components": [b.to_dict(names) for b in self.betas],
            "loglik": self.loglik,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "flags": list(self.flags),
            "trace": self.trace,
        }


def mixture_loglik(pi: np.ndarray, ll: np.ndarray) -> float:
    """sum_n log sum_k pi_k exp(ll[n, k]); empty classes contribute nothing."""
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)
    return float(np.sum(logsumexp(ll + log_pi[None, :], axis=1)))


def _fit_once(data: Dataset, spec: UtilitySpec, K: int, config: LCConfig, seed: int,
              init_betas: Sequence[ParamVector] | None = None) -> LCModel:
    flags: list[str] = []
    if init_betas is None:
        betas, warnings = init_train(spec, data, K, seed, None, config.inner_tol,
                                     config.inner_max_iter, config.threads)
        flags.extend(f"init: {w}" for w in warnings)
    else:
        betas = list(init_betas)
    pi = np.full(K, 1.0 / K)
    ll = component_loglik_matrix(spec, betas, data)
    value = mixture_loglik(pi, ll)
    trace = [{"iter": 0, "loglik": value}]
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        with np.errstate(divide="ignore"):
            omega = responsibilities(np.log(pi), ll)
        pi = omega.mean(axis=0)
        # classes with pi_k below the threshold keep their previous beta (no prior)
        step = m_step_betas(omega, data, spec, None, betas,
                            config.empty_component_weight_threshold * data.n_individuals,
                            config.inner_tol, config.inner_max_iter, config.threads)
        betas = step.betas
        flags.extend(f"iter {it}: {f}" for f in step.flags)
        ll = component_loglik_matrix(spec, betas, data)
        new = mixture_loglik(pi, ll)
        trace.append({"iter": it, "loglik": new})
        if abs(new - value) < config.rel_tol * abs(new):
            value = new
            converged = True
            break
        value = new
    with np.errstate(divide="ignore"):
        omega = responsibilities(np.log(pi), ll)
    if not converged:
        flags.append(f"EM stopped at max_iter={config.max_iter} without converging")
    return LCModel(spec, pi, list(betas), omega, value, trace, converged, it, flags)


def fit_lc(data: Dataset, spec: UtilitySpec, K: int, config: LCConfig = LCConfig(),
           init_betas: Sequence[ParamVector] | None = None) -> LCModel:
    """EM for a K-class MNL; with ``n_starts > 1`` the best of several seeded starts."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if init_betas is not None or config.n_starts == 1:
        return _fit_once(data, spec, K, config, config.seed, init_betas)
    seeds = np.random.SeedSequence(config.seed).generate_state(config.n_starts)
    best = None
    for s in seeds:
        m = _fit_once(data, spec, K, config, int(s))
        if best is None or m.loglik > best.loglik:
            best = m
    return best


def n_parameters(K: int, P: int) -> int:
    return K * P + K - 1


def information_criteria_from(loglik: float, K: int, P: int, N: int
                              ) -> tuple[float, float, int]:
    """(AIC, BIC, n_params) with BIC counting individuals, not choices."""
    p = n_parameters(K, P)
    return 2.0 * p - 2.0 * loglik, p * math.log(N) - 2.0 * loglik, p


def information_criteria(model: LCModel, data: Dataset) -> tuple[float, float, int]:
    return information_criteria_from(model.loglik, model.K, model.spec.n_params,
                                     data.n_individuals)


SWEEP_COLUMNS = ["K", "n_params", "loglik", "aic", "bic", "aic_best", "bic_best",
                 "converged", "flag"]


def sweep(data: Dataset, spec: UtilitySpec, K_min: int, K_max: int,
          config: LCConfig = LCConfig()) -> tuple[pd.DataFrame, dict[int, LCModel]]:
    """Fit K = K_min..K_max with the same seed policy and tabulate AIC/BIC.

    Fits run sequentially; `config.threads` is used inside each fit.
    """
    if not 1 <= K_min <= K_max:
        raise ValueError("need 1 <= K_min <= K_max")
    rows, models = [], {}
    for K in range(K_min, K_max + 1):
        try:
            m = fit_lc(data, spec, K, config)
        except (FloatingPointError, ValueError) as exc:
            rows.append([K, n_parameters(K, spec.n_params), np.nan, np.nan, np.nan,
                         False, False, False, f"fit failed: {exc}"])
            continue
        models[K] = m
        aic, bic, p = information_criteria(m, data)
        rows.append([K, p, m.loglik, aic, bic, False, False, m.converged,
                     "" if m.converged else "not converged"])
    df = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    ok = df["aic"].notna()
    if ok.any():
        df.loc[df.loc[ok, "aic"].idxmin(), "aic_best"] = True
        df.loc[df.loc[ok, "bic"].idxmin(), "bic_best"] = True
    return df, models


def best_k(table: pd.DataFrame, criterion: str = "bic") -> int:
    return int(table.loc[table[f"{criterion}_best"], "K"].iloc[0])


def model_from_dict(d: dict) -> LCModel:
    spec = UtilitySpec.from_dict(d["spec"])
    names = spec.names
    betas = [ParamVector([c["values"][n] for n in names],
                         [Transform.from_label(c["transforms"][n]) for n in names])
             for c in d["components"]]
    pi = np.asarray(d["pi"], dtype=float)
    return LCModel(spec, pi, betas, pi[None, :], d["loglik"], d.get("trace", []),
                   d.get("converged", True), d.get("n_iter", 0), d.get("flags", []))
