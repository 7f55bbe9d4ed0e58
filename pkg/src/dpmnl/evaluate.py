"""Out-of-sample validation and summaries of estimated taste distributions."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from ._parallel import ordered_map
from .choice_data import Dataset, split_folds
from .mnl import ParamVector, UtilitySpec, component_loglik_matrix, fit_mnl

logger = logging.getLogger(__name__)

DEFAULT_BANDWIDTH = 2.5
DEFAULT_PERCENTILES = (10, 25, 50, 75, 90)


@dataclass
class MNLModel:
    """A plain MNL seen as a one-point mixture."""

    spec: UtilitySpec
    beta: ParamVector
    loglik: float
    converged: bool
    n_iter: int = 0
    flags: list[str] = field(default_factory=list)

    kind = "mnl"

    @property
    def betas(self) -> list[ParamVector]:
        return [self.beta]

    @property
    def masses(self) -> np.ndarray:
        return np.ones(1)

    @property
    def K(self) -> int:
        return 1

    def to_dict(self) -> dict:
        return {"model": "mnl", "spec": self.spec.to_dict(),
                "coefficients": self.beta.to_dict(self.spec.names),
                "loglik": self.loglik, "converged": self.converged,
                "n_iter": self.n_iter, "flags": list(self.flags)}


def fit_mnl_model(data: Dataset, spec: UtilitySpec, tol: float = 1e-6,
                  max_iter: int = 500) -> MNLModel:
    res = fit_mnl(spec, data, tol=tol, max_iter=max_iter)
    flags = [] if res.converged else [f"optimiser stopped at |grad|={res.grad_norm:.2e}"]
    return MNLModel(spec, res.params, res.objective, res.converged, res.n_iter, flags)


@dataclass(frozen=True)
class DiscreteMixture:
    """Probability-weighted point masses; `points` has shape (K,) or (K, d)."""

    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        m = np.asarray(self.masses, dtype=float)
        if len(pts) == 0:
            raise ValueError("empty mixture")
        if len(m) != len(pts):
            raise ValueError("one mass per point required")
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
            raise ValueError("masses must form a probability vector")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "masses", m)

    def marginal(self, j: int) -> "DiscreteMixture":
        return DiscreteMixture(self.points[:, j], self.masses)

    def mean(self) -> np.ndarray | float:
        return np.sum(self.masses.reshape(-1, *[1] * (self.points.ndim - 1)) * self.points,
                      axis=0)


def mixture_of(model) -> DiscreteMixture:
    """Natural-scale taste vectors of a fitted model with its mixing masses."""
    return DiscreteMixture(np.array([b.values for b in model.betas]), model.masses)


# -- predictive fit -------------------------------------------------------------------

def predictive_loglik(model, holdout: Dataset) -> float:
    """sum_n log sum_k m_k P(y_n | beta_k) over the holdout individuals."""
    if [a.name for a in holdout.attributes] != model.spec.names:
        raise ValueError("holdout attributes do not match the model attributes")
    ll = component_loglik_matrix(model.spec, model.betas, holdout)
    with np.errstate(divide="ignore"):
        log_m = np.log(np.asarray(model.masses, dtype=float))
    return float(np.sum(logsumexp(ll + log_m[None, :], axis=1)))


@dataclass(frozen=True)
class ModelRecipe:
    """Estimator name plus its configuration; `fit` trains on a dataset."""

    kind: str
    spec: UtilitySpec
    K: int | None = None
    config: object = None

    def __post_init__(self):
        if self.kind not in ("mnl", "lc", "dpm"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "lc" and not self.K:
            raise ValueError("the lc recipe needs K")

    def fit(self, data: Dataset):
        if self.kind == "mnl":
            return fit_mnl_model(data, self.spec)
        if self.kind == "lc":
            from .lc_em import LCConfig, fit_lc
            return fit_lc(data, self.spec, self.K, self.config or LCConfig())
        from .dpm_em import DPMConfig, fit
        return fit(data, self.spec, self.config or DPMConfig())


@dataclass
class CVReport:
    fold_loglik: np.ndarray
    fold_size: np.ndarray
    fold_ok: np.ndarray
    flags: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        vals = self.fold_loglik[self.fold_ok]
        return float(np.mean(vals)) if len(vals) else math.nan

    @property
    def se(self) -> float:
        vals = self.fold_loglik[self.fold_ok]
        return float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan

    @property
    def complete(self) -> bool:
        return bool(np.all(self.fold_ok))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"fold": np.arange(1, len(self.fold_loglik) + 1),
                             "n_holdout": self.fold_size,
                             "predictive_loglik": self.fold_loglik,
                             "ok": self.fold_ok})


def cross_validate(data: Dataset, recipe: ModelRecipe, n_folds: int, seed: int,
                   threads: int = 1) -> CVReport:
    """Per-fold total predictive log-likelihood of models trained on the complement."""
    folds = split_folds(data, n_folds, seed).folds(data)

    def run(f):
        hold = folds[f]
        train = np.setdiff1d(np.arange(data.n_individuals), hold)
        assert not np.intersect1d(train, hold).size
        try:
            model = recipe.fit(data.subset(train))
            value = predictive_loglik(model, data.subset(hold))
        except (FloatingPointError, ValueError) as exc:
            return math.nan, f"fold {f + 1}: training failed ({exc})"
        flag = None
        if not getattr(model, "converged", True):
            flag = f"fold {f + 1}: estimator did not converge"
        return value, flag

    out = ordered_map(run, range(n_folds), threads)
    vals = np.array([v for v, _ in out])
    ok = np.isfinite(vals)
    flags = [f for _, f in out if f]
    return CVReport(vals, np.array([len(f) for f in folds]), ok, flags)


# -- implicit values and summaries ------------------------------------------------

def implicit_values(model, spec: UtilitySpec | None = None) -> tuple[DiscreteMixture, list[str]]:
    """Mixture over implicit attribute values (non-cost attributes), with their names."""
    spec = spec or model.spec
    c = spec.cost_index
    keep = [i for i in range(spec.n_params) if i != c]
    B = np.array([b.values for b in model.betas])
    if spec.space == "wtp":
        pts = B[:, keep]
    else:
        if c is None:
            raise ValueError("implicit values need a cost attribute")
        if np.any(B[:, c] == 0):
            raise ValueError("zero cost coefficient")
        pts = B[:, keep] / B[:, [c]]
    return DiscreteMixture(pts, model.masses), [spec.names[i] for i in keep]


def weighted_quantile(mixture: DiscreteMixture, p: float) -> float:
    """Smallest support point whose cumulative mass reaches p."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    x, F = _ecdf_arrays(mixture)
    i = int(np.searchsorted(F, p - 1e-12, side="left"))
    return float(x[min(i, len(x) - 1)])


def _ecdf_arrays(mixture: DiscreteMixture) -> tuple[np.ndarray, np.ndarray]:
    if mixture.points.ndim != 1:
        raise ValueError("scalar mixture required")
    order = np.argsort(mixture.points, kind="stable")
    x, m = mixture.points[order], mixture.masses[order]
    ux, start = np.unique(x, return_index=True)
    F = np.cumsum(np.add.reduceat(m, start))
    F[-1] = 1.0
    return ux, F


def export_ecdf(mixture: DiscreteMixture) -> pd.DataFrame:
    x, F = _ecdf_arrays(mixture)
    return pd.DataFrame({"x": x, "F": F})


def summarize_wtp(model, percentiles: Sequence[int] = DEFAULT_PERCENTILES,
                  spec: UtilitySpec | None = None) -> pd.DataFrame:
    mix, names = implicit_values(model, spec)
    rows = []
    for j, name in enumerate(names):
        marg = mix.marginal(j)
        q = {p: weighted_quantile(marg, p / 100.0) for p in percentiles}
        row = {"attribute": name, "mean": float(marg.mean())}
        row.update({f"p{p}": v for p, v in q.items()})
        if 25 in q and 75 in q:
            row["IQR"] = q[75] - q[25]
        if 10 in q and 90 in q:
            row["IDR"] = q[90] - q[10]
        rows.append(row)
    return pd.DataFrame(rows)


def sample_mixture(mixture: DiscreteMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.choice(len(mixture.masses), size=n, p=mixture.masses)
    return mixture.points[idx]


def kde(draws: np.ndarray, grid, bandwidth: float = DEFAULT_BANDWIDTH) -> np.ndarray:
    """Normal-kernel density of 1-D or 2-D draws.

    For 1-D `draws` of shape (n,), `grid` is a vector and the result has its
    length. For 2-D draws of shape (n, 2), `grid` is a pair ``(gx, gy)`` and
    the result has shape ``(len(gx), len(gy))`` using a product kernel with a
    shared bandwidth.
    """
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    d = np.asarray(draws, dtype=float)
    if d.size == 0:
        raise ValueError("no draws")
    h = bandwidth
    if d.ndim == 1:
        g = np.asarray(grid, dtype=float)
        z = (g[:, None] - d[None, :]) / h
        return np.exp(-0.5 * z * z).sum(axis=1) / (len(d) * h * math.sqrt(2 * math.pi))
    gx, gy = (np.asarray(a, dtype=float) for a in grid)
    kx = np.exp(-0.5 * ((gx[:, None] - d[None, :, 0]) / h) ** 2)
    ky = np.exp(-0.5 * ((gy[:, None] - d[None, :, 1]) / h) ** 2)
    return np.einsum("in,jn->ij", kx, ky) / (len(d) * 2 * math.pi * h * h)


def local_maxima_2d(density: np.ndarray) -> list[tuple[int, int]]:
    """Grid cells strictly greater than all eight neighbours."""
    D = np.pad(density, 1, constant_values=-np.inf)
    core = D[1:-1, 1:-1]
    is_max = np.ones_like(core, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                is_max &= core > D[1 + di:D.shape[0] - 1 + di, 1 + dj:D.shape[1] - 1 + dj]
    return [tuple(ix) for ix in np.argwhere(is_max)]


def kde_frame(draws: np.ndarray, grid, bandwidth: float = DEFAULT_BANDWIDTH,
              names: Sequence[str] = ("x", "y")) -> pd.DataFrame:
    dens = kde(draws, grid, bandwidth)
    if dens.ndim == 1:
        return pd.DataFrame({names[0]: np.asarray(grid, dtype=float), "density": dens})
    gx, gy = (np.asarray(a, dtype=float) for a in grid)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    return pd.DataFrame({names[0]: X.ravel(), names[1]: Y.ravel(), "density": dens.ravel()})


def write_csv(df: pd.DataFrame, path: str | Path) -> None:
    df.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
