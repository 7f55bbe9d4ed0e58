"""Multinomial logit kernel: utilities, choice probabilities, panel
likelihoods and the weighted MAP fit shared by both EM drivers.

Coefficients live on two scales. The natural scale is what enters utility;
the unconstrained scale is what the optimiser moves. Sign constraints are
smooth reparameterisations:

    identity            beta = u
    negative-exponential beta = -exp(u)
    bounded-negative(b)  beta = b - exp(u)

Priors are densities on the natural scale. When a prior is present on a
transformed coefficient, the log-Jacobian ``log|dbeta/du| = u`` is added so
the objective is a proper log-density in the optimiser's coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .choice_data import AttributeSpec, ChoiceTask, Dataset

DEFAULT_PRIOR_SCALE = 5.0
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 500

_LOG_2PI = math.log(2.0 * math.pi)


class InfeasibleParameter(ValueError):
    """A natural-scale value lies outside the range of its transform."""


# -- transforms ------------------------------------------------------------------

@dataclass(frozen=True)
class Transform:
    kind: str = "identity"
    bound: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "negexp", "bounded"):
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.kind == "bounded" and not self.bound < 0:
            raise ValueError("bounded-negative transform needs a negative bound")

    @property
    def constrained(self) -> bool:
        return self.kind != "identity"

    @property
    def label(self) -> str:
        if self.kind == "bounded":
            return f"bounded-negative({self.bound!r})"
        return {"identity": "identity", "negexp": "negative-exponential"}[self.kind]

    @classmethod
    def from_label(cls, label: str) -> "Transform":
        if label == "identity":
            return cls()
        if label == "negative-exponential":
            return cls("negexp")
        if label.startswith("bounded-negative(") and label.endswith(")"):
            return cls("bounded", float(label[len("bounded-negative("):-1]))
        raise ValueError(f"unknown transform label {label!r}")

    @property
    def offset(self) -> float:
        return self.bound if self.kind == "bounded" else 0.0


IDENTITY = Transform()
NEGEXP = Transform("negexp")


def transform_for(attr: AttributeSpec) -> Transform:
    if attr.constraint == "free":
        return IDENTITY
    if attr.constraint == "strictly-negative":
        return NEGEXP
    return Transform("bounded", float(attr.upper_bound))


# -- priors ----------------------------------------------------------------------

@dataclass(frozen=True)
class Prior:
    """Per-coefficient prior on the natural scale: normal(0, s), half-normal(s) or none."""

    kind: str = "none"
    scale: float = DEFAULT_PRIOR_SCALE

    def __post_init__(self):
        if self.kind not in ("none", "normal", "halfnormal"):
            raise ValueError(f"unknown prior {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("prior scale must be positive")

    def logpdf(self, beta: float) -> float:
        if self.kind == "none":
            return 0.0
        out = -0.5 * (_LOG_2PI + 2.0 * math.log(self.scale)) - 0.5 * (beta / self.scale) ** 2
        if self.kind == "halfnormal":
            out += math.log(2.0)
        return out

    def dlogpdf(self, beta: float) -> float:
        if self.kind == "none":
            return 0.0
        return -beta / self.scale ** 2

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": self.scale}


NO_PRIOR = Prior()

PriorSpec = Sequence[Prior]


def base_measure(attributes: Sequence[AttributeSpec],
                 scale: float = DEFAULT_PRIOR_SCALE) -> tuple[Prior, ...]:
    """normal(0, scale) on free coefficients, half-normal(scale) on sign-constrained ones."""
    return tuple(Prior("normal" if a.constraint == "free" else "halfnormal", scale)
                 for a in attributes)


def no_prior(n: int) -> tuple[Prior, ...]:
    return (NO_PRIOR,) * n


def _has_prior(prior: PriorSpec | None) -> bool:
    return prior is not None and any(p.kind != "none" for p in prior)


# -- parameter vectors -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    transforms: tuple[Transform, ...]

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if vals.shape != (len(self.transforms),):
            raise ValueError("one transform per coefficient required")

    def __len__(self):
        return len(self.transforms)

    def __eq__(self, other):
        return (isinstance(other, ParamVector) and self.transforms == other.transforms
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"ParamVector({self.values.tolist()!r})"

    def is_feasible(self) -> bool:
        for v, t in zip(self.values, self.transforms):
            if not np.isfinite(v) or (t.constrained and not v < t.offset):
                return False
        return True

    def to_unconstrained(self) -> np.ndarray:
        return to_unconstrained(self)

    def with_unconstrained(self, u: np.ndarray) -> "ParamVector":
        return from_unconstrained(u, self.transforms)

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        names = names or [f"b{i}" for i in range(len(self))]
        return {"values": dict(zip(names, self.values.tolist())),
                "transforms": dict(zip(names, [t.label for t in self.transforms]))}


def to_unconstrained(beta: ParamVector) -> np.ndarray:
    u = np.empty(len(beta))
    for i, (v, t) in enumerate(zip(beta.values, beta.transforms)):
        if t.kind == "identity":
            u[i] = v
        else:
            gap = t.offset - v
            if not gap > 0:
                raise InfeasibleParameter(
                    f"coefficient {i} = {v!r} is infeasible under {t.label}")
            u[i] = math.log(gap)
    return u


def from_unconstrained(u: Sequence[float], transforms: Sequence[Transform]) -> ParamVector:
    u = np.asarray(u, dtype=float)
    vals = np.array([x if t.kind == "identity" else t.offset - math.exp(x)
                     for x, t in zip(u, transforms)])
    return ParamVector(vals, tuple(transforms))


def neutral_start(transforms: Sequence[Transform]) -> ParamVector:
    """Zero for free coefficients, one unit below the bound for constrained ones."""
    return from_unconstrained(np.zeros(len(transforms)), transforms)


def prior_mode(transforms: Sequence[Transform], prior: PriorSpec) -> ParamVector:
    """Mode of the prior in unconstrained coordinates (log-Jacobian included).

    For a centred normal or half-normal of scale s on ``beta = c - exp(u)``
    the stationarity condition is ``exp(u) (exp(u) - c) = s**2``.
    """
    vals = []
    for t, p in zip(transforms, prior):
        if p.kind == "none":
            raise ValueError("an improper prior has no mode")
        if t.kind == "identity":
            vals.append(0.0)
        else:
            c = t.offset
            e = 0.5 * (c + math.sqrt(c * c + 4.0 * p.scale ** 2))
            vals.append(c - e)
    return ParamVector(np.array(vals), tuple(transforms))


# -- utility definition ----------------------------------------------------------------

@dataclass(frozen=True)
class UtilitySpec:
    """Preference space: V = sum_a x_a b_a.
    WTP space: V = (sum_{a != cost} x_a b_a + x_cost) * b_cost."""

    space: str
    attributes: tuple[AttributeSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if self.space not in ("preference", "wtp"):
            raise ValueError(f"unknown utility space {self.space!r}")
        n_cost = sum(a.role == "cost" for a in self.attributes)
        if self.space == "wtp" and n_cost != 1:
            raise ValueError("wtp space needs exactly one cost attribute")

    @property
    def n_params(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def cost_index(self) -> int | None:
        idx = [i for i, a in enumerate(self.attributes) if a.role == "cost"]
        return idx[0] if len(idx) == 1 else None

    @property
    def transforms(self) -> tuple[Transform, ...]:
        return tuple(transform_for(a) for a in self.attributes)

    def to_dict(self) -> dict:
        return {"space": self.space, "attributes": [a.to_dict() for a in self.attributes]}

    @classmethod
    def from_dict(cls, d: dict) -> "UtilitySpec":
        return cls(d["space"], tuple(AttributeSpec.from_dict(a) for a in d["attributes"]))


def _values(beta) -> np.ndarray:
    return beta.values if isinstance(beta, ParamVector) else np.asarray(beta, dtype=float)


def _linear(X: np.ndarray, b: np.ndarray, skip: int | None = None) -> np.ndarray:
    """sum_a X[..., a] * b[a] with a fixed summation order."""
    out = np.zeros(X.shape[:-1])
    for a in range(len(b)):
        if a != skip:
            out += X[..., a] * b[a]
    return out


def utilities(spec: UtilitySpec, beta, X: np.ndarray) -> np.ndarray:
    """Deterministic utilities, shape X.shape[:-1]."""
    b = _values(beta)
    if spec.space == "preference":
        return _linear(X, b)
    c = spec.cost_index
    return (_linear(X, b, c) + X[..., c]) * b[c]


def _utility_jacobian(spec: UtilitySpec, b: np.ndarray, X: np.ndarray) -> np.ndarray:
    """dV/dbeta on the natural scale, shape X.shape."""
    if spec.space == "preference":
        return X
    c = spec.cost_index
    Z = X * b[c]
    Z[..., c] = _linear(X, b, c) + X[..., c]
    return Z


def probabilities_from_utilities(V: np.ndarray, available: np.ndarray | None = None
                                 ) -> np.ndarray:
    """Logit probabilities along the last axis with max-subtraction; unavailable -> 0."""
    V = np.asarray(V, dtype=float)
    if available is None:
        available = np.ones(V.shape, dtype=bool)
    if not np.all(np.isfinite(V[available])):
        raise FloatingPointError("non-finite utility")
    Vm = np.where(available, V, -np.inf)
    top = Vm.max(axis=-1, keepdims=True)
    e = np.where(available, np.exp(Vm - top), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def choice_probabilities(spec: UtilitySpec, beta, task: ChoiceTask) -> np.ndarray:
    """Probabilities over the task's available alternatives (in task order)."""
    avail = [a for a in task.alternatives if a.available]
    if not avail:
        raise ValueError("no available alternative")
    X = np.array([a.attributes for a in avail], dtype=float)
    if X.shape[1] != spec.n_params or len(_values(beta)) != spec.n_params:
        raise ValueError("dimension mismatch between beta and attributes")
    return probabilities_from_utilities(utilities(spec, beta, X))


def _task_terms(spec: UtilitySpec, b: np.ndarray, data: Dataset, with_grad: bool):
    V = utilities(spec, b, data.X)
    # padded slots are masked to -inf; an infinite or nan utility elsewhere is an error
    Vm = np.where(data.available, V, -np.inf)
    top = Vm.max(axis=1)
    E = np.exp(Vm - top[:, None])
    lse = top + np.log(E.sum(axis=1))
    if not np.all(np.isfinite(lse)) or np.isnan(Vm).any():
        raise FloatingPointError("non-finite utility")
    rows = np.arange(data.n_tasks)
    ll = V[rows, data.chosen] - lse
    if not with_grad:
        return ll, None
    P = E / E.sum(axis=1, keepdims=True)
    Z = _utility_jacobian(spec, b, data.X)
    g = Z[rows, data.chosen] - np.einsum("rj,rjp->rp", P, Z)
    return ll, g


def task_log_probabilities(spec: UtilitySpec, beta, data: Dataset) -> np.ndarray:
    """log P(chosen) for every task."""
    return _task_terms(spec, _values(beta), data, False)[0]


def panel_log_likelihoods(spec: UtilitySpec, beta, data: Dataset) -> np.ndarray:
    """Per-individual sum over tasks of log P(chosen), shape (N,)."""
    ll = task_log_probabilities(spec, beta, data)
    return np.bincount(data.task_individual, weights=ll, minlength=data.n_individuals)


def panel_log_likelihood(spec: UtilitySpec, beta, data: Dataset, individual: int) -> float:
    return float(task_log_probabilities(spec, beta, data)[data.task_slice(individual)].sum())


def loglik(spec: UtilitySpec, beta, data: Dataset) -> float:
    return float(panel_log_likelihoods(spec, beta, data).sum())


def component_loglik_matrix(spec: UtilitySpec, betas: Sequence, data: Dataset) -> np.ndarray:
    """(N, K) matrix of panel log-likelihoods under each component."""
    return np.column_stack([panel_log_likelihoods(spec, b, data) for b in betas])


# -- weighted MAP objective --------------------------------------------------------

def log_prior(beta: ParamVector, prior: PriorSpec | None) -> float:
    """Log prior density plus log-Jacobian of constrained coordinates."""
    if not _has_prior(prior):
        return 0.0
    if len(prior) != len(beta):
        raise ValueError("one prior per coefficient required")
    if not beta.is_feasible():
        raise InfeasibleParameter("non-finite prior density at infeasible value")
    total = 0.0
    for v, t, p in zip(beta.values, beta.transforms, prior):
        total += p.logpdf(v)
        if t.constrained and p.kind != "none":
            total += math.log(t.offset - v)
    return total


def _log_prior_grad_u(beta: ParamVector, prior: PriorSpec | None) -> np.ndarray:
    g = np.zeros(len(beta))
    if not _has_prior(prior):
        return g
    for i, (v, t, p) in enumerate(zip(beta.values, beta.transforms, prior)):
        if p.kind == "none":
            continue
        d = p.dlogpdf(v)
        if t.constrained:
            g[i] = d * (v - t.offset) + 1.0
        else:
            g[i] = d
    return g


def _chain(beta: ParamVector) -> np.ndarray:
    """dbeta/du per coefficient."""
    return np.array([1.0 if t.kind == "identity" else v - t.offset
                     for v, t in zip(beta.values, beta.transforms)])


def _check_weights(weights, data: Dataset) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (data.n_individuals,):
        raise ValueError("need one weight per individual")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    return w


def weighted_map_objective(spec: UtilitySpec, beta: ParamVector, data: Dataset,
                           weights, prior: PriorSpec | None) -> float:
    """sum_n w_n * panel loglik_n + log prior (omitted when prior is None)."""
    w = _check_weights(weights, data)
    lp = log_prior(beta, prior)
    ll = task_log_probabilities(spec, beta, data)
    return float(np.sum(w[data.task_individual] * ll) + lp)


def weighted_map_gradient(spec: UtilitySpec, beta: ParamVector, data: Dataset,
                          weights, prior: PriorSpec | None) -> np.ndarray:
    """Gradient of :func:`weighted_map_objective` in unconstrained coordinates."""
    w = _check_weights(weights, data)
    return _objective_and_grad(spec, beta, data, w, prior)[1]


def _objective_and_grad(spec, beta: ParamVector, data: Dataset, w: np.ndarray, prior):
    lp = log_prior(beta, prior)
    ll, g = _task_terms(spec, beta.values, data, True)
    wt = w[data.task_individual]
    obj = float(np.sum(wt * ll) + lp)
    grad = np.sum(wt[:, None] * g, axis=0) * _chain(beta) + _log_prior_grad_u(beta, prior)
    return obj, grad


@dataclass(frozen=True)
class MNLFit:
    params: ParamVector
    objective: float
    converged: bool
    n_iter: int
    grad_norm: float
    message: str = ""


def fit_weighted_mnl(spec: UtilitySpec, data: Dataset, weights, prior: PriorSpec | None,
                     init: ParamVector, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER) -> MNLFit:
    """Maximise the weighted MAP objective with BFGS in unconstrained coordinates.

    The returned point never has a lower objective than `init`. `converged` is
    False when the gradient infinity-norm stayed above `tol` (iteration cap or
    line-search failure); the best iterate is returned in that case.
    """
    w = _check_weights(weights, data)
    if not init.is_feasible():
        raise InfeasibleParameter("infeasible starting value")
    transforms = init.transforms
    f0, g0 = _objective_and_grad(spec, init, data, w, prior)
    g0n = float(np.max(np.abs(g0))) if len(g0) else 0.0
    if g0n <= tol:
        return MNLFit(init, f0, True, 0, g0n, "initial point stationary")

    def fun(u):
        try:
            b = from_unconstrained(u, transforms)
            f, g = _objective_and_grad(spec, b, data, w, prior)
        except (FloatingPointError, OverflowError, InfeasibleParameter):
            return np.inf, np.zeros_like(u)
        if not np.isfinite(f):
            return np.inf, np.zeros_like(u)
        return -f, -g

    with np.errstate(over="ignore", invalid="ignore"):
        res = minimize(fun, init.to_unconstrained(), jac=True, method="BFGS",
                       options={"gtol": tol, "maxiter": max_iter, "norm": np.inf})
    best = from_unconstrained(res.x, transforms)
    f, g = _objective_and_grad(spec, best, data, w, prior) if np.isfinite(res.fun) else (-np.inf, g0)
    if not f >= f0:
        return MNLFit(init, f0, False, int(res.nit), g0n, "no improvement over start")
    gn = float(np.max(np.abs(g)))
    return MNLFit(best, f, gn <= tol, int(res.nit), gn, str(res.message))


def fit_mnl(spec: UtilitySpec, data: Dataset, init: ParamVector | None = None,
            tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> MNLFit:
    """Plain maximum-likelihood MNL."""
    init = neutral_start(spec.transforms) if init is None else init
    return fit_weighted_mnl(spec, data, np.ones(data.n_individuals), None, init, tol, max_iter)


def unscale_params(spec: UtilitySpec, beta: ParamVector, factors: Sequence[float]) -> ParamVector:
    """Map coefficients estimated on columns ``X[..., a] * factors[a]`` back to original units.

    Preference space: ``b_a = f_a * b'_a``. WTP space: the cost coefficient
    becomes ``f_c * b'_c`` and the others ``(f_a / f_c) * b'_a``. Transforms are
    kept; a bounded-negative bound therefore refers to the scaled units.
    """
    f = np.asarray(factors, dtype=float)
    v = beta.values * f
    if spec.space == "wtp":
        c = spec.cost_index
        rest = np.arange(len(f)) != c
        v[rest] = beta.values[rest] * f[rest] / f[c]
    return ParamVector(v, beta.transforms)
