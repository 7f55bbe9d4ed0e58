"""Synthetic stated-preference route-choice data.

Tastes are willingness-to-pay values in $/h for in-vehicle and out-of-vehicle
travel time, plus a strictly negative cost coefficient. Utility is

    U = (ivtt * b_ivtt + ovtt * b_ovtt + cost) * b_cost + eps

with time attributes expressed in hours and eps standard Gumbel.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .choice_data import AttributeSpec, Dataset
from .mnl import UtilitySpec

# The disturbance is read as Gumbel(location 0, scale 1), whose variance is pi^2/6.
GUMBEL_LOC = 0.0
GUMBEL_SCALE = 1.0
COST_LOG_SD = 0.25
MINUTES_PER_HOUR = 60.0

ATTRIBUTES = (AttributeSpec("ivtt"), AttributeSpec("ovtt"),
              AttributeSpec("cost", role="cost", constraint="strictly-negative"))
TASTE_COLUMNS = ("beta_ivtt", "beta_ovtt", "beta_cost")


def wtp_spec(attributes=ATTRIBUTES) -> UtilitySpec:
    return UtilitySpec("wtp", attributes)


@dataclass(frozen=True)
class NormalComponent:
    mean: tuple[float, float]
    scale: tuple[float, float]
    corr: float = 0.0

    @property
    def cov(self) -> np.ndarray:
        D = np.diag(self.scale)
        omega = np.array([[1.0, self.corr], [self.corr, 1.0]])
        return D @ omega @ D


@dataclass(frozen=True)
class ExperimentSpec:
    """Taste distribution of one Monte Carlo experiment.

    Time tastes follow a finite mixture of bivariate normals; `log_ovtt`
    exponentiates the ovtt coordinate. The negative cost coefficient is
    log-normal with location `cost_loc` and scale `cost_scale`.
    """

    id: str
    components: tuple[NormalComponent, ...]
    weights: tuple[float, ...]
    cost_loc: float
    cost_scale: float = COST_LOG_SD
    log_ovtt: bool = False

    def __post_init__(self):
        if len(self.weights) != len(self.components):
            raise ValueError("one weight per component required")
        if abs(sum(self.weights) - 1.0) > 1e-12 or min(self.weights) <= 0:
            raise ValueError("mixture weights must be positive and sum to 1")
        if self.cost_scale <= 0:
            raise ValueError("cost scale must be positive")
        for c in self.components:
            if min(c.scale) <= 0:
                raise ValueError("scales must be positive")
            if np.any(np.linalg.eigvalsh(c.cov) <= 0):
                raise ValueError(f"experiment {self.id}: covariance not positive definite")


EXPERIMENTS = {
    "I": ExperimentSpec("I", (NormalComponent((10.0, 15.0), (1.5, 2.0), 0.5),), (1.0,), 0.75),
    "II": ExperimentSpec("II", (NormalComponent((12.0, 2.8), (1.5, 0.3), 0.3),), (1.0,), 0.60,
                         log_ovtt=True),
    "III": ExperimentSpec("III", (NormalComponent((12.0, 16.0), (1.0, 2.0), 0.2),
                                  NormalComponent((6.0, 10.0), (1.0, 2.0), -0.4)),
                          (0.75, 0.25), 0.80),
    "IV": ExperimentSpec("IV", (NormalComponent((10.0, 15.0), (2.0, 2.0)),
                                NormalComponent((0.88, 24.12), (1.2, 1.2)),
                                NormalComponent((19.12, 24.12), (1.8, 1.2))),
                         (0.35, 0.25, 0.40), 0.60),
}


def experiment(id: str) -> ExperimentSpec:
    try:
        return EXPERIMENTS[id]
    except KeyError:
        raise ValueError(f"unknown experiment {id!r}; choose from I, II, III, IV") from None


@dataclass(frozen=True)
class SimConfig:
    N: int = 2000
    T: int = 8
    J: int = 3
    seed: int = 0

    def __post_init__(self):
        if min(self.N, self.T, self.J) < 1:
            raise ValueError("N, T and J must be positive")


@dataclass(frozen=True)
class Covariates:
    """Attribute levels with time in minutes, shape (N, T, J) each."""

    distance: np.ndarray  # (N, T)
    speed: np.ndarray
    ivtt: np.ndarray
    ovtt: np.ndarray
    cost: np.ndarray

    def design(self) -> np.ndarray:
        """(N, T, J, 3) design in model units: hours for time, dollars for cost."""
        return np.stack([self.ivtt / MINUTES_PER_HOUR, self.ovtt / MINUTES_PER_HOUR,
                         self.cost], axis=-1)


@dataclass(frozen=True)
class Simulation:
    covariates: Covariates
    tastes: np.ndarray      # (N, 3)
    component: np.ndarray   # (N,) latent mixture component
    utility: np.ndarray     # (N, T, J) deterministic part
    chosen: np.ndarray      # (N, T)
    dataset: Dataset = field(repr=False)


def gen_covariates(config: SimConfig, rng: np.random.Generator) -> Covariates:
    N, T, J = config.N, config.T, config.J
    s = rng.uniform(2.0, 20.0, size=(N, T))
    v = rng.uniform(10.0, 40.0, size=(N, T, J))
    ovtt = rng.uniform(0.0, 30.0, size=(N, T, J))
    fixed = rng.uniform(0.0, 2.0, size=(N, T, J))
    per_km = rng.uniform(0.0, 0.7, size=(N, T, J))
    ivtt = MINUTES_PER_HOUR * s[..., None] / v
    cost = fixed + per_km * s[..., None]
    return Covariates(s, v, ivtt, ovtt, cost)


def gen_tastes(spec: ExperimentSpec, N: int, rng: np.random.Generator
               ) -> tuple[np.ndarray, np.ndarray]:
    """Draw (b_ivtt, b_ovtt, b_cost) per individual; also return the component labels."""
    comp = rng.choice(len(spec.weights), size=N, p=np.asarray(spec.weights))
    z = rng.standard_normal((N, 2))
    time = np.empty((N, 2))
    for k, c in enumerate(spec.components):
        L = np.linalg.cholesky(c.cov)
        idx = comp == k
        time[idx] = np.asarray(c.mean) + z[idx] @ L.T
    if spec.log_ovtt:
        time[:, 1] = np.exp(time[:, 1])
    b_cost = -np.exp(rng.normal(spec.cost_loc, spec.cost_scale, size=N))
    return np.column_stack([time, b_cost]), comp


def deterministic_utility(covariates: Covariates, tastes: np.ndarray) -> np.ndarray:
    X = covariates.design()
    b = tastes[:, None, None, :]
    return (X[..., 0] * b[..., 0] + X[..., 1] * b[..., 1] + X[..., 2]) * b[..., 2]


def gen_choices(covariates: Covariates, tastes: np.ndarray, rng: np.random.Generator,
                noise: bool = True, attributes=ATTRIBUTES) -> tuple[np.ndarray, np.ndarray, Dataset]:
    """Add Gumbel noise and pick the utility-maximising alternative.

    Returns the deterministic utilities, the chosen indices (N, T) and the
    assembled dataset. ``noise=False`` gives the noiseless argmax.
    """
    V = deterministic_utility(covariates, tastes)
    eps = (rng.gumbel(GUMBEL_LOC, GUMBEL_SCALE, size=V.shape) if noise
           else np.zeros_like(V))
    chosen = np.argmax(V + eps, axis=-1)
    return V, chosen, assemble(covariates, chosen, attributes)


def assemble(covariates: Covariates, chosen: np.ndarray, attributes=ATTRIBUTES) -> Dataset:
    X = covariates.design()
    N, T, J, P = X.shape
    width = len(str(N))
    ids = tuple(f"{n + 1:0{width}d}" for n in range(N))
    task_ids = tuple(f"{ids[n]}-{t + 1}" for n in range(N) for t in range(T))
    alt_ids = (tuple(str(j + 1) for j in range(J)),) * (N * T)
    return Dataset(tuple(attributes), ids, task_ids, alt_ids,
                   np.repeat(np.arange(N), T), X.reshape(N * T, J, P),
                   np.ones((N * T, J), dtype=bool), chosen.reshape(N * T))


def measure_error_rate(utility: np.ndarray, chosen: np.ndarray) -> float:
    """Share of tasks whose choice differs from the deterministic-utility argmax."""
    return float(np.mean(np.argmax(utility, axis=-1) != chosen))


def simulate(spec: ExperimentSpec, config: SimConfig, noise: bool = True) -> Simulation:
    """Covariates, tastes and choices drawn from independent child streams of `config.seed`."""
    ss = np.random.SeedSequence(config.seed)
    r_cov, r_taste, r_choice = (np.random.default_rng(s) for s in ss.spawn(3))
    cov = gen_covariates(config, r_cov)
    tastes, comp = gen_tastes(spec, config.N, r_taste)
    V, chosen, data = gen_choices(cov, tastes, r_choice, noise)
    return Simulation(cov, tastes, comp, V, chosen, data)


def truth_frame(sim: Simulation) -> pd.DataFrame:
    df = pd.DataFrame(sim.tastes, columns=list(TASTE_COLUMNS))
    df.insert(0, "individual_id", list(sim.dataset.individual_ids))
    df["component"] = sim.component + 1
    return df


def write_truth(sim: Simulation, path: str | Path) -> None:
    truth_frame(sim).to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
