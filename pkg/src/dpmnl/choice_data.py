"""Panel discrete-choice datasets: loading, validation, covariate scaling and
fold partitioning.

A :class:`Dataset` is stored in packed form. Tasks are grouped contiguously
by individual, alternatives are padded to the largest choice set, and padded
slots are marked unavailable. The packed arrays are what the likelihood code
consumes; :meth:`Dataset.tasks` rebuilds the record view on demand.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

ROLES = ("generic", "cost")
CONSTRAINTS = ("free", "strictly-negative", "bounded-negative")
KEY_COLUMNS = ("individual_id", "task_id", "alt_id")


class DataError(ValueError):
    """Raised when choice data violate the dataset invariants."""


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    role: str = "generic"
    constraint: str = "free"
    upper_bound: float | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown attribute role {self.role!r}")
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"unknown constraint {self.constraint!r}")
        if self.constraint == "bounded-negative":
            if self.upper_bound is None or not self.upper_bound < 0:
                raise ValueError("bounded-negative requires upper_bound < 0")
        elif self.upper_bound is not None:
            raise ValueError("upper_bound only applies to bounded-negative")

    def to_dict(self) -> dict:
        out = {"name": self.name, "role": self.role, "constraint": self.constraint}
        if self.upper_bound is not None:
            out["upper_bound"] = self.upper_bound
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSpec":
        return cls(d["name"], d.get("role", "generic"), d.get("constraint", "free"),
                   d.get("upper_bound"))


@dataclass(frozen=True)
class Alternative:
    alt_id: str
    available: bool
    attributes: tuple[float, ...]


@dataclass(frozen=True)
class ChoiceTask:
    individual_id: str
    task_id: str
    alternatives: tuple[Alternative, ...]
    chosen: str


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable packed panel of choice tasks.

    Attributes
    ----------
    attributes : tuple of AttributeSpec
        One entry per column of the last axis of `X`.
    individual_ids : tuple of str
        Length N, unique.
    task_ids : tuple of str
        Length R (total number of tasks), grouped by individual.
    alt_ids : tuple of tuple of str
        Per task, the alternative ids in file order (unpadded).
    task_individual : ndarray of int, shape (R,)
        Index into `individual_ids` for every task; non-decreasing.
    X : ndarray, shape (R, J, P)
        Attribute levels; padded slots hold zeros.
    available : ndarray of bool, shape (R, J)
    chosen : ndarray of int, shape (R,)
        Position of the chosen alternative within the task.
    """

    attributes: tuple[AttributeSpec, ...]
    individual_ids: tuple[str, ...]
    task_ids: tuple[str, ...]
    alt_ids: tuple[tuple[str, ...], ...]
    task_individual: np.ndarray
    X: np.ndarray
    available: np.ndarray
    chosen: np.ndarray
    _offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name, dtype in (("task_individual", np.int64), ("X", float),
                            ("available", bool), ("chosen", np.int64)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "individual_ids", tuple(self.individual_ids))
        object.__setattr__(self, "task_ids", tuple(self.task_ids))
        object.__setattr__(self, "alt_ids", tuple(tuple(a) for a in self.alt_ids))
        self._validate()
        counts = np.bincount(self.task_individual, minlength=self.n_individuals)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        offsets.setflags(write=False)
        object.__setattr__(self, "_offsets", offsets)

    def _validate(self):
        R = len(self.task_ids)
        N = len(self.individual_ids)
        if N == 0:
            raise DataError("dataset has no individuals")
        if len(set(self.individual_ids)) != N:
            raise DataError("individual ids are not unique")
        if self.X.ndim != 3 or self.X.shape[0] != R:
            raise DataError("X must have shape (tasks, alternatives, attributes)")
        if self.X.shape[2] != len(self.attributes):
            raise DataError("attribute vectors do not match the attribute list")
        if self.available.shape != self.X.shape[:2] or self.chosen.shape != (R,):
            raise DataError("inconsistent array shapes")
        if len(self.alt_ids) != R or len(self.task_individual) != R:
            raise DataError("inconsistent task metadata")
        if not np.all(np.isfinite(self.X)):
            raise DataError("attribute values must be finite")
        if R and (np.any(np.diff(self.task_individual) < 0)
                  or self.task_individual.min() < 0 or self.task_individual.max() >= N):
            raise DataError("tasks must be grouped by individual")
        if np.any(np.bincount(self.task_individual, minlength=N) == 0):
            raise DataError("every individual needs at least one task")
        if np.any((self.chosen < 0) | (self.chosen >= self.X.shape[1])):
            raise DataError("chosen index out of range")
        if not np.all(self.available[np.arange(R), self.chosen]):
            raise DataError("chosen alternative unavailable")
        if np.any(self.available.sum(axis=1) < 2):
            raise DataError("each task needs at least two available alternatives")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise DataError("duplicate attribute names")

    # -- sizes ---------------------------------------------------------------
    @property
    def n_individuals(self) -> int:
        return len(self.individual_ids)

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    @property
    def attribute_names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def tasks_per_individual(self) -> np.ndarray:
        return np.diff(self._offsets)

    @property
    def n_rows(self) -> int:
        """Number of (task, alternative) rows in long format."""
        return sum(len(a) for a in self.alt_ids)

    def task_slice(self, n: int) -> slice:
        return slice(int(self._offsets[n]), int(self._offsets[n + 1]))

    # -- views -----------------------------------------------------------------
    def tasks(self, n: int) -> list[ChoiceTask]:
        out = []
        pid = self.individual_ids[n]
        for r in range(*self.task_slice(n).indices(self.n_tasks)):
            alts = tuple(
                Alternative(a, bool(self.available[r, j]), tuple(float(v) for v in self.X[r, j]))
                for j, a in enumerate(self.alt_ids[r]))
            out.append(ChoiceTask(pid, self.task_ids[r], alts, self.alt_ids[r][self.chosen[r]]))
        return out

    def subset(self, individuals: Sequence[int]) -> "Dataset":
        """Dataset restricted to the given individual indices (in that order)."""
        individuals = np.asarray(individuals, dtype=np.int64)
        rows = np.concatenate([np.arange(*self.task_slice(n).indices(self.n_tasks))
                               for n in individuals]) if len(individuals) else np.array([], int)
        new_ti = np.repeat(np.arange(len(individuals)),
                           self.tasks_per_individual[individuals])
        return Dataset(
            attributes=self.attributes,
            individual_ids=[self.individual_ids[n] for n in individuals],
            task_ids=[self.task_ids[r] for r in rows],
            alt_ids=[self.alt_ids[r] for r in rows],
            task_individual=new_ti,
            X=self.X[rows],
            available=self.available[rows],
            chosen=self.chosen[rows],
        )

    def with_attributes(self, X: np.ndarray,
                        attributes: Sequence[AttributeSpec] | None = None) -> "Dataset":
        return Dataset(
            attributes=self.attributes if attributes is None else attributes,
            individual_ids=self.individual_ids, task_ids=self.task_ids,
            alt_ids=self.alt_ids, task_individual=self.task_individual,
            X=X, available=self.available, chosen=self.chosen)

    def equals(self, other: "Dataset") -> bool:
        return (self.attributes == other.attributes
                and self.individual_ids == other.individual_ids
                and self.task_ids == other.task_ids
                and self.alt_ids == other.alt_ids
                and np.array_equal(self.task_individual, other.task_individual)
                and np.array_equal(self.X, other.X)
                and np.array_equal(self.available, other.available)
                and np.array_equal(self.chosen, other.chosen))

    @classmethod
    def from_tasks(cls, attributes: Sequence[AttributeSpec],
                   tasks: Iterable[ChoiceTask]) -> "Dataset":
        """Build a dataset from record-style tasks (grouped by first appearance)."""
        by_person: dict[str, list[ChoiceTask]] = {}
        for task in tasks:
            by_person.setdefault(task.individual_id, []).append(task)
        P = len(attributes)
        flat = [t for ts in by_person.values() for t in ts]
        J = max(len(t.alternatives) for t in flat)
        R = len(flat)
        X = np.zeros((R, J, P))
        avail = np.zeros((R, J), dtype=bool)
        chosen = np.zeros(R, dtype=np.int64)
        alt_ids = []
        for r, t in enumerate(flat):
            ids = [a.alt_id for a in t.alternatives]
            if len(set(ids)) != len(ids):
                raise DataError(f"duplicate alternative in task {t.task_id!r}")
            for j, a in enumerate(t.alternatives):
                if len(a.attributes) != P:
                    raise DataError("attribute vector length mismatch")
                X[r, j] = a.attributes
                avail[r, j] = a.available
            if t.chosen not in ids:
                raise DataError(f"chosen alternative missing in task {t.task_id!r}")
            chosen[r] = ids.index(t.chosen)
            alt_ids.append(ids)
        counts = [len(ts) for ts in by_person.values()]
        return cls(attributes=attributes, individual_ids=list(by_person),
                   task_ids=[t.task_id for t in flat], alt_ids=alt_ids,
                   task_individual=np.repeat(np.arange(len(counts)), counts),
                   X=X, available=avail, chosen=chosen)


# -- CSV -----------------------------------------------------------------------

def load_csv(path: str | Path, attributes: Sequence[AttributeSpec]) -> Dataset:
    """Read a long-format CSV (one row per alternative per task).

    Required columns are ``individual_id``, ``task_id``, ``alt_id``,
    ``chosen`` and one column per attribute; ``available`` is optional and
    defaults to all-available. Row order within a task is kept as the
    alternative order.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    names = [a.name for a in attributes]
    required = list(KEY_COLUMNS) + ["chosen"] + names
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    if df.empty:
        raise DataError("no rows")

    def numeric(col: str) -> np.ndarray:
        try:
            # float() parsing round-trips repr output exactly; to_numeric may not
            vals = np.array([float(v) for v in df[col]])
        except ValueError:
            vals = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(vals)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataError(f"non-numeric value {df[col].iloc[row]!r} in column {col!r} "
                            f"(row {row + 2})")
        return vals

    attr = np.column_stack([numeric(c) for c in names]) if names else np.zeros((len(df), 0))
    chosen = numeric("chosen")
    avail = numeric("available") if "available" in df.columns else np.ones(len(df))
    for col, vals in (("chosen", chosen), ("available", avail)):
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise DataError(f"column {col!r} must be 0/1")
    if np.any((chosen == 1) & (avail == 0)):
        raise DataError("chosen alternative unavailable")
    if df.duplicated(list(KEY_COLUMNS)).any():
        dup = df[df.duplicated(list(KEY_COLUMNS))].iloc[0]
        raise DataError("duplicate (individual, task, alt) triple: "
                        f"({dup.individual_id}, {dup.task_id}, {dup.alt_id})")

    # group rows by (individual, task) preserving first-appearance order
    key = list(zip(df["individual_id"], df["task_id"]))
    task_index: dict[tuple[str, str], list[int]] = {}
    for i, k in enumerate(key):
        task_index.setdefault(k, []).append(i)
    tasks = []
    for (pid, tid), rows in task_index.items():
        n_chosen = int(chosen[rows].sum())
        if n_chosen != 1:
            raise DataError(f"task ({pid}, {tid}) has {n_chosen} chosen alternatives")
        alts = tuple(Alternative(df["alt_id"].iat[i], bool(avail[i]), tuple(attr[i]))
                     for i in rows)
        pick = next(df["alt_id"].iat[i] for i in rows if chosen[i] == 1)
        tasks.append(ChoiceTask(pid, tid, alts, pick))
    return Dataset.from_tasks(attributes, tasks)


def to_frame(data: Dataset) -> pd.DataFrame:
    rows = []
    names = data.attribute_names
    for r in range(data.n_tasks):
        pid = data.individual_ids[data.task_individual[r]]
        for j, a in enumerate(data.alt_ids[r]):
            rows.append([pid, data.task_ids[r], a, int(data.available[r, j]),
                         int(data.chosen[r] == j), *data.X[r, j]])
    return pd.DataFrame(rows, columns=[*KEY_COLUMNS, "available", "chosen", *names])


def write_csv(data: Dataset, path: str | Path) -> None:
    to_frame(data).to_csv(path, index=False, encoding="utf-8", lineterminator="\n")


# -- scaling ---------------------------------------------------------------------

def _power_of_ten_exponent(coef: float) -> int:
    """Integer e with 0.1 <= |coef| * 10**e < 1."""
    mag = abs(coef)
    e = -math.floor(math.log10(mag)) - 1
    while mag * 10.0 ** e >= 1.0:
        e -= 1
    while mag * 10.0 ** e < 0.1:
        e += 1
    return e


def scale_covariates(data: Dataset, reference_coefs: Sequence[float]
                     ) -> tuple[Dataset, np.ndarray]:
    """Rescale each attribute column by a power of ten.

    `reference_coefs` are plain MNL (preference-space) estimates on the
    unscaled data. Column ``a`` is multiplied by ``factor[a]`` so that the
    implied coefficient ``coef[a] / factor[a]`` has magnitude in [0.1, 1).
    Zero coefficients leave the column unscaled.
    """
    coefs = np.asarray(reference_coefs, dtype=float)
    if coefs.shape != (data.n_attributes,):
        raise ValueError("need one reference coefficient per attribute")
    factors = np.ones(data.n_attributes)
    for a, c in enumerate(coefs):
        if c == 0.0 or not np.isfinite(c):
            logger.warning("cannot scale attribute %r: reference coefficient %r",
                           data.attributes[a].name, c)
            continue
        factors[a] = 10.0 ** (-_power_of_ten_exponent(c))
    return data.with_attributes(data.X * factors), factors


# -- folds -------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    n_folds: int
    assignment: dict[str, int]

    def folds(self, data: Dataset) -> list[np.ndarray]:
        """Individual indices of `data` belonging to each fold."""
        labels = np.array([self.assignment[i] for i in data.individual_ids])
        return [np.flatnonzero(labels == k) for k in range(self.n_folds)]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"individual_id": list(self.assignment),
                             "fold": list(self.assignment.values())})

    def write_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")


def split_folds(data: Dataset, n_folds: int, seed: int) -> FoldAssignment:
    """Random partition of individuals into folds whose sizes differ by at most one."""
    N = data.n_individuals
    if n_folds < 1:
        raise ValueError("n_folds must be positive")
    if n_folds > N:
        raise ValueError(f"n_folds={n_folds} exceeds number of individuals N={N}")
    perm = np.random.default_rng(seed).permutation(N)
    labels = np.empty(N, dtype=int)
    labels[perm] = np.arange(N) % n_folds
    return FoldAssignment(n_folds, {pid: int(labels[n])
                                    for n, pid in enumerate(data.individual_ids)})
