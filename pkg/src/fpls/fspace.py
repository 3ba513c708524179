"""Discretized L2[0, 1] primitives.

Functions live on a uniform left-endpoint Riemann grid. The empirical
covariance operator is never assembled; it is applied through the data
matrix in O(n * t_count).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np

__all__ = [
    "Grid",
    "FunctionVec",
    "Dataset",
    "EmpiricalMoments",
    "GridMismatchError",
    "DatasetFormatError",
    "make_uniform_grid",
    "inner",
    "norm",
    "center",
    "compute_moments",
    "apply_k_hat",
    "read_dataset_csv",
    "write_dataset_csv",
]


class GridMismatchError(ValueError):
    """Raised when functions sampled on different grids are combined."""


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid:
    """Uniform grid k / t_count, k = 0..t_count-1, with weight 1 / t_count."""

    t_count: int

    def __post_init__(self):
        if int(self.t_count) != self.t_count or self.t_count < 2:
            raise ValueError(f"t_count must be an integer >= 2, got {self.t_count!r}")
        object.__setattr__(self, "t_count", int(self.t_count))

    @cached_property
    def points(self) -> np.ndarray:
        return _frozen(np.arange(self.t_count) / self.t_count)

    @property
    def weight(self) -> float:
        return 1.0 / self.t_count

    def function(self, values) -> "FunctionVec":
        return FunctionVec(self, values)

    def evaluate(self, f) -> "FunctionVec":
        """Sample a callable on the grid points."""
        return FunctionVec(self, f(self.points))

    def zeros(self) -> "FunctionVec":
        return FunctionVec(self, np.zeros(self.t_count))


def make_uniform_grid(t_count: int) -> Grid:
    return Grid(t_count)


@dataclass(frozen=True, eq=False)
class FunctionVec:
    """A function in L2[0, 1] sampled on ``grid``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != (self.grid.t_count,):
            raise ValueError(
                f"values must have shape ({self.grid.t_count},), got {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("function values must be finite")
        object.__setattr__(self, "values", v)

    def _check(self, other: "FunctionVec"):
        if self.grid != other.grid:
            raise GridMismatchError(
                f"grid mismatch: {self.grid.t_count} vs {other.grid.t_count} points"
            )

    def __add__(self, other):
        if isinstance(other, FunctionVec):
            self._check(other)
            return FunctionVec(self.grid, self.values + other.values)
        return FunctionVec(self.grid, self.values + other)

    def __sub__(self, other):
        if isinstance(other, FunctionVec):
            self._check(other)
            return FunctionVec(self.grid, self.values - other.values)
        return FunctionVec(self.grid, self.values - other)

    def __mul__(self, scalar):
        return FunctionVec(self.grid, self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return FunctionVec(self.grid, -self.values)

    def __repr__(self):
        return f"FunctionVec(t_count={self.grid.t_count}, norm={norm(self):.6g})"


def inner(f: FunctionVec, g: FunctionVec) -> float:
    """Riemann-sum inner product ``weight * sum(f * g)``."""
    f._check(g)
    return float(f.grid.weight * np.dot(f.values, g.values))


def norm(f: FunctionVec) -> float:
    return float(np.sqrt(max(inner(f, f), 0.0)))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Predictor curves ``x`` (row i is X_i on the grid) and responses ``y``."""

    grid: Grid
    x: np.ndarray
    y: np.ndarray
    centered: bool = False

    def __post_init__(self):
        x = _frozen(self.x)
        y = _frozen(self.y)
        if x.ndim != 2 or x.shape[1] != self.grid.t_count:
            raise ValueError(
                f"x must be n x {self.grid.t_count}, got shape {x.shape}"
            )
        if y.shape != (x.shape[0],):
            raise ValueError(f"y must have length {x.shape[0]}, got shape {y.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def curve(self, i: int) -> FunctionVec:
        return FunctionVec(self.grid, self.x[i])

    def subset(self, rows) -> "Dataset":
        """Rows ``rows`` (may repeat, as in a bootstrap resample), uncentered flag."""
        rows = np.asarray(rows)
        return Dataset(self.grid, self.x[rows], self.y[rows], centered=False)

    def predict(self, beta: FunctionVec) -> np.ndarray:
        """Vector of <X_i, beta>."""
        if beta.grid != self.grid:
            raise GridMismatchError("slope and dataset live on different grids")
        return self.x @ beta.values * self.grid.weight


def center(dataset: Dataset) -> Dataset:
    """Remove column means of the curves and the mean response."""
    x = dataset.x - dataset.x.mean(axis=0)
    y = dataset.y - dataset.y.mean()
    return Dataset(dataset.grid, x, y, centered=True)


@dataclass(frozen=True, eq=False)
class EmpiricalMoments:
    """Cross-covariance r_hat = (1/n) sum y_i X_i and the n x n Gram <X_i, X_j>/n."""

    dataset: Dataset
    r_hat: FunctionVec

    @property
    def grid(self) -> Grid:
        return self.dataset.grid

    @property
    def n(self) -> int:
        return self.dataset.n

    @cached_property
    def gram(self) -> np.ndarray:
        x = self.dataset.x
        g = (x @ x.T) * (self.grid.weight / self.n)
        g = 0.5 * (g + g.T)
        g.setflags(write=False)
        return g

    def apply(self, v: np.ndarray) -> np.ndarray:
        """K_hat applied to raw grid values (no FunctionVec wrapping)."""
        x = self.dataset.x
        return x.T @ (x @ v) * (self.grid.weight / self.n)

    def mean_sq_norm(self) -> float:
        """Plug-in (1/n) sum ||X_i||^2."""
        x = self.dataset.x
        return float(np.sum(x * x) * self.grid.weight / self.n)


def compute_moments(dataset: Dataset) -> EmpiricalMoments:
    x, y = dataset.x, dataset.y
    r = x.T @ y / dataset.n
    return EmpiricalMoments(dataset, FunctionVec(dataset.grid, r))


def apply_k_hat(moments: EmpiricalMoments, v: FunctionVec) -> FunctionVec:
    """(1/n) sum_i <X_i, v> X_i via two matrix-vector products."""
    if v.grid != moments.grid:
        raise GridMismatchError("function and dataset live on different grids")
    return FunctionVec(v.grid, moments.apply(v.values))


PathLike = Union[str, Path]


def read_dataset_csv(path: PathLike) -> Dataset:
    """Read a dataset with header ``y, x_000, ..., x_{T-1}`` (one row per observation).

    Column order is free; the grid is uniform with T = number of x columns.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError("empty file, expected a header row", line=1)
        header = [h.strip() for h in header]
        if "y" not in header:
            raise DatasetFormatError("missing required column 'y'", line=1)
        x_cols = sorted(
            (h for h in header if h.startswith("x_")), key=lambda h: _x_index(h)
        )
        if len(x_cols) < 2:
            raise DatasetFormatError("need at least two x_### columns", line=1)
        expected = [f"x_{k:03d}" for k in range(len(x_cols))]
        if [_x_index(h) for h in x_cols] != list(range(len(x_cols))):
            raise DatasetFormatError(
                f"x columns must be contiguous {expected[0]}..{expected[-1]}", line=1
            )
        iy = header.index("y")
        ix = [header.index(h) for h in x_cols]
        ys, xs = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetFormatError(
                    f"expected {len(header)} fields, got {len(row)}", line=lineno
                )
            try:
                ys.append(float(row[iy]))
                xs.append([float(row[j]) for j in ix])
            except ValueError as exc:
                raise DatasetFormatError(f"non-numeric value ({exc})", line=lineno)
    if len(ys) < 2:
        raise DatasetFormatError(f"need at least 2 observations, got {len(ys)}")
    try:
        return Dataset(make_uniform_grid(len(x_cols)), np.array(xs), np.array(ys))
    except ValueError as exc:
        raise DatasetFormatError(str(exc))


def _x_index(name: str) -> int:
    try:
        return int(name[2:])
    except ValueError:
        raise DatasetFormatError(f"bad curve column name {name!r}", line=1)


def write_dataset_csv(dataset: Dataset, path: PathLike) -> None:
    t = dataset.grid.t_count
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["y"] + [f"x_{k:03d}" for k in range(t)])
        for yi, xi in zip(dataset.y, dataset.x):
            w.writerow([repr(float(yi))] + [repr(float(v)) for v in xi])
