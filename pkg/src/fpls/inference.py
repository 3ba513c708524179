"""Tests of H0: beta = b and confidence sets by test inversion.

The statistic is T_n(b) = n ||K_hat (b_m - b)||^2 where b_m is the PLS
iterate with many components (no early stopping). Its null limit is a
weighted sum of chi^2_1 variables with weights the eigenvalues of the
variance operator V = E[eps^2 X (x) X].

The overfitted b_m has near-zero in-sample residuals, so V_hat is built
from the residuals of the PCA estimator with GCV-chosen m, rescaled for the
m + 1 degrees of freedom it spent (m components plus the mean). Its
components do not depend on y, which keeps that correction honest. The
reference distribution does not depend on b, so a single critical value
serves every hypothesis tested on the same data.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import lsq_linear

from .cgpls import PlsFit, StoppingConfig, cg_pls
from .fspace import Dataset, EmpiricalMoments, FunctionVec, Grid, center, compute_moments
from .spectral import OperatorSpectrum, pca_gcv, spectrum_k_hat, variance_spectrum

__all__ = [
    "Method",
    "TestOutcome",
    "ConfidenceSetGrid",
    "InferenceSetup",
    "AsymptoticPremiseWarning",
    "BoundaryWarning",
    "rng_stream",
    "cosine_basis",
    "test_statistic",
    "simulate_weighted_chi2",
    "critical_value_simulated",
    "bootstrap_statistics",
    "critical_value_bootstrap",
    "variance_slope",
    "prepare_inference",
    "run_test",
    "confidence_set",
    "write_test_report",
    "write_confidence_set",
]

SPECTRUM_TERMS = 100
DEFAULT_M = 70

# stream roles for rng_stream
ROLE_CRITICAL = 2
ROLE_BOOTSTRAP = 3


class AsymptoticPremiseWarning(RuntimeWarning):
    """The PLS fitting error is not negligible against the critical value."""


class BoundaryWarning(RuntimeWarning):
    """Accepted lattice points touch the edge of the probed grid."""


class Method(str, Enum):
    SIMULATED_SPECTRUM = "spectrum"
    BOOTSTRAP = "bootstrap"


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by (seed, *key)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


def cosine_basis(grid: Grid, size: int) -> np.ndarray:
    """Rows h_1 = 1, h_j(s) = sqrt(2) cos((j - 1) pi s) sampled on ``grid``."""
    s = grid.points
    out = np.empty((size, grid.t_count))
    out[0] = 1.0
    for j in range(1, size):
        out[j] = math.sqrt(2.0) * np.cos(j * math.pi * s)
    return out


def test_statistic(moments: EmpiricalMoments, beta_m: FunctionVec, b: FunctionVec) -> float:
    """n ||K_hat (beta_m - b)||^2."""
    diff = beta_m - b
    kd = moments.apply(diff.values)
    return float(moments.n * moments.grid.weight * (kd @ kd))


test_statistic.__test__ = False  # not a pytest test


def simulate_weighted_chi2(
    weights: np.ndarray, n_sims: int, rng: np.random.Generator, chunk: int = 10_000
) -> np.ndarray:
    """n_sims draws of sum_j weights[j] Z_j^2."""
    weights = np.asarray(weights, dtype=float)
    out = np.empty(n_sims)
    for start in range(0, n_sims, chunk):
        stop = min(start + chunk, n_sims)
        z = rng.standard_normal((stop - start, weights.size))
        out[start:stop] = (z * z) @ weights
    return out


def _reference_weights(omega) -> np.ndarray:
    w = omega.eigenvalues if isinstance(omega, OperatorSpectrum) else np.asarray(omega, float)
    if w.size == 0:
        raise ValueError("empty spectrum: no weights to simulate")
    return np.sort(w)[::-1][:SPECTRUM_TERMS]


def _quantile(draws: np.ndarray, alpha: float) -> float:
    return float(np.quantile(draws, 1.0 - alpha))


def critical_value_simulated(omega, alpha: float, n_sims: int = 50_000, seed: int = 0) -> float:
    """(1 - alpha) quantile of sum_j omega_j Z_j^2 over the top 100 weights.

    ``omega`` is an :class:`OperatorSpectrum` or an array of weights.
    """
    _check_alpha(alpha)
    draws = simulate_weighted_chi2(_reference_weights(omega), n_sims, rng_stream(seed, ROLE_CRITICAL))
    return _quantile(draws, alpha)


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def _center_data(dataset: Dataset) -> Dataset:
    return dataset if dataset.centered else center(dataset)


def bootstrap_statistics(
    dataset: Dataset,
    center_beta: FunctionVec,
    m: int,
    n_boot: int,
    seed: int,
    breakdown_tol: float = 1e-14,
) -> np.ndarray:
    """Pairs-bootstrap replicates of the statistic.

    Each resample is recentered and refitted with m PLS components; the
    replicate is n ||K*(b*_m - c) - (r_hat - K_hat c)||^2 with c =
    ``center_beta``. Subtracting the full-sample moment of c makes c the
    pseudo-true slope of the resampling world. Degenerate resamples are
    skipped.
    """
    data = _center_data(dataset)
    mom = compute_moments(data)
    c = center_beta.values
    g = mom.r_hat.values - mom.apply(c)
    n, w = data.n, data.grid.weight
    stats = []
    skipped = 0
    for b in range(n_boot):
        rows = rng_stream(seed, ROLE_BOOTSTRAP, b).integers(0, n, size=n)
        boot = center(Dataset(data.grid, data.x[rows], data.y[rows]))
        bm = compute_moments(boot)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit = cg_pls(bm, m, breakdown_tol)
        if fit.m_max == 0:
            skipped += 1
            continue
        v = bm.apply(fit.path[-1] - c) - g
        stats.append(n * w * float(v @ v))
    if skipped > 0.01 * n_boot:
        warnings.warn(
            RuntimeWarning(f"bootstrap skipped {skipped} of {n_boot} degenerate resamples"),
            stacklevel=2,
        )
    return np.array(stats)


def critical_value_bootstrap(
    dataset: Dataset,
    b: FunctionVec,
    m: int,
    alpha: float,
    n_boot: int,
    seed: int,
    center_beta: FunctionVec | None = None,
) -> float:
    """(1 - alpha) empirical quantile of the bootstrap replicates.

    The replicates are centered at ``center_beta``, by default the
    slope behind V_hat (see :func:`variance_slope`). ``b`` does not enter the reference
    distribution; it is accepted for interface symmetry with the test.
    """
    _check_alpha(alpha)
    if center_beta is None:
        center_beta = variance_slope(_center_data(dataset))[0]
    draws = bootstrap_statistics(dataset, center_beta, m, n_boot, seed)
    if draws.size == 0:
        raise np.linalg.LinAlgError("every bootstrap resample was degenerate")
    return _quantile(draws, alpha)


@dataclass(frozen=True, eq=False)
class TestOutcome:
    __test__ = False

    t_n: float
    critical_value: float
    p_value: float
    alpha: float
    reject: bool
    m_used: int
    method: Method
    seed: int

    def as_row(self) -> dict:
        return {
            "t_n": self.t_n,
            "critical_value": self.critical_value,
            "p_value": self.p_value,
            "alpha": self.alpha,
            "m_used": self.m_used,
            "method": self.method.value,
            "seed": self.seed,
            "reject": int(self.reject),
        }


TEST_REPORT_COLUMNS = ["t_n", "critical_value", "p_value", "alpha", "m_used", "method", "seed", "reject"]


@dataclass(frozen=True, eq=False)
class InferenceSetup:
    """Everything the test needs that does not depend on the hypothesis b.

    ``reference`` is the sorted sample of the null reference distribution
    (simulated weighted chi^2 or bootstrap replicates).
    """

    data: Dataset
    moments: EmpiricalMoments
    fit: PlsFit
    variance_beta: FunctionVec
    variance_dof: int
    omega: OperatorSpectrum
    reference: np.ndarray
    critical_value: float
    alpha: float
    m_used: int
    method: Method
    seed: int

    @property
    def beta_m(self) -> FunctionVec:
        return FunctionVec(self.data.grid, self.fit.path[-1])

    @property
    def fitting_error(self) -> float:
        return float(self.fit.residual_norms[-1])

    def statistic(self, b: FunctionVec) -> float:
        return test_statistic(self.moments, self.beta_m, b)

    def statistic_values(self, b_values: np.ndarray) -> np.ndarray:
        """Statistic for each row of a (k, t_count) array of hypotheses."""
        kdiff = self.moments.apply(self.fit.path[-1]) - np.atleast_2d(b_values) @ _k_matrix_t(self.moments)
        return self.moments.n * self.data.grid.weight * np.sum(kdiff * kdiff, axis=1)

    def p_value(self, t_n: float) -> float:
        exceed = self.reference.size - np.searchsorted(self.reference, t_n, side="left")
        return float((exceed + 1) / (self.reference.size + 1))

    def outcome(self, b: FunctionVec) -> TestOutcome:
        t = self.statistic(b)
        return TestOutcome(
            t_n=t,
            critical_value=self.critical_value,
            p_value=self.p_value(t),
            alpha=self.alpha,
            reject=bool(t > self.critical_value),
            m_used=self.m_used,
            method=self.method,
            seed=self.seed,
        )


def _k_matrix_t(moments: EmpiricalMoments) -> np.ndarray:
    # row-vector form: (b @ X.T) @ X * w / n == K_hat b for symmetric K_hat
    x = moments.dataset.x
    return (x.T @ x) * (moments.grid.weight / moments.n)


def variance_slope(data: Dataset, moments: EmpiricalMoments | None = None) -> tuple[FunctionVec, int]:
    """Slope whose residuals estimate V, and the degrees of freedom it used.

    ``data`` must be centered; the count includes the mean removed by
    centering.
    """
    moments = moments or compute_moments(data)
    beta, m = pca_gcv(moments)
    return beta, min(m + 1, data.n - 1)


def prepare_inference(
    dataset: Dataset,
    alpha: float = 0.05,
    m: int | None = None,
    method: Method | str = Method.SIMULATED_SPECTRUM,
    seed: int = 0,
    n_sims: int = 50_000,
    n_boot: int = 500,
    config: StoppingConfig | None = None,
) -> InferenceSetup:
    """Fit b_m, estimate V_hat and build the null reference distribution."""
    _check_alpha(alpha)
    method = Method(method)
    config = config or StoppingConfig()
    data = _center_data(dataset)
    moments = compute_moments(data)
    rank = spectrum_k_hat(moments).rank
    if rank == 0:
        raise np.linalg.LinAlgError("all curves are identical after centering")
    m_req = min(DEFAULT_M if m is None else int(m), rank)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit = cg_pls(moments, max(m_req, 1), config.breakdown_tol)
    m_used = fit.m_max
    variance_beta, dof = variance_slope(data, moments)
    omega = variance_spectrum(data, variance_beta, dof)
    if method is Method.SIMULATED_SPECTRUM:
        if omega.rank == 0:
            reference = np.zeros(n_sims)
        else:
            reference = simulate_weighted_chi2(
                _reference_weights(omega), n_sims, rng_stream(seed, ROLE_CRITICAL)
            )
    else:
        reference = bootstrap_statistics(
            data, variance_beta, m_used, n_boot, seed, config.breakdown_tol
        )
        if reference.size == 0:
            raise np.linalg.LinAlgError("every bootstrap resample was degenerate")
    reference = np.sort(reference)
    z = _quantile(reference, alpha)
    setup = InferenceSetup(
        data, moments, fit, variance_beta, dof, omega, reference, z, alpha, m_used, method, seed
    )
    # fitting errors at rounding level never count against the premise
    rounding = 1e-12 * math.sqrt(moments.grid.weight * float(moments.r_hat.values @ moments.r_hat.values))
    err = setup.fitting_error
    if err > rounding and err * math.sqrt(data.n) > 0.1 * math.sqrt(z):
        warnings.warn(
            AsymptoticPremiseWarning(
                f"sqrt(n)*||r_hat - K_hat b_m|| = {setup.fitting_error * math.sqrt(data.n):.3g} "
                f"is large relative to sqrt(z) = {math.sqrt(z):.3g}; increase m"
            ),
            stacklevel=2,
        )
    return setup


def run_test(
    dataset: Dataset,
    b: FunctionVec,
    alpha: float = 0.05,
    m: int | None = None,
    method: Method | str = Method.SIMULATED_SPECTRUM,
    seed: int = 0,
    n_sims: int = 50_000,
    n_boot: int = 500,
    config: StoppingConfig | None = None,
) -> TestOutcome:
    """Test H0: beta = b. ``m`` defaults to min(70, numerical rank)."""
    setup = prepare_inference(dataset, alpha, m, method, seed, n_sims, n_boot, config)
    return setup.outcome(b)


run_test.__test__ = False


@dataclass(frozen=True, eq=False)
class ConfidenceSetGrid:
    """Test inversion over coefficient lattices in a cosine basis.

    T_n(sum_j b_j h_j) = ||target - design @ b||^2, so every lattice point
    and every lattice cell can be decided from the (t_count, J) ``design``.
    ``accepted`` is aligned with the C-order enumeration of ``axes``.
    """

    basis_size: int
    axes: tuple
    accepted: np.ndarray
    alpha: float
    critical_value: float
    design: np.ndarray
    target: np.ndarray
    m_used: int
    seed: int

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def coefficient_grid(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    @property
    def accepted_points(self) -> np.ndarray:
        idx = np.flatnonzero(self.accepted)
        sub = np.unravel_index(idx, self.shape)
        return np.stack([ax[s] for ax, s in zip(self.axes, sub)], axis=1) if idx.size else np.empty((0, self.basis_size))

    def statistic(self, coefs) -> np.ndarray:
        coefs = np.atleast_2d(np.asarray(coefs, float))
        r = self.target[None, :] - coefs @ self.design.T
        return np.sum(r * r, axis=1)

    def contains(self, coefs) -> bool:
        return bool(self.statistic(coefs)[0] <= self.critical_value)

    def minimizer(self) -> np.ndarray:
        """Coefficients minimising T_n over the span of the basis."""
        return np.linalg.lstsq(self.design, self.target, rcond=None)[0]

    def cell_of(self, coefs) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper corners of the lattice cell holding ``coefs``."""
        coefs = np.asarray(coefs, float)
        lo, hi = [], []
        for ax, c in zip(self.axes, coefs):
            k = int(np.clip(np.searchsorted(ax, c, side="right") - 1, 0, len(ax) - 2))
            lo.append(ax[k])
            hi.append(ax[k + 1])
        return np.array(lo), np.array(hi)

    def cell_min_statistic(self, coefs) -> float:
        """Minimum of T_n over the lattice cell containing ``coefs``."""
        lo, hi = self.cell_of(coefs)
        sol = lsq_linear(self.design, self.target, bounds=(lo, hi), method="bvls")
        return float(2.0 * sol.cost)

    def cell_accepted(self, coefs) -> bool:
        """Whether the confidence set intersects the cell holding ``coefs``."""
        return self.cell_min_statistic(coefs) <= self.critical_value

    def corner_accepted(self, coefs) -> bool:
        """Whether some lattice vertex of the cell holding ``coefs`` is accepted."""
        lo, hi = self.cell_of(coefs)
        corners = np.array(list(itertools.product(*zip(lo, hi))))
        return bool(np.any(self.statistic(corners) <= self.critical_value))

    def touches_boundary(self) -> bool:
        if not self.accepted.any():
            return False
        acc = self.accepted.reshape(self.shape)
        for axis, n in enumerate(self.shape):
            if np.take(acc, 0, axis=axis).any() or np.take(acc, n - 1, axis=axis).any():
                return True
        return False


def _axes_from_spec(grid_spec, basis_size: int) -> tuple:
    """``grid_spec``: one (lo, hi, count) for every axis, or a list of them."""
    if len(grid_spec) == 3 and np.isscalar(grid_spec[0]):
        grid_spec = [grid_spec] * basis_size
    if len(grid_spec) != basis_size:
        raise ValueError(f"grid_spec has {len(grid_spec)} axes, basis_size is {basis_size}")
    axes = []
    for lo, hi, count in grid_spec:
        if int(count) < 2 or not hi > lo:
            raise ValueError(f"bad axis spec ({lo}, {hi}, {count})")
        axes.append(np.linspace(float(lo), float(hi), int(count)))
    return tuple(axes)


def confidence_set(
    dataset: Dataset,
    basis_size: int = 5,
    grid_spec=(0.0, 4.5, 20),
    alpha: float = 0.05,
    m: int | None = None,
    seed: int = 0,
    method: Method | str = Method.SIMULATED_SPECTRUM,
    n_sims: int = 50_000,
    n_boot: int = 500,
    config: StoppingConfig | None = None,
    setup: InferenceSetup | None = None,
    chunk: int = 200_000,
) -> ConfidenceSetGrid:
    """Probe every lattice point b = sum_j b_j h_j with one fit and one critical value."""
    if basis_size < 1:
        raise ValueError("basis_size must be >= 1")
    axes = _axes_from_spec(grid_spec, basis_size)
    if setup is None:
        setup = prepare_inference(dataset, alpha, m, method, seed, n_sims, n_boot, config)
    mom = setup.moments
    scale = math.sqrt(mom.n * mom.grid.weight)
    h = cosine_basis(mom.grid, basis_size)
    design = np.stack([mom.apply(hj) for hj in h], axis=1) * scale
    target = mom.apply(setup.fit.path[-1]) * scale

    # T_n(b) = c0 - 2 q.b + b.Q.b evaluated chunk by chunk over the lattice
    gram = design.T @ design
    q = design.T @ target
    c0 = float(target @ target)
    shape = tuple(len(a) for a in axes)
    total = int(np.prod(shape))
    accepted = np.empty(total, dtype=bool)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        sub = np.unravel_index(idx, shape)
        pts = np.stack([ax[s] for ax, s in zip(axes, sub)], axis=1)
        t = c0 - 2.0 * pts @ q + np.einsum("ij,jk,ik->i", pts, gram, pts)
        accepted[start : start + len(idx)] = t <= setup.critical_value
    cs = ConfidenceSetGrid(
        basis_size, axes, accepted, setup.alpha, setup.critical_value, design, target,
        setup.m_used, setup.seed,
    )
    if cs.touches_boundary():
        warnings.warn(BoundaryWarning("accepted set touches the grid boundary; widen the grid"), stacklevel=2)
    return cs


def write_test_report(outcome: TestOutcome, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TEST_REPORT_COLUMNS)
        w.writeheader()
        row = outcome.as_row()
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_confidence_set(cs: ConfidenceSetGrid, csv_path, json_path, extra: dict | None = None) -> None:
    """Accepted coefficient tuples as CSV plus lattice metadata as JSON."""
    cols = [f"b_{j}" for j in range(1, cs.basis_size + 1)]
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in cs.accepted_points:
            w.writerow([repr(float(v)) for v in row])
    meta = {
        "basis": "cosine",
        "basis_size": cs.basis_size,
        "axes": [{"lo": float(a[0]), "hi": float(a[-1]), "count": len(a)} for a in cs.axes],
        "alpha": cs.alpha,
        "critical_value": cs.critical_value,
        "m_used": cs.m_used,
        "seed": cs.seed,
        "n_points": int(cs.accepted.size),
        "n_accepted": int(cs.accepted.sum()),
        "touches_boundary": cs.touches_boundary(),
    }
    if extra:
        meta.update(extra)
    Path(json_path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
