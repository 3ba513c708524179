"""Conjugate-gradient functional PLS with adaptive early stopping.

The m-th PLS iterate minimises ||r_hat - K_hat b|| over the Krylov space
span{r_hat, K_hat r_hat, ..., K_hat^{m-1} r_hat}. :func:`cg_pls` computes the
whole path with the minimal-residual conjugate gradient recursion;
:func:`krylov_oracle` solves the same least-squares problem from its
normal equations and exists to check the recursion.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from .fspace import Dataset, EmpiricalMoments, FunctionVec, Grid, center, compute_moments
from .spectral import pca_gcv

__all__ = [
    "PlsFit",
    "StoppingConfig",
    "BreakdownWarning",
    "NonConvergenceWarning",
    "NoStopWarning",
    "IllConditioned",
    "cg_pls",
    "krylov_oracle",
    "select_m",
    "stopping_threshold",
    "estimate_sigma2_iterative",
    "fit_early_stopped",
    "load_config",
    "write_fit",
]

DEFAULT_BREAKDOWN_TOL = 1e-14


class BreakdownWarning(RuntimeWarning):
    """The very first CG step is degenerate (r_hat = 0)."""


class NonConvergenceWarning(RuntimeWarning):
    """The sigma^2 iteration hit k_max without meeting the tolerance."""


class NoStopWarning(RuntimeWarning):
    """No iterate met the stopping threshold; the residual argmin was used."""


class IllConditioned(np.linalg.LinAlgError):
    """The Krylov normal equations are too ill-conditioned to trust."""

    def __init__(self, m: int, cond: float):
        self.m = m
        self.cond = cond
        super().__init__(f"Hankel system for m={m} has condition {cond:.3e}; lower m")


@dataclass(frozen=True)
class StoppingConfig:
    tau: float = 1.01
    delta: float = 0.1
    xi: float = 0.01
    k_max: int = 10
    m_cap: int | None = None  # None: min(n, 100)
    breakdown_tol: float = DEFAULT_BREAKDOWN_TOL

    def __post_init__(self):
        if not self.tau > 1:
            raise ValueError(f"tau must exceed 1, got {self.tau}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.xi >= 0:
            raise ValueError(f"xi must be >= 0, got {self.xi}")
        if int(self.k_max) != self.k_max or self.k_max < 1:
            raise ValueError(f"k_max must be a positive integer, got {self.k_max}")
        if self.m_cap is not None and (int(self.m_cap) != self.m_cap or self.m_cap < 1):
            raise ValueError(f"m_cap must be a positive integer, got {self.m_cap}")
        if not 0 <= self.breakdown_tol < 1:
            raise ValueError(f"breakdown_tol must lie in [0, 1), got {self.breakdown_tol}")

    def cap_for(self, n: int) -> int:
        return int(self.m_cap) if self.m_cap is not None else min(n, 100)


@dataclass(frozen=True, eq=False)
class PlsFit:
    """CG trajectory b_0..b_M with residual norms and the selected iterate.

    ``path[m]`` holds the grid values of b_m, ``residual_norms[m]`` is
    ||r_hat - K_hat b_m||. ``stop_reason`` is ``"m_max"`` or ``"breakdown"``.
    """

    grid: Grid
    path: np.ndarray
    residual_norms: np.ndarray
    stop_reason: str = "m_max"
    m_selected: int | None = None
    threshold: float = math.nan
    sigma2_hat: float = math.nan
    sigma2_trace: tuple = ()
    notes: tuple = ()

    @property
    def m_max(self) -> int:
        return len(self.residual_norms) - 1

    @property
    def betas(self) -> list[FunctionVec]:
        return [FunctionVec(self.grid, b) for b in self.path]

    def beta(self, m: int | None = None) -> FunctionVec:
        """Iterate m (default: the selected one); m past the end gives the last."""
        if m is None:
            if self.m_selected is None:
                raise ValueError("no iterate has been selected")
            m = self.m_selected
        return FunctionVec(self.grid, self.path[min(m, self.m_max)])

    @property
    def beta_hat(self) -> FunctionVec:
        return self.beta()


def cg_pls(
    moments: EmpiricalMoments,
    m_max: int,
    breakdown_tol: float = DEFAULT_BREAKDOWN_TOL,
    reorthogonalize: bool = True,
) -> PlsFit:
    """Run at most ``m_max`` steps of the PLS conjugate gradient recursion.

    Each step uses alpha_j = <e_j, K e_j> / ||K d_j||^2 and
    gamma_{j+1} = <e_{j+1}, K e_{j+1}> / <e_j, K e_j>. The recursion stops
    early once the curvature <e_j, K e_j> or ||K d_j||^2 collapses relative
    to its initial value, i.e. the Krylov space is numerically exhausted.

    With ``reorthogonalize`` each new pair (d_j, K d_j) is projected off the
    earlier K d_i. In exact arithmetic the K d_i are already orthogonal, so
    this only restores what rounding destroys; without it the recursion
    needs extra steps to reach the exact solution near m = rank.
    """
    if m_max < 1:
        raise ValueError(f"m_max must be >= 1, got {m_max}")
    w = moments.grid.weight
    r = moments.r_hat.values
    apply = moments.apply

    beta = np.zeros_like(r)
    e = r.copy()
    d = e.copy()
    ke = apply(e)
    kd = ke.copy()
    curv = w * float(e @ ke)
    curv0 = curv
    kd2_0 = w * float(kd @ kd)

    path = [beta.copy()]
    res = [math.sqrt(w * float(r @ r))]
    if not curv0 > 0 or not kd2_0 > 0:
        warnings.warn(
            BreakdownWarning("degenerate first step: r_hat = 0, path has only b_0"),
            stacklevel=2,
        )
        return PlsFit(moments.grid, np.array(path), np.array(res), "breakdown",
                      notes=("breakdown: r_hat = 0",))

    reason = "m_max"
    dirs, kdirs = [], []
    for j in range(m_max):
        if reorthogonalize and kdirs:
            kmat = np.array(kdirs)
            c = (kmat @ kd) / np.einsum("ij,ij->i", kmat, kmat)
            kd = kd - c @ kmat
            d = d - c @ np.array(dirs)
        kd2 = w * float(kd @ kd)
        if j > 0 and (curv <= breakdown_tol * curv0 or kd2 <= breakdown_tol**2 * kd2_0):
            reason = "breakdown"
            break
        alpha = curv / kd2
        if reorthogonalize:
            dirs.append(d)
            kdirs.append(kd)
        beta = beta + alpha * d
        e = e - alpha * kd
        ke = apply(e)
        curv_new = w * float(e @ ke)
        gamma = curv_new / curv
        d = e + gamma * d
        kd = ke + gamma * kd
        curv = curv_new
        path.append(beta.copy())
        true_res = r - apply(beta)
        res.append(math.sqrt(w * float(true_res @ true_res)))
    return PlsFit(moments.grid, np.array(path), np.array(res), reason)


def krylov_oracle(
    moments: EmpiricalMoments, m: int, cond_max: float = 1e14, refine: int = 2
) -> FunctionVec:
    """Solve min ||r_hat - K_hat b|| over the m-dimensional Krylov space directly.

    Builds the power basis r_hat, K r_hat, ..., K^{m-1} r_hat (each vector
    rescaled to unit norm), assembles the Hankel normal equations
    M[j, l] = <K p_j, K p_l>, v[j] = <K p_j, r_hat> and solves them with a
    pivoted LU factorisation. ``refine`` rounds of residual correction
    against the least-squares problem recover the accuracy lost by forming
    the normal equations.

    Raises
    ------
    IllConditioned
        If the diagonally equilibrated Hankel matrix has condition number
        above ``cond_max``.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    w = moments.grid.weight
    r = moments.r_hat.values
    basis = []
    q = r
    for _ in range(m):
        nq = math.sqrt(w * float(q @ q))
        if nq == 0:
            raise IllConditioned(m, math.inf)
        p = q / nq
        basis.append(p)
        q = moments.apply(p)
    p_mat = np.array(basis)
    kp = np.array([moments.apply(p) for p in p_mat])
    hankel = w * (kp @ kp.T)
    rhs = w * (kp @ r)
    diag = np.sqrt(np.diag(hankel))
    if np.any(diag == 0):
        raise IllConditioned(m, math.inf)
    scaled = hankel / np.outer(diag, diag)
    cond = float(np.linalg.cond(scaled))
    if not cond <= cond_max:
        raise IllConditioned(m, cond)
    lu = scipy.linalg.lu_factor(scaled)
    coef = scipy.linalg.lu_solve(lu, rhs / diag) / diag
    for _ in range(refine):
        resid = r - coef @ kp
        coef = coef + scipy.linalg.lu_solve(lu, w * (kp @ resid) / diag) / diag
    return FunctionVec(moments.grid, coef @ p_mat)


def stopping_threshold(dataset: Dataset, sigma2: float, config: StoppingConfig) -> float:
    """tau * sigma * sqrt(2 E||X||^2 / (delta n)) with the plug-in E||X||^2."""
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    ex2 = float(np.sum(dataset.x**2) * dataset.grid.weight / dataset.n)
    return config.tau * math.sqrt(sigma2) * math.sqrt(2.0 * ex2 / (config.delta * dataset.n))


def select_m(residual_norms: np.ndarray, threshold: float) -> tuple[int, bool]:
    """First m with residual_norms[m] <= threshold; else (argmin, False)."""
    hit = np.flatnonzero(residual_norms <= threshold)
    if hit.size:
        return int(hit[0]), True
    return int(np.argmin(residual_norms)), False


def _resid_var(dataset: Dataset, beta: np.ndarray) -> float:
    e = dataset.y - dataset.x @ beta * dataset.grid.weight
    return float(np.mean(e * e))


def _select(fit: PlsFit, dataset: Dataset, sigma2: float, config: StoppingConfig):
    s2 = max(sigma2, np.finfo(float).tiny)
    thr = stopping_threshold(dataset, s2, config)
    m, met = select_m(fit.residual_norms, thr)
    return m, met, thr


def estimate_sigma2_iterative(
    dataset: Dataset,
    config: StoppingConfig,
    pilot: FunctionVec,
    fit: PlsFit | None = None,
) -> tuple[float, PlsFit]:
    """Iterate noise-variance estimation and early stopping to a fixed point.

    Starting from the pilot residual variance, each round selects m with the
    current sigma^2, then re-estimates sigma^2 from the residuals of b_m.
    Iteration ends once successive estimates differ by at most ``xi`` or
    after ``k_max + 1`` rounds. The returned fit selects m with the last
    sigma^2 used for a threshold, which is the value returned.

    ``dataset`` should be centered. ``fit`` may carry a precomputed CG
    path; the path does not depend on sigma^2.
    """
    if fit is None:
        moments = compute_moments(dataset)
        fit = cg_pls(moments, config.cap_for(dataset.n), config.breakdown_tol)
    if pilot.grid != dataset.grid:
        raise ValueError("pilot estimate lives on a different grid")

    sigma2 = _resid_var(dataset, pilot.values)
    trace = [sigma2]
    converged = False
    for _ in range(config.k_max + 1):
        used = sigma2
        m, met, thr = _select(fit, dataset, used, config)
        sigma2 = _resid_var(dataset, fit.path[m])
        trace.append(sigma2)
        if abs(sigma2 - used) <= config.xi:
            converged = True
            break
    sigma2 = used

    notes = list(fit.notes)
    if not met:
        notes.append("no_stop: threshold never met, residual argmin used")
        warnings.warn(NoStopWarning(notes[-1]), stacklevel=2)
    if not converged:
        notes.append(f"non_convergence: sigma2 not stable after {config.k_max + 1} rounds")
        warnings.warn(NonConvergenceWarning(notes[-1]), stacklevel=2)
    out = replace(
        fit,
        m_selected=m,
        threshold=thr,
        sigma2_hat=sigma2,
        sigma2_trace=tuple(trace),
        notes=tuple(notes),
    )
    return sigma2, out


def fit_early_stopped(dataset: Dataset, config: StoppingConfig | None = None) -> PlsFit:
    """Adaptive PLS: center, PCA-GCV pilot, sigma^2 iteration, first threshold crossing.

    Breakdown, non-convergence and no-stop conditions are recorded in
    ``notes`` and never raised.
    """
    config = config or StoppingConfig()
    if dataset.n < 2:
        raise ValueError("need at least two observations")
    data = dataset if dataset.centered else center(dataset)
    moments = compute_moments(data)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit = cg_pls(moments, config.cap_for(data.n), config.breakdown_tol)
        pilot, _ = pca_gcv(moments)
        _, fit = estimate_sigma2_iterative(data, config, pilot, fit=fit)
    return fit


_CONFIG_TYPES = {
    "tau": float,
    "delta": float,
    "xi": float,
    "k_max": int,
    "m_cap": int,
    "breakdown_tol": float,
}


def load_config(path, extra_keys: dict | None = None) -> dict:
    """Parse a ``key = value`` file. ``#`` starts a comment.

    Known stopping keys are converted to their types; keys listed in
    ``extra_keys`` (name -> type) are accepted as well. Unknown keys raise.
    """
    types = dict(_CONFIG_TYPES)
    if extra_keys:
        types.update(extra_keys)
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = types[key](value)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad value for {key}: {value!r}")
    return out


def write_fit(fit: PlsFit, out_dir, extra: dict | None = None) -> None:
    """Write fit_trace.csv, beta_hat.csv and fit_summary.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "fit_trace.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "residual_norm"])
        for m, rn in enumerate(fit.residual_norms):
            w.writerow([m, repr(float(rn))])
    beta = fit.beta()
    with (out / "beta_hat.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "beta"])
        for s, b in zip(fit.grid.points, beta.values):
            w.writerow([repr(float(s)), repr(float(b))])
    summary = {
        "m_selected": fit.m_selected,
        "sigma2_hat": fit.sigma2_hat,
        "threshold": fit.threshold,
        "sigma2_trace": list(fit.sigma2_trace),
        "stop_reason": fit.stop_reason,
        "m_max": fit.m_max,
        "t_count": fit.grid.t_count,
        "warnings": list(fit.notes),
    }
    if extra:
        summary.update(extra)
    (out / "fit_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
