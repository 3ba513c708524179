"""Monte Carlo laboratory: the three simulation models, error metrics and campaigns.

Every random draw comes from a Philox stream keyed by (seed, rep, role), so a
replication can be regenerated alone and campaigns can be split across
processes without changing any number.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .cgpls import StoppingConfig, cg_pls, fit_early_stopped
from .fspace import Dataset, FunctionVec, Grid, center, compute_moments, inner, make_uniform_grid
from .inference import (
    DEFAULT_M,
    SPECTRUM_TERMS,
    Method,
    cosine_basis,
    prepare_inference,
    rng_stream,
    simulate_weighted_chi2,
    test_statistic,
)
from .spectral import pca_gcv, spectrum_k_hat

__all__ = [
    "ModelId",
    "ModelSpec",
    "SimReport",
    "derive_seed",
    "simulate_dataset",
    "ise",
    "mspe",
    "population_weights",
    "estimation_campaign",
    "power_curve",
    "null_distribution_sample",
    "shift_function",
]

# stream roles inside (seed, rep, role)
ROLE_SCORES = 0
ROLE_NOISE = 1
ROLE_HOLDOUT_SCORES = 4
ROLE_HOLDOUT_NOISE = 5
ROLE_TEST_SEED = 6
ROLE_REFERENCE = 7


class ModelId(str, Enum):
    M1 = "m1"
    M2 = "m2"
    M3 = "m3"


def _m1_beta(j):
    return 4.0 * j**-2.7


def _m1_lambda(j):
    return 2.0 * j**-1.1


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Series model X = sum_j sqrt(lambda_j) u_j v_j, beta = sum_j beta_j v_j.

    The basis is v_1 = 1, v_j(s) = sqrt(2) cos((j - 1) pi s).
    """

    model_id: ModelId
    j_max: int
    t_count: int
    beta_coeffs: np.ndarray
    lambdas: np.ndarray
    noise_sd: float = 1.0

    def __post_init__(self):
        b = np.array(self.beta_coeffs, dtype=float)
        lam = np.array(self.lambdas, dtype=float)
        if b.shape != (self.j_max,) or lam.shape != (self.j_max,):
            raise ValueError("beta_coeffs and lambdas must have length j_max")
        if np.any(lam < 0):
            raise ValueError("lambdas must be non-negative")
        if not self.noise_sd >= 0:
            raise ValueError("noise_sd must be >= 0")
        b.setflags(write=False)
        lam.setflags(write=False)
        object.__setattr__(self, "model_id", ModelId(self.model_id))
        object.__setattr__(self, "beta_coeffs", b)
        object.__setattr__(self, "lambdas", lam)

    @classmethod
    def make(cls, model_id, j_max: int = 100, t_count: int = 200, noise_sd: float = 1.0) -> "ModelSpec":
        model_id = ModelId(model_id)
        j = np.arange(1, j_max + 1, dtype=float)
        beta = _m1_beta(j)
        lam = _m1_lambda(j)
        if model_id is ModelId.M2:
            beta[:5] = 4.0
        elif model_id is ModelId.M3:
            lam[:5] = 2.0
        return cls(model_id, j_max, t_count, beta, lam, noise_sd)

    @classmethod
    def m1(cls, **kw) -> "ModelSpec":
        return cls.make(ModelId.M1, **kw)

    @classmethod
    def m2(cls, **kw) -> "ModelSpec":
        return cls.make(ModelId.M2, **kw)

    @classmethod
    def m3(cls, **kw) -> "ModelSpec":
        return cls.make(ModelId.M3, **kw)

    @property
    def grid(self) -> Grid:
        return make_uniform_grid(self.t_count)

    def basis(self) -> np.ndarray:
        return cosine_basis(self.grid, self.j_max)

    def beta(self) -> FunctionVec:
        return FunctionVec(self.grid, self.beta_coeffs @ self.basis())


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit integer seed derived from (seed, *key)."""
    state = np.random.SeedSequence([int(seed), *map(int, key)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def simulate_dataset(
    spec: ModelSpec, n: int, seed: int, rep: int = 0, holdout: bool = False
) -> tuple[Dataset, FunctionVec]:
    """Draw n curves and responses; ``holdout`` uses independent streams of the same key."""
    if n < 2:
        raise ValueError("n must be >= 2")
    roles = (ROLE_HOLDOUT_SCORES, ROLE_HOLDOUT_NOISE) if holdout else (ROLE_SCORES, ROLE_NOISE)
    u = rng_stream(seed, rep, roles[0]).standard_normal((n, spec.j_max))
    eps = rng_stream(seed, rep, roles[1]).standard_normal(n)
    grid = spec.grid
    basis = spec.basis()
    x = (u * np.sqrt(spec.lambdas)) @ basis
    beta = spec.beta()
    y = x @ beta.values * grid.weight + spec.noise_sd * eps
    return Dataset(grid, x, y), beta


def ise(beta_hat: FunctionVec, beta_true: FunctionVec) -> float:
    d = beta_hat - beta_true
    return inner(d, d)


def mspe(fit_beta: FunctionVec, holdout: Dataset) -> float:
    e = holdout.y - holdout.predict(fit_beta)
    return float(np.mean(e * e))


def population_weights(spec: ModelSpec) -> np.ndarray:
    """Eigenvalues of the discretized sigma^2 K for the model, non-increasing.

    On the grid, K = sum_j lambda_j v_j (x) v_j with v_j sampled, so its
    nonzero spectrum is that of Lambda^1/2 G Lambda^1/2 with G the grid Gram
    matrix of the basis.
    """
    basis = spec.basis()
    gram = basis @ basis.T * spec.grid.weight
    root = np.sqrt(spec.lambdas)
    ev = np.linalg.eigvalsh(root[:, None] * gram * root[None, :])[::-1]
    return spec.noise_sd**2 * np.clip(ev, 0.0, None)


def shift_function(grid: Grid) -> FunctionVec:
    """The identity s -> s on the grid, the direction of the local alternatives."""
    return FunctionVec(grid, grid.points)


@dataclass(eq=False)
class SimReport:
    """Per-replication records plus a summary; ``failures`` lists (rep, message)."""

    kind: str
    model_id: str
    n: int
    seed: int
    reps: int
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    columns: tuple = ()
    reference: np.ndarray | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    @property
    def stem(self) -> str:
        return f"{self.kind}_{self.model_id}_n{self.n}_seed{self.seed}"

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{self.stem}.csv"
        json_path = out / f"{self.stem}.json"
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.columns), extrasaction="ignore")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        meta = {
            "kind": self.kind,
            "model": self.model_id,
            "n": self.n,
            "seed": self.seed,
            "reps": self.reps,
            "records": len(self.records),
            "failures": [{"rep": r, "error": msg} for r, msg in self.failures],
            "summary": self.summary,
        }
        json_path.write_text(json.dumps(meta, indent=2, default=_json_default) + "\n", encoding="utf-8")
        return csv_path, json_path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _quartiles(v: np.ndarray) -> dict:
    if v.size == 0:
        return {"q25": math.nan, "median": math.nan, "q75": math.nan, "mean": math.nan}
    q = np.quantile(v, [0.25, 0.5, 0.75])
    return {"q25": float(q[0]), "median": float(q[1]), "q75": float(q[2]), "mean": float(v.mean())}


def _run_reps(task: Callable, reps: int, threads: int = 1) -> tuple[list, list]:
    """Run task(rep) for every rep; merge by rep index regardless of completion order."""
    results, failures = [], []
    if threads <= 1 or reps <= 1:
        outs = map(_guarded, [task] * reps, range(reps))
    else:
        pool = ProcessPoolExecutor(max_workers=threads)
        outs = pool.map(_guarded, [task] * reps, range(reps), chunksize=max(1, reps // (4 * threads)))
    try:
        for rep, (ok, val) in enumerate(outs):
            if ok:
                results.append(val)
            else:
                failures.append((rep, val))
    finally:
        if threads > 1 and reps > 1:
            pool.shutdown()
    return results, failures


def _guarded(task, rep):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return True, task(rep)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        return False, f"{type(exc).__name__}: {exc}"


# -- estimation ---------------------------------------------------------------

ESTIMATION_COLUMNS = (
    "rep", "seed", "m_hat", "sigma2_hat", "stop_notes",
    "ise_pls", "ise_pca", "mspe_pls", "mspe_pca", "m_pca",
)


def _estimation_rep(spec, n, seed, config, rep):
    raw, beta = simulate_dataset(spec, n, seed, rep)
    holdout, _ = simulate_dataset(spec, n, seed, rep, holdout=True)
    data = center(raw)
    fit = fit_early_stopped(data, config)
    pca_beta, m_pca = pca_gcv(compute_moments(data))
    # predict the holdout with the training means
    holdout = Dataset(holdout.grid, holdout.x - raw.x.mean(axis=0), holdout.y - raw.y.mean())
    return {
        "rep": rep,
        "seed": seed,
        "m_hat": int(fit.m_selected),
        "sigma2_hat": float(fit.sigma2_hat),
        "stop_notes": ";".join(n_.split(":")[0] for n_ in fit.notes),
        "ise_pls": ise(fit.beta_hat, beta),
        "ise_pca": ise(pca_beta, beta),
        "mspe_pls": mspe(fit.beta_hat, holdout),
        "mspe_pca": mspe(pca_beta, holdout),
        "m_pca": int(m_pca),
    }


def estimation_campaign(
    spec: ModelSpec,
    n: int,
    reps: int,
    seed: int,
    config: StoppingConfig | None = None,
    threads: int = 1,
) -> SimReport:
    """Early-stopped PLS against PCA with GCV-chosen m on the same draws."""
    config = config or StoppingConfig()
    task = partial(_estimation_rep, spec, n, seed, config)
    records, failures = _run_reps(task, reps, threads)
    report = SimReport("simulate", spec.model_id.value, n, seed, reps, records,
                    failures=failures, columns=ESTIMATION_COLUMNS)
    summary = {k: _quartiles(report.column(k)) for k in
               ("m_hat", "sigma2_hat", "ise_pls", "ise_pca", "mspe_pls", "mspe_pca", "m_pca")}
    summary["no_stop_count"] = sum("no_stop" in r["stop_notes"] for r in records)
    summary["non_convergence_count"] = sum("non_convergence" in r["stop_notes"] for r in records)
    report.summary = summary
    return report


# -- power --------------------------------------------------------------------

POWER_COLUMNS = ("rep", "seed", "test_seed", "delta", "t_n", "critical_value", "p_value", "reject")


def _power_rep(spec, n, seed, deltas, alpha, m, method, n_sims, n_boot, rep):
    data, beta = simulate_dataset(spec, n, seed, rep)
    test_seed = derive_seed(seed, rep, ROLE_TEST_SEED)
    setup = prepare_inference(data, alpha, m, method, test_seed, n_sims, n_boot)
    shift = shift_function(data.grid)
    out = []
    for d in deltas:
        o = setup.outcome(beta + float(d) * shift)
        out.append({
            "rep": rep, "seed": seed, "test_seed": test_seed, "delta": float(d),
            "t_n": o.t_n, "critical_value": o.critical_value, "p_value": o.p_value,
            "reject": int(o.reject),
        })
    return out


def power_curve(
    spec: ModelSpec,
    deltas: Sequence[float],
    n: int,
    reps: int,
    alpha: float = 0.05,
    m: int | None = None,
    seed: int = 0,
    method: Method | str = Method.SIMULATED_SPECTRUM,
    n_sims: int = 50_000,
    n_boot: int = 500,
    threads: int = 1,
) -> SimReport:
    """Rejection frequency of H0: beta = true beta + delta * s for every delta.

    All deltas share each replication's dataset and critical value, so the
    curve is free of between-delta simulation noise.
    """
    deltas = [float(d) for d in deltas]
    task = partial(_power_rep, spec, n, seed, deltas, alpha, m, Method(method), n_sims, n_boot)
    per_rep, failures = _run_reps(task, reps, threads)
    records = [r for rows in per_rep for r in rows]
    report = SimReport("power", spec.model_id.value, n, seed, reps, records,
                    failures=failures, columns=POWER_COLUMNS)
    k = len(per_rep)
    rates = []
    for d in deltas:
        rej = np.array([r["reject"] for r in records if r["delta"] == d], dtype=float)
        rate = float(rej.mean()) if rej.size else math.nan
        se = math.sqrt(rate * (1 - rate) / k) if k else math.nan
        rates.append({"delta": d, "rejection_rate": rate, "se": se, "reps": k})
    report.summary = {"alpha": alpha, "m": m, "method": Method(method).value, "curve": rates}
    return report


# -- null distribution ---------------------------------------------------------

NULL_COLUMNS = ("rep", "seed", "t_n", "m_used")


def _null_rep(spec, n, seed, m, rep):
    data, beta = simulate_dataset(spec, n, seed, rep)
    data = center(data)
    moments = compute_moments(data)
    rank = spectrum_k_hat(moments).rank
    fit = cg_pls(moments, max(1, min(m, rank)))
    t = test_statistic(moments, FunctionVec(data.grid, fit.path[-1]), beta)
    return {"rep": rep, "seed": seed, "t_n": t, "m_used": fit.m_max}


def null_distribution_sample(
    spec: ModelSpec,
    n: int,
    reps: int,
    m: int = DEFAULT_M,
    seed: int = 0,
    n_reference: int = 50_000,
    threads: int = 1,
) -> SimReport:
    """T_n at the true slope over ``reps`` datasets plus the asymptotic reference.

    The reference draws sum_j omega_j Z_j^2 with the population weights
    (top 100 eigenvalues of sigma^2 K). ``summary`` holds the two-sample
    Kolmogorov-Smirnov distance and the reference sample itself sits in
    ``reference``.
    """
    task = partial(_null_rep, spec, n, seed, m)
    records, failures = _run_reps(task, reps, threads)
    report = SimReport("nulldist", spec.model_id.value, n, seed, reps, records,
                    failures=failures, columns=NULL_COLUMNS)
    weights = population_weights(spec)[:SPECTRUM_TERMS]
    reference = simulate_weighted_chi2(weights, n_reference, rng_stream(seed, 0, ROLE_REFERENCE))
    t = report.column("t_n")
    ks = stats.ks_2samp(t, reference) if t.size else None
    report.summary = {
        "m": m,
        "n_reference": n_reference,
        "ks_distance": float(ks.statistic) if ks else math.nan,
        "ks_pvalue": float(ks.pvalue) if ks else math.nan,
        "t_n": _quartiles(t),
        "reference": _quartiles(reference),
        "weight_sum": float(weights.sum()),
        "reference_quantiles": {
            str(p): float(np.quantile(reference, p)) for p in (0.5, 0.9, 0.95, 0.99)
        },
    }
    report.reference = reference
    return report
