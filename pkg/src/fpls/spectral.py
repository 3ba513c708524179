"""Spectra of the empirical covariance and variance operators.

Both operators have the form (1/n) sum_i c_i^2 X_i (x) X_i, so their nonzero
spectrum is that of the n x n matrix c_i c_j <X_i, X_j> / n. It is obtained
from a thin SVD of the weighted data matrix, which gives the Gram
eigenvalues (squared singular values) and the grid eigenfunctions (right
singular vectors) in one factorization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fspace import Dataset, EmpiricalMoments, FunctionVec, Grid, GridMismatchError

__all__ = [
    "OperatorSpectrum",
    "RANK_RTOL",
    "spectrum_k_hat",
    "variance_spectrum",
    "pca_estimate",
    "pca_gcv",
    "write_spectrum_csv",
]

#: eigenvalues below this fraction of the largest count as zero
RANK_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class OperatorSpectrum:
    """Nonzero eigenvalues (non-increasing) and grid-orthonormal eigenfunctions.

    ``scores`` holds the matching unit eigenvectors of the n x n Gram-type
    matrix, one column per eigenvalue.
    """

    grid: Grid
    eigenvalues: np.ndarray
    vectors: np.ndarray  # (rank, t_count) eigenfunction values
    scores: np.ndarray  # (n, rank)

    @property
    def rank(self) -> int:
        return len(self.eigenvalues)

    @property
    def eigenfunctions(self) -> list[FunctionVec]:
        return [FunctionVec(self.grid, v) for v in self.vectors]


def _weighted_spectrum(x: np.ndarray, grid: Grid, c: np.ndarray | None) -> OperatorSpectrum:
    n = x.shape[0]
    a = x * np.sqrt(grid.weight / n)
    if c is not None:
        a = a * c[:, None]
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    lam = s * s
    if lam.size == 0 or lam[0] <= 0:
        keep = 0
    else:
        keep = int(np.count_nonzero(lam > RANK_RTOL * lam[0]))
    vectors = vt[:keep] / np.sqrt(grid.weight)
    return OperatorSpectrum(grid, lam[:keep].copy(), vectors, u[:, :keep])


def spectrum_k_hat(moments: EmpiricalMoments) -> OperatorSpectrum:
    """Nonzero eigenpairs of K_hat = (1/n) sum X_i (x) X_i."""
    return _weighted_spectrum(moments.dataset.x, moments.grid, None)


def variance_spectrum(dataset: Dataset, beta_hat: FunctionVec, dof: int = 0) -> OperatorSpectrum:
    """Nonzero spectrum of V_hat = (1/n) sum e_i^2 X_i (x) X_i.

    e_i = y_i - <X_i, beta_hat> are the residuals at ``beta_hat``. A positive
    ``dof`` rescales every e_i^2 by n / (n - dof), the usual correction for
    residuals of a fit that used ``dof`` degrees of freedom.
    """
    resid = dataset.y - dataset.predict(beta_hat)
    if dof:
        if not 0 <= dof < dataset.n:
            raise ValueError(f"dof must lie in [0, n), got {dof}")
        resid = resid * np.sqrt(dataset.n / (dataset.n - dof))
    return _weighted_spectrum(dataset.x, dataset.grid, resid)


def _check_rank(spectrum: OperatorSpectrum, m: int):
    if m < 0 or m > spectrum.rank:
        raise ValueError(f"m={m} exceeds the retained rank {spectrum.rank}")


def pca_estimate(
    moments: EmpiricalMoments, m: int, spectrum: OperatorSpectrum | None = None
) -> FunctionVec:
    """Spectral cut-off estimator sum_{j<=m} <r_hat, v_j> / lambda_j * v_j."""
    if spectrum is None:
        spectrum = spectrum_k_hat(moments)
    if spectrum.grid != moments.grid:
        raise GridMismatchError("spectrum and moments live on different grids")
    _check_rank(spectrum, m)
    v = spectrum.vectors[:m]
    coef = (v @ moments.r_hat.values) * moments.grid.weight / spectrum.eigenvalues[:m]
    return FunctionVec(moments.grid, coef @ v)


def pca_gcv(
    moments: EmpiricalMoments,
    m_max: int | None = None,
    spectrum: OperatorSpectrum | None = None,
) -> tuple[FunctionVec, int]:
    """PCA estimator with m minimising GCV(m) = (RSS_m / n) / (1 - m/n)^2.

    Candidates are m = 1..min(20, n - 1, rank) unless ``m_max`` says otherwise.
    In-sample fitted values of the m-component fit are the projection of y on
    the leading m Gram eigenvectors, so every candidate costs O(n).
    """
    if spectrum is None:
        spectrum = spectrum_k_hat(moments)
    n = moments.n
    y = moments.dataset.y
    cap = min(20 if m_max is None else m_max, n - 1, spectrum.rank)
    if cap < 1:
        return moments.grid.zeros(), 0
    proj = spectrum.scores[:, :cap].T @ y
    rss = float(y @ y) - np.cumsum(proj**2)
    ms = np.arange(1, cap + 1)
    gcv = (np.maximum(rss, 0.0) / n) / (1.0 - ms / n) ** 2
    m = int(ms[np.argmin(gcv)])
    return pca_estimate(moments, m, spectrum), m


def write_spectrum_csv(
    spectrum: OperatorSpectrum, path, eigenfunctions_path=None
) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["j", "eigenvalue"])
        for j, lam in enumerate(spectrum.eigenvalues, start=1):
            w.writerow([j, repr(float(lam))])
    if eigenfunctions_path is not None:
        np.savetxt(eigenfunctions_path, spectrum.vectors, delimiter=",")
