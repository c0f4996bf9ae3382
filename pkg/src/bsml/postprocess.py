"""Row selection, rank estimation and the rank-reduced estimate.

Selection solves a group-lasso-penalized projection of the posterior mean
in one parallel pass: each row is shrunk independently, starting from the
posterior mean itself, so the partial residual for row ``j`` is
``X_j Cbar^(j)`` and the update has the closed form

    Chat^(j) = (1 - mu_j / (2 ||X_j||^2 ||Cbar^(j)||))_+ Cbar^(j).

Default penalties are ``mu_j = ||Cbar^(j)||^-2``: rows the posterior mean
has already shrunk toward zero pay a penalty that grows as they shrink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

#: Row norms below this are treated as exactly zero.
ROW_NORM_FLOOR = 1e-14


@dataclass(frozen=True)
class SparseEstimate:
    C_R: np.ndarray
    selected: tuple[int, ...]
    mu: np.ndarray


@dataclass(frozen=True)
class BsmlEstimate:
    C_RR: np.ndarray
    rank_hat: int
    singular_values: np.ndarray
    omega: float


def _check_shapes(C: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    C = np.asarray(C, dtype=float)
    X = np.asarray(X, dtype=float)
    if C.ndim != 2 or X.ndim != 2 or X.shape[1] != C.shape[0]:
        raise ContractError(f"X {X.shape} and coefficient matrix {C.shape} do not conform")
    return C, X


def default_penalties(C_mean) -> np.ndarray:
    """``mu_j = ||Cbar^(j)||^-2``; ``+inf`` for rows that are numerically zero."""
    norms = np.linalg.norm(np.asarray(C_mean, dtype=float), axis=1)
    mu = np.full(norms.shape, np.inf)
    ok = norms >= ROW_NORM_FLOOR
    mu[ok] = norms[ok] ** -2.0
    return mu


def shrink_factors(C_mean, X, mu) -> np.ndarray:
    """Per-row multiplier ``(1 - mu_j / (2 ||X_j||^2 ||Cbar^(j)||))_+``."""
    C, X = _check_shapes(C_mean, X)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (C.shape[0],):
        raise ContractError(f"mu must have length {C.shape[0]}")
    if np.any(np.isnan(mu)) or np.any(mu <= 0):
        raise ContractError("penalties must be positive (or +inf)")
    col_sq = np.sum(X * X, axis=0)
    norms = np.linalg.norm(C, axis=1)
    factor = np.zeros(C.shape[0])
    live = (col_sq > 0) & (norms >= ROW_NORM_FLOOR) & np.isfinite(mu)
    factor[live] = np.maximum(1.0 - mu[live] / (2.0 * col_sq[live] * norms[live]), 0.0)
    return factor


def select_rows(C_mean, X, mu=None) -> SparseEstimate:
    """Single-pass group soft thresholding of the rows of ``C_mean``."""
    C, X = _check_shapes(C_mean, X)
    if mu is None:
        mu = default_penalties(C)
    mu = np.asarray(mu, dtype=float)
    factor = shrink_factors(C, X, mu)
    C_R = factor[:, None] * C
    selected = tuple(int(j) for j in np.flatnonzero(factor > 0))
    return SparseEstimate(C_R=C_R, selected=selected, mu=mu)


def estimate_rank(C_R, X, Y) -> tuple[int, float, np.ndarray]:
    """Count singular values of ``X C_R`` strictly above ``s_max(Y - X C_R)``.

    Values below the usual numerical-rank tolerance are never counted.

    Returns ``(rank_hat, omega, singular_values)`` with the singular values
    in decreasing order, zero-padded to length ``q``.
    """
    C_R, X = _check_shapes(C_R, X)
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (X.shape[0], C_R.shape[1]):
        raise ContractError(f"Y has shape {Y.shape}, expected {(X.shape[0], C_R.shape[1])}")
    fitted = X @ C_R
    q = C_R.shape[1]
    s = np.zeros(q)
    sv = np.linalg.svd(fitted, compute_uv=False)
    s[: sv.shape[0]] = sv
    omega = float(np.linalg.svd(Y - fitted, compute_uv=False)[0])
    # singular values at roundoff level never count, even when omega is 0
    floor = s[0] * max(fitted.shape) * np.finfo(float).eps
    return int(np.sum(s > max(omega, floor))), omega, s


def truncate_svd(S: np.ndarray, rank: int) -> np.ndarray:
    """Best Frobenius approximation of ``S`` with rank at most ``rank``."""
    if rank <= 0 or S.size == 0:
        return np.zeros_like(S)
    U, s, Vt = np.linalg.svd(S, full_matrices=False)
    k = min(rank, s.shape[0])
    return (U[:, :k] * s[:k]) @ Vt[:k]


def reduce_rank(C_R, selected, rank_hat: int, *, singular_values=None,
                omega: float = float("nan")) -> BsmlEstimate:
    """Truncate the nonzero-row block of ``C_R`` to ``rank_hat`` and reinsert zero rows."""
    C_R = np.asarray(C_R, dtype=float)
    if rank_hat < 0:
        raise ContractError("rank_hat must be >= 0")
    rows = np.asarray(sorted(selected), dtype=int)
    C_RR = np.zeros_like(C_R)
    if rows.size and rank_hat > 0:
        C_RR[rows] = truncate_svd(C_R[rows], rank_hat)
    if singular_values is None:
        singular_values = np.zeros(C_R.shape[1])
    return BsmlEstimate(C_RR=C_RR, rank_hat=int(rank_hat),
                        singular_values=np.asarray(singular_values, dtype=float),
                        omega=float(omega))


def bsml(C_mean, X, Y, mu=None) -> tuple[SparseEstimate, BsmlEstimate]:
    """Selection, rank estimation and rank reduction of a posterior mean."""
    sparse = select_rows(C_mean, X, mu)
    rank_hat, omega, s = estimate_rank(sparse.C_R, X, Y)
    reduced = reduce_rank(sparse.C_R, sparse.selected, rank_hat,
                          singular_values=s, omega=omega)
    return sparse, reduced


def selection_frequencies(draws, X, mu=None) -> np.ndarray:
    """Fraction of posterior draws in which each row survives selection.

    With ``mu=None`` each draw gets its own default penalties.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 3:
        raise ContractError("draws must have shape (kept, p, q)")
    counts = np.zeros(draws.shape[1])
    for C in draws:
        counts += shrink_factors(C, X, default_penalties(C) if mu is None else mu) > 0
    return counts / draws.shape[0]


def subgradient_residuals(C_mean, X, estimate: SparseEstimate) -> tuple[np.ndarray, np.ndarray]:
    """Optimality checks for the single-pass solution.

    Returns ``(selected_residual, zero_margin)``: for selected rows the norm
    of ``2 X_j^T (X_j Chat^(j) - R_j) + mu_j Chat^(j)/||Chat^(j)||`` (should
    be ~0); for zeroed rows ``mu_j - 2 ||X_j^T R_j||`` (should be >= 0),
    with ``R_j = X_j Cbar^(j)``.
    """
    C, X = _check_shapes(C_mean, X)
    col_sq = np.sum(X * X, axis=0)
    resid = np.zeros(C.shape[0])
    margin = np.full(C.shape[0], np.inf)
    for j in range(C.shape[0]):
        g = col_sq[j] * C[j]  # X_j^T R_j
        row = estimate.C_R[j]
        nrm = np.linalg.norm(row)
        if j in estimate.selected:
            r = 2.0 * (col_sq[j] * row - g) + estimate.mu[j] * row / nrm
            resid[j] = np.linalg.norm(r)
        else:
            margin[j] = estimate.mu[j] - 2.0 * np.linalg.norm(g)
    return resid, margin
