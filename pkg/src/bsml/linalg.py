"""Kronecker-structured operators and exact Gaussian samplers.

Vectorization is column-major throughout: ``vec(V)`` stacks the columns
of ``V``. With numpy's row-major storage that is ``V.T.ravel()``, so an
operator ``M kron N`` acting on ``vec(V)`` reads its input as
``x.reshape(M.shape[1], N.shape[1])`` (which is ``V.T``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import ContractError, MaterializationError, NumericalError

logger = logging.getLogger(__name__)

#: Largest number of entries an operator may densify (``rows * cols``).
MATERIALIZATION_BUDGET = 1 << 22

#: Relative diagonal jitter used for the single Cholesky retry.
CHOLESKY_JITTER = 1e-10


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ContractError(f"{name} has non-finite entries")
    return M


class LinearMap:
    """A linear operator given by its forward and adjoint actions.

    Subclasses override :meth:`weighted_gram` and :meth:`normal_matrix`
    when structure allows something cheaper than column-by-column probing.
    """

    def __init__(self, rows: int, cols: int,
                 forward: Callable[[np.ndarray], np.ndarray],
                 adjoint: Callable[[np.ndarray], np.ndarray],
                 budget: int | None = None):
        if rows < 1 or cols < 1:
            raise ContractError(f"operator shape must be positive, got {rows}x{cols}")
        self.rows = int(rows)
        self.cols = int(cols)
        self._forward = forward
        self._adjoint = adjoint
        self.budget = MATERIALIZATION_BUDGET if budget is None else int(budget)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.cols,):
            raise ContractError(f"forward expects length {self.cols}, got shape {x.shape}")
        return self._forward(x)

    def adjoint(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.rows,):
            raise ContractError(f"adjoint expects length {self.rows}, got shape {y.shape}")
        return self._adjoint(y)

    def to_dense(self) -> np.ndarray:
        if self.rows * self.cols > self.budget:
            raise MaterializationError(
                f"refusing to densify {self.rows}x{self.cols} operator "
                f"(budget {self.budget} entries)")
        out = np.empty((self.rows, self.cols))
        e = np.zeros(self.cols)
        for k in range(self.cols):
            e[k] = 1.0
            out[:, k] = self._forward(e)
            e[k] = 0.0
        return out

    def weighted_gram(self, weights) -> np.ndarray:
        """Return ``F diag(weights) F^T`` (rows x rows) without forming ``F``.

        Probes one row-space unit vector at a time, so auxiliary storage is
        O(rows^2 + cols).
        """
        w = np.asarray(weights, dtype=float)
        out = np.empty((self.rows, self.rows))
        e = np.zeros(self.rows)
        for k in range(self.rows):
            e[k] = 1.0
            out[:, k] = self._forward(w * self._adjoint(e))
            e[k] = 0.0
        return 0.5 * (out + out.T)

    def normal_matrix(self) -> np.ndarray:
        """Return ``F^T F`` (cols x cols). Intended for small ``cols``."""
        out = np.empty((self.cols, self.cols))
        e = np.zeros(self.cols)
        for k in range(self.cols):
            e[k] = 1.0
            out[:, k] = self._adjoint(self._forward(e))
            e[k] = 0.0
        return 0.5 * (out + out.T)


class DenseMap(LinearMap):
    """Operator backed by an explicit matrix."""

    def __init__(self, F):
        F = _as_matrix(F, "F")
        self.matrix = F
        super().__init__(F.shape[0], F.shape[1], F.__matmul__, F.T.__matmul__)

    def to_dense(self) -> np.ndarray:
        return self.matrix.copy()

    def weighted_gram(self, weights) -> np.ndarray:
        F = self.matrix
        return (F * np.asarray(weights, dtype=float)) @ F.T

    def normal_matrix(self) -> np.ndarray:
        return self.matrix.T @ self.matrix


class KronMap(LinearMap):
    """The operator ``M kron N`` acting on column-major vectorizations.

    ``forward(vec(V)) = vec(N V M^T)`` for ``V`` of shape
    ``(N.shape[1], M.shape[1])``; the Kronecker product itself is never
    formed unless :meth:`to_dense` is called within budget.
    """

    def __init__(self, M, N, budget: int | None = None):
        self.M = _as_matrix(M, "M")
        self.N = _as_matrix(N, "N")
        r1, c1 = self.M.shape
        r2, c2 = self.N.shape
        super().__init__(r1 * r2, c1 * c2, self._fwd, self._adj, budget)

    def _fwd(self, x: np.ndarray) -> np.ndarray:
        V_t = x.reshape(self.M.shape[1], self.N.shape[1])
        return (self.M @ V_t @ self.N.T).ravel()

    def _adj(self, y: np.ndarray) -> np.ndarray:
        U_t = y.reshape(self.M.shape[0], self.N.shape[0])
        return (self.M.T @ U_t @ self.N).ravel()

    def to_dense(self) -> np.ndarray:
        if self.rows * self.cols > self.budget:
            raise MaterializationError(
                f"refusing to densify {self.rows}x{self.cols} Kronecker operator "
                f"(budget {self.budget} entries)")
        return np.kron(self.M, self.N)

    def weighted_gram(self, weights) -> np.ndarray:
        # Entry [(i,a),(k,b)] = sum_h N[a,h] N[b,h] (M diag(W[:,h]) M^T)[i,k]
        # with W = weights.reshape(c1, c2); one r1 x r1 Gram per column of N.
        M, N = self.M, self.N
        r1, c1 = M.shape
        r2, c2 = N.shape
        W = np.asarray(weights, dtype=float).reshape(c1, c2)
        grams = np.empty((c2, r1, r1))
        for h in range(c2):
            np.matmul(M * W[:, h], M.T, out=grams[h])
        outer = N.T[:, :, None] * N.T[:, None, :]
        full = grams.reshape(c2, r1 * r1).T @ outer.reshape(c2, r2 * r2)
        full = full.reshape(r1, r1, r2, r2).transpose(0, 2, 1, 3)
        return np.ascontiguousarray(full).reshape(r1 * r2, r1 * r2)

    def normal_matrix(self) -> np.ndarray:
        return np.kron(self.M.T @ self.M, self.N.T @ self.N)


def kron_identity_left(M, q: int, budget: int | None = None) -> KronMap:
    """Operator ``M kron I_q``: maps ``vec(V)`` to ``vec(V M^T)``."""
    if int(q) < 1:
        raise ContractError(f"q must be >= 1, got {q}")
    return KronMap(M, np.eye(int(q)), budget)


def kron_right_identity(X, A, budget: int | None = None) -> KronMap:
    """Operator ``X kron A``.

    With ``beta = vec(B^T)`` this gives ``forward(beta) = vec((X B A^T)^T)``,
    i.e. the row-stacked fitted values of ``Y = X B A^T``.
    """
    return KronMap(X, A, budget)


@dataclass(frozen=True)
class DiagonalScale:
    """Strictly positive diagonal covariance, stored as its entries."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim != 1:
            raise ContractError("DiagonalScale entries must be a vector")
        if not np.all(np.isfinite(e)) or np.any(e <= 0):
            raise ContractError("DiagonalScale entries must be finite and > 0")
        object.__setattr__(self, "entries", e)

    def __len__(self) -> int:
        return self.entries.shape[0]


def cholesky_lower(S: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor with one jittered retry.

    Raises :class:`NumericalError` if ``S`` is non-finite or still not
    positive definite after adding ``1e-10 * mean(diag)`` to the diagonal.
    """
    S = np.asarray(S, dtype=float)
    if not np.all(np.isfinite(S)):
        raise NumericalError(f"{name} has non-finite entries", quantity=name)
    L, info = lapack.dpotrf(S, lower=1, clean=1, overwrite_a=0)
    if info == 0:
        return L
    jitter = CHOLESKY_JITTER * float(np.mean(np.diag(S)))
    logger.warning("Cholesky of %s failed (info=%d); retrying with jitter %.3g",
                   name, info, jitter)
    S = S + jitter * np.eye(S.shape[0])
    L, info = lapack.dpotrf(S, lower=1, clean=1, overwrite_a=1)
    if info != 0:
        raise NumericalError(f"{name} is not positive definite (info={info})",
                             quantity=name)
    return L


def spd_solve(S: np.ndarray, b: np.ndarray, name: str = "matrix") -> np.ndarray:
    L = cholesky_lower(S, name)
    x, info = lapack.dpotrs(L, b, lower=1)
    if info != 0:
        raise NumericalError(f"back-substitution failed for {name}", quantity=name)
    return x


def _coerce_scale(Lambda) -> np.ndarray:
    if isinstance(Lambda, DiagonalScale):
        return Lambda.entries
    return DiagonalScale(np.asarray(Lambda, dtype=float)).entries


def sample_structured_gaussian(Xtilde: LinearMap, Lambda, ytilde, rng: np.random.Generator,
                               *, zero_noise: bool = False) -> np.ndarray:
    """One exact draw from ``N(Omega^-1 F^T y, Omega^-1)``, ``Omega = F^T F + Lambda^-1``.

    Works in the data dimension: only the ``m x m`` matrix
    ``F Lambda F^T + I`` is factorized, never a ``d x d`` one.

    Parameters
    ----------
    Xtilde : LinearMap
        The (already whitened) design operator ``F`` of shape ``m x d``.
    Lambda : DiagonalScale or array
        Prior variances, length ``d``.
    ytilde : array
        Whitened response, length ``m``.
    rng : numpy.random.Generator
    zero_noise : bool
        Test hook: replace both injected Gaussian vectors by zeros, which
        returns the conditional mean.
    """
    lam = _coerce_scale(Lambda)
    m, d = Xtilde.shape
    if lam.shape[0] != d:
        raise ContractError(f"Lambda has length {lam.shape[0]}, operator has {d} columns")
    y = np.asarray(ytilde, dtype=float)
    if y.shape != (m,):
        raise ContractError(f"ytilde must have length {m}, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise NumericalError("ytilde has non-finite entries", quantity="ytilde")

    if zero_noise:
        u = np.zeros(d)
        delta = np.zeros(m)
    else:
        u = np.sqrt(lam) * rng.standard_normal(d)
        delta = rng.standard_normal(m)
    v = Xtilde.forward(u) + delta
    S = Xtilde.weighted_gram(lam)
    S[np.diag_indices_from(S)] += 1.0
    w = spd_solve(S, y - v, name="F Lambda F^T + I")
    return u + lam * Xtilde.adjoint(w)


def sample_gaussian_precision(precision: np.ndarray, rhs: np.ndarray, rng: np.random.Generator,
                              *, zero_noise: bool = False) -> np.ndarray:
    """Draw from ``N(P^-1 rhs, P^-1)`` by Cholesky ``P = L L^T`` and three triangular solves."""
    L = cholesky_lower(precision, name="precision")
    v = solve_triangular(L, rhs, lower=True, check_finite=False)
    mean = solve_triangular(L, v, lower=True, trans="T", check_finite=False)
    if zero_noise:
        return mean
    z = rng.standard_normal(L.shape[0])
    return mean + solve_triangular(L, z, lower=True, trans="T", check_finite=False)


def sample_gaussian_chol(Xstar, ytilde, rng: np.random.Generator,
                         *, zero_noise: bool = False) -> np.ndarray:
    """One exact draw from ``N(Omega^-1 X^T y, Omega^-1)``, ``Omega = X^T X + I``.

    ``Xstar`` may be a matrix or a :class:`LinearMap`; for a map the normal
    matrix is built from its structure (``d`` is expected to be modest).
    """
    if isinstance(Xstar, LinearMap):
        op = Xstar
    else:
        op = DenseMap(Xstar)
    y = np.asarray(ytilde, dtype=float)
    if y.shape != (op.rows,):
        raise ContractError(f"ytilde must have length {op.rows}, got shape {y.shape}")
    P = op.normal_matrix()
    P[np.diag_indices_from(P)] += 1.0
    return sample_gaussian_precision(P, op.adjoint(y), rng, zero_noise=zero_noise)
