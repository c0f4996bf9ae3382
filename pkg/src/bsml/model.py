"""Data and parameter containers, priors and likelihood for ``Y = X B A^T + E``.

Priors: ``b_jh | lam_jh, tau_h ~ N(0, lam_jh^2 tau_h^2)`` with half-Cauchy
local and global scales, ``a_hk ~ N(0, 1)``, and either
``pi(sigma_h^2) ~ 1/sigma_h^2`` (diagonal noise) or
``Sigma ~ inverse-Wishart(q, I_q)`` (full noise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import multigammaln

from .errors import ContractError, NumericalError
from .linalg import cholesky_lower

NoiseKind = Literal["diagonal", "full"]
NoiseModel = Literal["diagonal", "inverse_wishart"]

_LOG_2PI = math.log(2.0 * math.pi)
_LOG_HALF_CAUCHY_NORM = math.log(2.0 / math.pi)


def _finite(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} has non-finite entries")
    return a


def center_columns(Y) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Y - column means, column means)``."""
    Y = np.asarray(Y, dtype=float)
    offsets = Y.mean(axis=0)
    return Y - offsets, offsets


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    centered: bool = True

    def __post_init__(self):
        X = _finite(self.X, "X")
        Y = _finite(self.Y, "Y")
        if X.ndim != 2 or Y.ndim != 2:
            raise ContractError("X and Y must be 2-D")
        if X.shape[0] != Y.shape[0]:
            raise ContractError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if X.shape[0] < 2:
            raise ContractError("need at least two observations")
        if self.centered:
            worst = float(np.max(np.abs(Y.mean(axis=0)))) if Y.size else 0.0
            scale = max(1.0, float(np.max(np.abs(Y)))) if Y.size else 1.0
            if worst > 1e-8 * scale:
                raise ContractError(
                    f"Y is flagged centered but a column mean is {worst:.3g}; "
                    "center responses before fitting")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class NoiseState:
    """Noise covariance: a vector of variances or a full SPD matrix."""

    kind: NoiseKind
    sigma2: np.ndarray | None = None
    Sigma: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "diagonal":
            s = _finite(self.sigma2, "sigma2")
            if s.ndim != 1 or np.any(s <= 0):
                raise ContractError("sigma2 must be a vector of positive variances")
            object.__setattr__(self, "sigma2", s)
        elif self.kind == "full":
            S = _finite(self.Sigma, "Sigma")
            if S.ndim != 2 or S.shape[0] != S.shape[1]:
                raise ContractError("Sigma must be square")
            if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12):
                raise ContractError("Sigma must be symmetric")
            object.__setattr__(self, "Sigma", 0.5 * (S + S.T))
        else:
            raise ContractError(f"unknown noise kind {self.kind!r}")

    @classmethod
    def diagonal(cls, sigma2) -> NoiseState:
        return cls("diagonal", sigma2=np.asarray(sigma2, dtype=float))

    @classmethod
    def full(cls, Sigma) -> NoiseState:
        return cls("full", Sigma=np.asarray(Sigma, dtype=float))

    @property
    def q(self) -> int:
        return self.sigma2.shape[0] if self.kind == "diagonal" else self.Sigma.shape[0]

    def covariance(self) -> np.ndarray:
        if self.kind == "diagonal":
            return np.diag(self.sigma2)
        return self.Sigma

    def precision(self) -> np.ndarray:
        if self.kind == "diagonal":
            return np.diag(1.0 / self.sigma2)
        L = cholesky_lower(self.Sigma, "Sigma")
        return cho_solve((L, True), np.eye(self.q))

    def whitener(self) -> np.ndarray:
        """``W`` with ``W^T W = Sigma^-1`` (upper-triangular for full noise)."""
        if self.kind == "diagonal":
            return np.diag(1.0 / np.sqrt(self.sigma2))
        P = self.precision()
        return cholesky_lower(0.5 * (P + P.T), "Sigma^-1").T

    def logdet(self) -> float:
        if self.kind == "diagonal":
            return float(np.sum(np.log(self.sigma2)))
        L = cholesky_lower(self.Sigma, "Sigma")
        return 2.0 * float(np.sum(np.log(np.diag(L))))


@dataclass(frozen=True)
class ChainState:
    """All sampled parameters at one sweep; ``C = B A^T`` is derived."""

    B: np.ndarray
    A: np.ndarray
    lam: np.ndarray
    tau: np.ndarray
    noise: NoiseState

    def __post_init__(self):
        B = _finite(self.B, "B")
        A = _finite(self.A, "A")
        lam = np.asarray(self.lam, dtype=float)
        tau = np.asarray(self.tau, dtype=float)
        if B.ndim != 2 or A.ndim != 2 or B.shape[1] != A.shape[1]:
            raise ContractError(f"B {B.shape} and A {A.shape} must share a column count")
        if A.shape[1] > A.shape[0]:
            raise ContractError("postulated rank exceeds q")
        if lam.shape != B.shape or tau.shape != (B.shape[1],):
            raise ContractError("scale shapes do not match B")
        for name, s in (("lam", lam), ("tau", tau)):
            if not np.all(np.isfinite(s)) or np.any(s <= 0):
                raise ContractError(f"{name} must be finite and > 0")
        if self.noise.q != A.shape[0]:
            raise ContractError("noise dimension does not match A")
        for name, v in (("B", B), ("A", A), ("lam", lam), ("tau", tau)):
            object.__setattr__(self, name, v)

    @property
    def C(self) -> np.ndarray:
        return self.B @ self.A.T

    def evolve(self, **changes) -> ChainState:
        return replace(self, **changes)


def initial_state(data: Dataset, rank: int | None = None,
                  noise_model: NoiseModel = "diagonal") -> ChainState:
    """Neutral start: ``B = 0``, ``A = I`` (leading block), unit scales, sample variances."""
    q = data.q
    k = q if rank is None else int(rank)
    var = np.var(data.Y, axis=0, ddof=1)
    var = np.where(var > 0, var, 1.0)
    if noise_model == "diagonal":
        noise = NoiseState.diagonal(var)
    else:
        noise = NoiseState.full(np.diag(var))
    return ChainState(B=np.zeros((data.p, k)), A=np.eye(q, k),
                      lam=np.ones((data.p, k)), tau=np.ones(k), noise=noise)


@dataclass(frozen=True)
class GibbsConfig:
    iterations: int = 2000
    burn_in: int = 1000
    thin: int = 1
    alpha: float = 1.0
    postulated_rank: int | None = None
    noise_model: NoiseModel = "diagonal"
    seed: int = 0
    store_draws: bool = False
    level: float = 0.95
    reservoir_size: int = 1000

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ContractError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ContractError("thin must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ContractError("alpha must lie in (0, 1]")
        if self.postulated_rank is not None and self.postulated_rank < 1:
            raise ContractError("postulated_rank must be >= 1")
        if self.noise_model not in ("diagonal", "inverse_wishart"):
            raise ContractError(f"unknown noise_model {self.noise_model!r}")
        if not 0.0 < self.level < 1.0:
            raise ContractError("level must lie in (0, 1)")
        if self.reservoir_size < 1:
            raise ContractError("reservoir_size must be >= 1")

    @property
    def kept(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def rank_for(self, q: int) -> int:
        k = q if self.postulated_rank is None else self.postulated_rank
        if k > q:
            raise ContractError(f"postulated_rank {k} exceeds q = {q}")
        return k


@dataclass
class PosteriorSummary:
    C_mean: np.ndarray
    C_lo: np.ndarray
    C_hi: np.ndarray
    kept: int
    level: float = 0.95
    draws: np.ndarray | None = None
    samples: np.ndarray | None = field(default=None, repr=False)

    def bounds(self, level: float) -> tuple[np.ndarray, np.ndarray]:
        """Equal-tail pointwise bounds recomputed at another level."""
        pool = self.draws if self.draws is not None else self.samples
        if pool is None:
            raise ContractError("no retained draws to recompute bounds from")
        return equal_tail_bounds(pool, level)


def equal_tail_bounds(draws: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    tail = 0.5 * (1.0 - level)
    lo, hi = np.quantile(draws, [tail, 1.0 - tail], axis=0)
    return lo, hi


def log_prior_density(state: ChainState) -> float:
    """Log prior of ``state``; Gaussian and half-Cauchy terms fully normalized.

    The diagonal-noise prior is improper and contributes ``-sum log sigma_h^2``.
    """
    B, A, lam, tau = state.B, state.A, state.lam, state.tau
    if np.any(lam <= 0) or np.any(tau <= 0):
        raise ContractError("scales must be positive")
    var = (lam * tau) ** 2
    with np.errstate(divide="ignore", over="ignore"):
        lp_b = -0.5 * (_LOG_2PI + np.log(var)) - 0.5 * B * B / var
    lp_a = -0.5 * (_LOG_2PI + A * A)
    lp_lam = _LOG_HALF_CAUCHY_NORM - np.log1p(lam * lam)
    lp_tau = _LOG_HALF_CAUCHY_NORM - np.log1p(tau * tau)
    total = lp_b.sum() + lp_a.sum() + lp_lam.sum() + lp_tau.sum()
    return float(total + _log_noise_prior(state.noise))


def _log_noise_prior(noise: NoiseState) -> float:
    if noise.kind == "diagonal":
        return -float(np.sum(np.log(noise.sigma2)))
    q = noise.q
    nu = q
    # inverse-Wishart(nu, I_q): log|I| = 0
    P = noise.precision()
    return float(-0.5 * nu * q * math.log(2.0) - multigammaln(0.5 * nu, q)
                 - 0.5 * (nu + q + 1) * noise.logdet() - 0.5 * np.trace(P))


def loglik(state: ChainState, data: Dataset, alpha: float = 1.0) -> float:
    """``alpha`` times the Gaussian log-likelihood of ``Y`` given ``C = B A^T``."""
    if data.p != state.B.shape[0] or data.q != state.A.shape[0]:
        raise ContractError("state and data dimensions disagree")
    R = data.Y - data.X @ state.B @ state.A.T
    noise = state.noise
    if noise.kind == "diagonal":
        quad = float(np.sum(R * R / noise.sigma2))
        logdet = noise.logdet()
    else:
        L = cholesky_lower(noise.Sigma, "Sigma")
        Z = cho_solve((L, True), R.T)
        quad = float(np.sum(R.T * Z))
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        if not np.isfinite(quad):
            raise NumericalError("non-finite quadratic form", quantity="Sigma")
    n, q = R.shape
    return alpha * (-0.5 * n * q * _LOG_2PI - 0.5 * n * logdet - 0.5 * quad)
