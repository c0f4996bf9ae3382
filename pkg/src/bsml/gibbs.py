"""Blocked Gibbs sampler for the horseshoe reduced-rank regression model.

One sweep updates, in order, ``B`` (structured Gaussian block), ``A``
(Cholesky block), the noise covariance, and the local/global horseshoe
scales (slice moves on inverse squared scales). A fractional likelihood
power ``alpha`` multiplies the whitened design and response by
``sqrt(alpha)`` in the coefficient blocks and scales the noise update's
data terms by ``alpha``; the scale updates see only the prior.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import brentq
from scipy.special import gammainc, gammaincc, gammaincinv, gammainccinv, gammaln

from .errors import ChainError, ContractError, NumericalError
from .linalg import (cholesky_lower, kron_right_identity, sample_gaussian_chol,
                     sample_structured_gaussian)
from .model import (ChainState, Dataset, GibbsConfig, NoiseState, PosteriorSummary,
                    equal_tail_bounds, initial_state, loglik)

logger = logging.getLogger(__name__)

#: Floor for exponential/Gamma rates when the coefficients are exactly zero.
RATE_FLOOR = 1e-12
#: Floor for residual sums of squares in the diagonal noise update.
RSS_FLOOR = 1e-12
_ETA_MIN = 1e-280

STEPS = ("B", "A", "noise", "scales")


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for ``seed`` and an optional spawn key."""
    ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def _whitened_response(data: Dataset, W: np.ndarray, alpha: float) -> np.ndarray:
    # (I_n kron W) vec(Y^T) = vec(W Y^T), stored row-major as Y W^T
    return math.sqrt(alpha) * (data.Y @ W.T).ravel()


# ---------------------------------------------------------------------------
# Coefficient blocks
# ---------------------------------------------------------------------------

def step_B(state: ChainState, data: Dataset, alpha: float, rng: np.random.Generator,
           *, zero_noise: bool = False) -> ChainState:
    """Draw ``B`` from its full conditional; ``beta = vec(B^T)``."""
    W = state.noise.whitener()
    s = math.sqrt(alpha)
    Xtilde = kron_right_identity(s * data.X, W @ state.A)
    ytilde = _whitened_response(data, W, alpha)
    prior_var = np.maximum((state.lam * state.tau) ** 2, np.finfo(float).tiny).ravel()
    beta = sample_structured_gaussian(Xtilde, prior_var, ytilde, rng, zero_noise=zero_noise)
    return state.evolve(B=beta.reshape(state.B.shape))


def step_A(state: ChainState, data: Dataset, alpha: float, rng: np.random.Generator,
           *, zero_noise: bool = False) -> ChainState:
    """Draw ``A`` from its full conditional; ``a = vec(A)`` column-major."""
    W = state.noise.whitener()
    s = math.sqrt(alpha)
    Xstar = kron_right_identity(s * (data.X @ state.B), W)
    ytilde = _whitened_response(data, W, alpha)
    a = sample_gaussian_chol(Xstar, ytilde, rng, zero_noise=zero_noise)
    q, k = state.A.shape
    return state.evolve(A=a.reshape(k, q).T)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

def sample_inverse_wishart(df: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-Wishart(df, scale) draw via the Bartlett decomposition.

    With ``scale = L L^T`` and Bartlett factor ``T`` of a Wishart(df, I)
    draw, ``Sigma = (T^-1 L^T)^T (T^-1 L^T)``.
    """
    q = scale.shape[0]
    if df <= q - 1:
        raise ContractError(f"inverse-Wishart needs df > q - 1, got df={df}, q={q}")
    L = cholesky_lower(scale, "inverse-Wishart scale")
    T = np.zeros((q, q))
    T[np.diag_indices(q)] = np.sqrt(rng.chisquare(df - np.arange(q)))
    lower = np.tril_indices(q, -1)
    T[lower] = rng.standard_normal(len(lower[0]))
    G = solve_triangular(T, L.T, lower=True, check_finite=False)
    Sigma = G.T @ G
    return 0.5 * (Sigma + Sigma.T)


def step_noise(state: ChainState, data: Dataset, alpha: float,
               rng: np.random.Generator) -> ChainState:
    """Conjugate noise update; the kind of ``state.noise`` selects the prior."""
    R = data.Y - data.X @ state.B @ state.A.T
    n = data.n
    if state.noise.kind == "diagonal":
        rss = np.sum(R * R, axis=0)
        if np.any(rss < RSS_FLOOR):
            logger.warning("residual sum of squares below %.1e floored", RSS_FLOOR)
            rss = np.maximum(rss, RSS_FLOOR)
        shape = 0.5 * alpha * n
        g = rng.standard_gamma(shape, size=rss.shape[0])
        sigma2 = 0.5 * alpha * rss / g
        if not np.all(np.isfinite(sigma2)) or np.any(sigma2 <= 0):
            raise NumericalError("degenerate inverse-Gamma draw", quantity="sigma2")
        return state.evolve(noise=NoiseState.diagonal(sigma2))
    q = data.q
    scale = np.eye(q) + alpha * (R.T @ R)
    Sigma = sample_inverse_wishart(q + alpha * n, scale, rng)
    return state.evolve(noise=NoiseState.full(Sigma))


# ---------------------------------------------------------------------------
# Horseshoe scales
# ---------------------------------------------------------------------------

def _slice_bound(eta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(eta.shape) / (1.0 + eta)
    with np.errstate(divide="ignore"):
        return np.where(u > 0, (1.0 - u) / u, np.inf)


def _clip_to_slice(x: np.ndarray, bound: np.ndarray) -> np.ndarray:
    return np.clip(x, _ETA_MIN, np.nextafter(bound, 0.0))


def truncated_exponential(rate, bound, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw from Exp(rate) restricted to ``(0, bound)``."""
    rate = np.asarray(rate, dtype=float)
    bound = np.broadcast_to(np.asarray(bound, dtype=float), rate.shape)
    v = rng.random(rate.shape)
    mass = -np.expm1(-rate * bound)
    x = -np.log1p(-v * mass) / rate
    return _clip_to_slice(x, bound)


def _log_lower_gamma(k: float, z: float) -> float:
    """log of the regularized lower incomplete gamma P(k, z), for z < k + 1."""
    term, total, j = 1.0, 1.0, 1
    while term > 1e-17 * total and j < 100000:
        term *= z / (k + j)
        total += term
        j += 1
    return k * math.log(z) - z - gammaln(k + 1.0) + math.log(total)


def _truncated_gamma_tiny_mass(k: float, rate: float, bound: float, v: float) -> float:
    # All mass sits far in the left tail; invert the CDF in log space.
    log_mass = _log_lower_gamma(k, rate * bound)
    target = math.log(v) + log_mass

    def f(t: float) -> float:
        return _log_lower_gamma(k, rate * math.exp(t)) - target

    hi = math.log(bound)
    lo = hi - 1.0
    while f(lo) > 0.0:
        lo = hi - 2.0 * (hi - lo)
    return math.exp(brentq(f, lo, hi, xtol=1e-14, rtol=1e-14))


def truncated_gamma(shape: float, rate, bound, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw from Gamma(shape, rate) restricted to ``(0, bound)``."""
    rate = np.atleast_1d(np.asarray(rate, dtype=float))
    bound = np.broadcast_to(np.asarray(bound, dtype=float), rate.shape)
    v = rng.random(rate.shape)
    z = rate * bound
    p_lo = gammainc(shape, z)
    q_hi = gammaincc(shape, z)
    target = v * p_lo
    upper = target > 0.5
    x = np.empty_like(rate)
    x[~upper] = gammaincinv(shape, target[~upper])
    # 1 - v P = (1 - v) + v Q is computed without cancellation
    x[upper] = gammainccinv(shape, (1.0 - v[upper]) + v[upper] * q_hi[upper])
    x = x / rate
    tiny = p_lo < 1e-280
    for i in np.flatnonzero(tiny):
        x[i] = _truncated_gamma_tiny_mass(shape, rate[i], bound[i], max(v[i], 1e-300))
    return _clip_to_slice(x, bound)


def slice_local_eta(eta, rate, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Slice move for ``eta = lam^-2`` with target ``exp(-rate*eta) / (1 + eta)``.

    Returns the new ``eta`` and the slice bound it was drawn under.
    """
    eta = np.asarray(eta, dtype=float)
    bound = _slice_bound(eta, rng)
    rate = np.maximum(np.asarray(rate, dtype=float), RATE_FLOOR)
    return truncated_exponential(rate, bound, rng), bound


def slice_global_eta(eta, shape: float, rate, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Slice move for ``eta = tau^-2`` with target ``eta^(shape-1) exp(-rate*eta) / (1 + eta)``."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    bound = _slice_bound(eta, rng)
    rate = np.maximum(np.asarray(rate, dtype=float), RATE_FLOOR)
    return truncated_gamma(shape, rate, bound, rng), bound


def update_local_scales(lam: np.ndarray, B: np.ndarray, tau: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    rate = B * B / (2.0 * tau * tau)
    eta, _ = slice_local_eta(1.0 / (lam * lam), rate, rng)
    return 1.0 / np.sqrt(eta)


def update_global_scales(tau: np.ndarray, B: np.ndarray, lam: np.ndarray,
                         rng: np.random.Generator) -> np.ndarray:
    p = B.shape[0]
    rate = np.sum(B * B / (2.0 * lam * lam), axis=0)
    eta, _ = slice_global_eta(1.0 / (tau * tau), 0.5 * (p + 1), rate, rng)
    return 1.0 / np.sqrt(eta)


def step_scales(state: ChainState, rng: np.random.Generator) -> ChainState:
    """Update every local scale, then every global scale."""
    lam = update_local_scales(state.lam, state.B, state.tau, rng)
    tau = update_global_scales(state.tau, state.B, lam, rng)
    return state.evolve(lam=lam, tau=tau)


# ---------------------------------------------------------------------------
# Chain driver
# ---------------------------------------------------------------------------

@dataclass
class ChainDiagnostics:
    loglik_trace: np.ndarray
    gibbs: bool = True
    step_seconds: dict[str, float] = field(default_factory=dict)
    wall_seconds: float = 0.0


class _Reservoir:
    """Uniform fixed-size sample of retained draws (Algorithm R)."""

    def __init__(self, capacity: int, shape: tuple[int, ...], rng: np.random.Generator):
        self.buf = np.empty((capacity,) + shape)
        self.capacity = capacity
        self.seen = 0
        self.rng = rng

    def add(self, x: np.ndarray) -> None:
        if self.seen < self.capacity:
            self.buf[self.seen] = x
        else:
            j = int(self.rng.integers(0, self.seen + 1))
            if j < self.capacity:
                self.buf[j] = x
        self.seen += 1

    def contents(self) -> np.ndarray:
        return self.buf[: min(self.seen, self.capacity)]


def sweep(state: ChainState, data: Dataset, alpha: float, rng: np.random.Generator,
          frozen=(), timings: dict[str, float] | None = None) -> ChainState:
    """One Gibbs cycle (B, A, noise, scales), skipping blocks listed in ``frozen``."""
    for name in STEPS:
        if name in frozen:
            continue
        t0 = time.perf_counter()
        if name == "B":
            state = step_B(state, data, alpha, rng)
        elif name == "A":
            state = step_A(state, data, alpha, rng)
        elif name == "noise":
            state = step_noise(state, data, alpha, rng)
        else:
            state = step_scales(state, rng)
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0
    return state


def run_chain(data: Dataset, config: GibbsConfig, rng: np.random.Generator | None = None,
              *, init: ChainState | None = None,
              frozen=()) -> tuple[PosteriorSummary, ChainDiagnostics]:
    """Run the sampler and summarize the retained draws of ``C = B A^T``.

    Parameters
    ----------
    data : Dataset
        Must be flagged centered.
    config : GibbsConfig
    rng : numpy.random.Generator, optional
        Defaults to a Philox stream seeded by ``config.seed``.
    init : ChainState, optional
        Starting point; defaults to ``B = 0``, ``A = I``, unit scales and
        sample variances.
    frozen : iterable of {"B", "A", "noise", "scales"}
        Blocks held at their initial values (used for conjugate checks).
    """
    if not data.centered:
        raise ContractError("run_chain expects centered responses")
    unknown = set(frozen) - set(STEPS)
    if unknown:
        raise ContractError(f"unknown blocks to freeze: {sorted(unknown)}")
    if rng is None:
        rng = make_rng(config.seed)
    reservoir_rng = make_rng(config.seed, 0x5EED)

    rank = config.rank_for(data.q)
    state = init if init is not None else initial_state(data, rank, config.noise_model)

    p, q = data.p, data.q
    kept = config.kept
    C_sum = np.zeros((p, q))
    draws = np.empty((kept, p, q)) if config.store_draws else None
    reservoir = None if config.store_draws else _Reservoir(
        min(config.reservoir_size, kept), (p, q), reservoir_rng)
    trace = np.empty(config.iterations)
    timings = {name: 0.0 for name in STEPS}
    n_kept = 0
    start = time.perf_counter()

    for t in range(1, config.iterations + 1):
        try:
            state = sweep(state, data, config.alpha, rng, frozen, timings)
            trace[t - 1] = loglik(state, data, config.alpha)
        except NumericalError as exc:
            raise ChainError(str(exc), t, exc.quantity) from exc
        if t > config.burn_in and (t - config.burn_in) % config.thin == 0:
            C = state.C
            C_sum += C
            if draws is not None:
                draws[n_kept] = C
            else:
                reservoir.add(C)
            n_kept += 1

    pool = draws if draws is not None else reservoir.contents()
    lo, hi = equal_tail_bounds(pool, config.level)
    summary = PosteriorSummary(
        C_mean=C_sum / n_kept, C_lo=lo, C_hi=hi, kept=n_kept, level=config.level,
        draws=draws, samples=None if draws is not None else pool.copy())
    diagnostics = ChainDiagnostics(loglik_trace=trace, gibbs=True, step_seconds=timings,
                                   wall_seconds=time.perf_counter() - start)
    return summary, diagnostics


def merge_summaries(*summaries: PosteriorSummary) -> PosteriorSummary:
    """Pool independent chains: kept-weighted mean, bounds from pooled draws."""
    if not summaries:
        raise ContractError("nothing to merge")
    level = summaries[0].level
    kept = sum(s.kept for s in summaries)
    mean = sum(s.C_mean * s.kept for s in summaries) / kept
    all_draws = all(s.draws is not None for s in summaries)
    if all_draws:
        pool = np.concatenate([s.draws for s in summaries])
    else:
        pool = np.concatenate([s.draws if s.draws is not None else s.samples for s in summaries])
    lo, hi = equal_tail_bounds(pool, level)
    return PosteriorSummary(C_mean=mean, C_lo=lo, C_hi=hi, kept=kept, level=level,
                            draws=pool if all_draws else None,
                            samples=None if all_draws else pool)
