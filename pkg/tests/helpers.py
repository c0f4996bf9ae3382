"""Independent oracles and statistical checks shared by the tests."""

from __future__ import annotations

import numpy as np


def brute_kron(M: np.ndarray, N: np.ndarray) -> np.ndarray:
    """Kronecker product by explicit block loops (no numpy.kron)."""
    r1, c1 = M.shape
    r2, c2 = N.shape
    out = np.zeros((r1 * r2, c1 * c2))
    for i in range(r1):
        for j in range(c1):
            for a in range(r2):
                for b in range(c2):
                    out[i * r2 + a, j * c2 + b] = M[i, j] * N[a, b]
    return out


def moment_check(draws: np.ndarray, mean: np.ndarray, cov: np.ndarray, z: float = 4.0) -> None:
    """Assert sample mean and covariance agree with a Gaussian target within ``z`` SE.

    Covariance entry SEs use the Gaussian fourth-moment formula
    ``var(S_ij) = (S_ii S_jj + S_ij^2) / N``.
    """
    draws = np.asarray(draws, dtype=float)
    n = draws.shape[0]
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    se_mean = np.sqrt(np.diag(cov) / n)
    dev = np.abs(draws.mean(axis=0) - mean)
    assert np.all(dev <= z * se_mean), f"mean off: dev={dev}, se={se_mean}"
    S = np.atleast_2d(np.cov(draws, rowvar=False))
    d = np.diag(cov)
    se_cov = np.sqrt((np.outer(d, d) + cov ** 2) / n)
    cdev = np.abs(S - cov)
    assert np.all(cdev <= z * se_cov), f"covariance off: dev={cdev}, se={se_cov}"


def batch_means_se(x: np.ndarray, n_batches: int = 50) -> float:
    """Standard error of the mean of a correlated series by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    size = x.shape[0] // n_batches
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def ks_distance(sample: np.ndarray, cdf) -> float:
    """Two-sided Kolmogorov-Smirnov distance of ``sample`` from a vectorized ``cdf``."""
    x = np.sort(np.asarray(sample, dtype=float))
    n = x.shape[0]
    F = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))
