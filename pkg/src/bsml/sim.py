"""Synthetic reduced-rank, row-sparse regression problems and a replication driver."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from .errors import ContractError, NumericalError
from .gibbs import make_rng, run_chain
from .model import Dataset, GibbsConfig
from .postprocess import bsml

logger = logging.getLogger(__name__)

METRIC_NAMES = ("mse", "mspe", "rank_hat", "sensitivity", "specificity")


@dataclass(frozen=True)
class SimulationSpec:
    n: int = 100
    p: int = 200
    q: int = 30
    r0: int = 3
    s: int = 10
    design: Literal["independent", "compound"] = "independent"
    noise: Literal["diagonal", "compound"] = "diagonal"
    rho: float = 0.5
    noise_low: float = 0.5
    noise_high: float = 1.75
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ContractError("n must be >= 2")
        if min(self.p, self.q) < 1:
            raise ContractError("p and q must be >= 1")
        if not 0 <= self.r0 <= min(self.p, self.q):
            raise ContractError("r0 must lie in [0, min(p, q)]")
        if not 0 <= self.s <= self.p:
            raise ContractError("s must lie in [0, p]")
        if self.design not in ("independent", "compound"):
            raise ContractError(f"unknown design {self.design!r}")
        if self.noise not in ("diagonal", "compound"):
            raise ContractError(f"unknown noise {self.noise!r}")
        if not 0.0 <= self.rho < 1.0:
            raise ContractError("rho must lie in [0, 1)")
        if not 0.0 < self.noise_low <= self.noise_high:
            raise ContractError("need 0 < noise_low <= noise_high")


@dataclass(frozen=True)
class Truth:
    C0: np.ndarray
    B_star: np.ndarray
    A_star: np.ndarray
    support: tuple[int, ...]
    Sigma0: np.ndarray


@dataclass(frozen=True)
class Metrics:
    mse: float
    mspe: float
    rank_hat: int
    sensitivity: float | None
    specificity: float | None


def compound_rows(rng: np.random.Generator, n: int, d: int, rho: float) -> np.ndarray:
    """``n`` i.i.d. rows from N(0, (1 - rho) I + rho 11^T)."""
    shared = rng.standard_normal((n, 1))
    return math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * rng.standard_normal((n, d))


def generate(spec: SimulationSpec, rng: np.random.Generator) -> tuple[Dataset, Truth]:
    n, p, q, r0, s = spec.n, spec.p, spec.q, spec.r0, spec.s
    if spec.design == "independent":
        X = rng.standard_normal((n, p))
    else:
        X = compound_rows(rng, n, p, spec.rho)
    A_star = rng.standard_normal((q, r0))
    B_star = np.zeros((p, r0))
    B_star[:s] = rng.standard_normal((s, r0))
    C0 = B_star @ A_star.T
    if spec.noise == "diagonal":
        Sigma0 = np.diag(rng.uniform(spec.noise_low, spec.noise_high, size=q))
        E = rng.standard_normal((n, q)) * np.sqrt(np.diag(Sigma0))
    else:
        Sigma0 = (1.0 - spec.rho) * np.eye(q) + spec.rho * np.ones((q, q))
        E = compound_rows(rng, n, q, spec.rho)
    Y = X @ C0 + E
    Y = Y - Y.mean(axis=0)
    truth = Truth(C0=C0, B_star=B_star, A_star=A_star,
                  support=tuple(range(s)), Sigma0=Sigma0)
    return Dataset(X, Y, centered=True), truth


def evaluate(C_hat, rank_hat: int, selected: Sequence[int], truth: Truth, X) -> Metrics:
    C_hat = np.asarray(C_hat, dtype=float)
    X = np.asarray(X, dtype=float)
    p, q = truth.C0.shape
    n = X.shape[0]
    D = C_hat - truth.C0
    mse = float(np.sum(D * D)) / (p * q)
    XD = X @ D
    mspe = float(np.sum(XD * XD)) / (n * q)
    chosen = set(int(j) for j in selected)
    support = set(truth.support)
    nulls = set(range(p)) - support
    sens = len(chosen & support) / len(support) if support else None
    spec = len(nulls - chosen) / len(nulls) if nulls else None
    return Metrics(mse=mse, mspe=mspe, rank_hat=int(rank_hat),
                   sensitivity=sens, specificity=spec)


def derived_seed(seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def run_replicate(spec: SimulationSpec, config: GibbsConfig, replicate: int,
                  postulated_rank: int | None = None) -> dict:
    """Generate, fit, post-process and score one replicate; never raises on chain failure."""
    data, truth = generate(spec, make_rng(spec.seed, replicate, 0))
    chain_cfg = replace(config, postulated_rank=postulated_rank,
                        seed=derived_seed(spec.seed, replicate, 1, postulated_rank or 0))
    row = {"replicate": replicate,
           "postulated_rank": postulated_rank if postulated_rank is not None else spec.q}
    try:
        summary, _ = run_chain(data, chain_cfg)
    except NumericalError as exc:
        logger.error("replicate %d (rank %s) failed: %s", replicate, postulated_rank, exc)
        row.update(status="failed", error=str(exc))
        row.update({name: None for name in METRIC_NAMES})
        return row
    sparse, reduced = bsml(summary.C_mean, data.X, data.Y)
    metrics = evaluate(reduced.C_RR, reduced.rank_hat, sparse.selected, truth, data.X)
    row.update(status="ok", error="")
    row.update(asdict(metrics))
    row["n_selected"] = len(sparse.selected)
    row["omega"] = reduced.omega
    return row


@dataclass
class StudyResult:
    rows: list[dict]
    aggregates: list[dict] = field(default_factory=list)


def _aggregate(rows: list[dict], grid: Sequence[int]) -> list[dict]:
    out = []
    for k in grid:
        block = [r for r in rows if r["postulated_rank"] == k]
        ok = [r for r in block if r["status"] == "ok"]
        agg = {"postulated_rank": k, "n_ok": len(ok), "n_failed": len(block) - len(ok)}
        for name in METRIC_NAMES:
            vals = np.array([r[name] for r in ok if r[name] is not None], dtype=float)
            if vals.size:
                agg[f"mean_{name}"] = float(vals.mean())
                agg[f"se_{name}"] = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
            else:
                agg[f"mean_{name}"] = None
                agg[f"se_{name}"] = None
        out.append(agg)
    return out


def worker_count() -> int:
    env = os.environ.get("BSML_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ContractError(f"BSML_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def run_study(spec: SimulationSpec, replicates: int, config: GibbsConfig,
              postulated_rank_grid: Sequence[int] | None = None,
              workers: int | None = None) -> StudyResult:
    """Replicate generate -> fit -> select -> rank -> reduce -> evaluate.

    Each (replicate, postulated rank) task derives its own seeds from
    ``spec.seed``, so results do not depend on ``workers``. With a rank
    grid, every grid point refits the same replicate datasets.
    """
    if replicates < 1:
        raise ContractError("replicates must be >= 1")
    grid = list(postulated_rank_grid) if postulated_rank_grid else [None]
    for k in grid:
        if k is not None and not 1 <= k <= spec.q:
            raise ContractError(f"postulated rank {k} outside [1, {spec.q}]")
    tasks = [(r, k) for k in grid for r in range(replicates)]
    workers = worker_count() if workers is None else max(1, int(workers))

    if workers == 1 or len(tasks) == 1:
        rows = []
        for r, k in tasks:
            rows.append(run_replicate(spec, config, r, k))
            logger.info("replicate %d rank %s done: %s", r, k, rows[-1])
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            futures = [pool.submit(run_replicate, spec, config, r, k) for r, k in tasks]
            rows = [f.result() for f in futures]
    rows.sort(key=lambda r: (r["postulated_rank"], r["replicate"]))
    labels = [k if k is not None else spec.q for k in grid]
    return StudyResult(rows=rows, aggregates=_aggregate(rows, labels))
