"""Command line: ``bsml fit``, ``bsml postprocess`` and ``bsml benchmark``.

Exit codes: 0 success, 2 bad input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .csvio import (file_digest, read_json, read_matrix, write_json, write_matrix,
                    write_table)
from .errors import BsmlError, ContractError, InputError, NumericalError
from .gibbs import run_chain
from .model import Dataset, GibbsConfig, center_columns
from .postprocess import bsml, selection_frequencies
from .sim import METRIC_NAMES, SimulationSpec, run_study

logger = logging.getLogger("bsml")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3

GIBBS_FIELDS = {f.name: f for f in dataclasses.fields(GibbsConfig)}
SIM_FIELDS = {f.name: f for f in dataclasses.fields(SimulationSpec)}
STUDY_FIELDS = {"replicates", "rank_grid", "preset"}

PRESETS: dict[str, dict] = {
    "table1": dict(n=100, p=200, q=30, r0=3, s=10, design="independent", noise="diagonal",
                   replicates=10, iterations=2000, burn_in=1000),
    "table1-hd": dict(n=100, p=500, q=10, r0=3, s=10, design="independent", noise="diagonal",
                      replicates=5, iterations=2000, burn_in=1000),
    "fig1": dict(n=100, p=1000, q=12, r0=3, s=10, design="independent", noise="diagonal",
                 replicates=3, iterations=2000, burn_in=1000, rank_grid=list(range(3, 10))),
    "table2": dict(n=100, p=500, q=10, r0=3, s=10, design="independent", noise="compound",
                   noise_model="inverse_wishart", replicates=5, iterations=2000, burn_in=1000),
}

_INT_FIELDS = {"iterations", "burn_in", "thin", "postulated_rank", "seed", "reservoir_size",
               "n", "p", "q", "r0", "s", "replicates"}
_FLOAT_FIELDS = {"alpha", "level", "rho", "noise_low", "noise_high"}


def _normalize_noise_model(value):
    if isinstance(value, str):
        return value.replace("-", "_")
    return value


def _check_types(doc: dict, source: str) -> None:
    for key, value in doc.items():
        if key in _INT_FIELDS and value is not None and (
                isinstance(value, bool) or not isinstance(value, int)):
            raise InputError(f"{source}: field {key!r} must be an integer, got {value!r}")
        if key in _FLOAT_FIELDS and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise InputError(f"{source}: field {key!r} must be a number, got {value!r}")
        if key == "store_draws" and not isinstance(value, bool):
            raise InputError(f"{source}: field 'store_draws' must be true or false")
        if key == "rank_grid" and value is not None and not (
                isinstance(value, list) and all(isinstance(k, int) and not isinstance(k, bool)
                                                for k in value)):
            raise InputError(f"{source}: field 'rank_grid' must be a list of integers")


def _build(cls, doc: dict, source: str):
    try:
        return cls(**doc)
    except ContractError as exc:
        raise InputError(f"{source}: {exc}") from exc
    except TypeError as exc:
        raise InputError(f"{source}: {exc}") from exc


def gibbs_config_from(doc: dict, source: str = "config") -> GibbsConfig:
    unknown = sorted(set(doc) - set(GIBBS_FIELDS))
    if unknown:
        raise InputError(f"{source}: unknown field(s) {', '.join(unknown)}")
    doc = dict(doc)
    if "noise_model" in doc:
        doc["noise_model"] = _normalize_noise_model(doc["noise_model"])
    _check_types(doc, source)
    return _build(GibbsConfig, doc, source)


def study_from(doc: dict, source: str = "spec") -> tuple[SimulationSpec, GibbsConfig, int, list | None]:
    allowed = set(GIBBS_FIELDS) | set(SIM_FIELDS) | STUDY_FIELDS
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise InputError(f"{source}: unknown field(s) {', '.join(unknown)}")
    merged = {}
    preset = doc.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise InputError(f"{source}: unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
        merged.update(PRESETS[preset])
    merged.update({k: v for k, v in doc.items() if k != "preset"})
    if "noise_model" in merged:
        merged["noise_model"] = _normalize_noise_model(merged["noise_model"])
    _check_types(merged, source)
    sim = _build(SimulationSpec, {k: v for k, v in merged.items() if k in SIM_FIELDS}, source)
    gibbs_doc = {k: v for k, v in merged.items() if k in GIBBS_FIELDS and k != "seed"}
    gibbs_doc["seed"] = sim.seed
    cfg = _build(GibbsConfig, gibbs_doc, source)
    replicates = merged.get("replicates", 1)
    if replicates < 1:
        raise InputError(f"{source}: field 'replicates' must be >= 1")
    grid = merged.get("rank_grid")
    if grid is not None:
        bad = [k for k in grid if not 1 <= k <= sim.q]
        if bad:
            raise InputError(f"{source}: field 'rank_grid' has ranks outside [1, {sim.q}]: {bad}")
    return sim, cfg, replicates, grid


def _flag_overrides(args) -> dict:
    out = {}
    for flag, key in (("seed", "seed"), ("alpha", "alpha"), ("iterations", "iterations"),
                      ("burn_in", "burn_in"), ("thin", "thin"), ("rank_bound", "postulated_rank"),
                      ("noise_model", "noise_model"), ("level", "level")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    if getattr(args, "store_draws", False):
        out["store_draws"] = True
    return out


def _load_data(x_csv, y_csv) -> tuple[np.ndarray, np.ndarray, dict]:
    X, x_header = read_matrix(x_csv)
    Y, y_header = read_matrix(y_csv)
    if X.shape[0] != Y.shape[0]:
        raise InputError(f"{x_csv} has {X.shape[0]} data rows but {y_csv} has {Y.shape[0]}")
    inputs = {
        "X": {"path": str(x_csv), "sha256": file_digest(x_csv), "shape": list(X.shape),
              "header": x_header},
        "Y": {"path": str(y_csv), "sha256": file_digest(y_csv), "shape": list(Y.shape),
              "header": y_header},
    }
    return X, Y, inputs


def _write_selection_artifacts(out: Path, sparse, reduced) -> None:
    write_matrix(out / "C_R.csv", sparse.C_R)
    write_matrix(out / "C_RR.csv", reduced.C_RR)
    write_json(out / "selection.json", {"selected": list(sparse.selected), "mu": sparse.mu})
    write_json(out / "rank.json", {"rank_hat": reduced.rank_hat, "omega": reduced.omega,
                                   "singular_values": reduced.singular_values})


def _manifest(command: str, started: float, **fields) -> dict:
    doc = {"command": command, "version": __version__, "python": platform.python_version(),
           "numpy": np.__version__, "wall_seconds": time.perf_counter() - started}
    doc.update(fields)
    return doc


def cmd_fit(args) -> int:
    started = time.perf_counter()
    doc = read_json(args.config) if args.config else {}
    doc.update(_flag_overrides(args))
    cfg = gibbs_config_from(doc, args.config or "flags")
    X, Y_raw, inputs = _load_data(args.x_csv, args.y_csv)
    Y, offsets = center_columns(Y_raw)
    data = Dataset(X, Y, centered=True)
    try:
        cfg.rank_for(data.q)
    except ContractError as exc:
        raise InputError(str(exc)) from exc

    summary, diag = run_chain(data, cfg)
    sparse, reduced = bsml(summary.C_mean, X, Y)

    out = Path(args.out)
    write_matrix(out / "C_mean.csv", summary.C_mean)
    write_matrix(out / "C_lo.csv", summary.C_lo)
    write_matrix(out / "C_hi.csv", summary.C_hi)
    _write_selection_artifacts(out, sparse, reduced)
    p, q = summary.C_mean.shape
    rows = [[j, h, summary.C_mean[j, h], summary.C_lo[j, h], summary.C_hi[j, h], reduced.C_RR[j, h]]
            for j in range(p) for h in range(q)]
    write_table(out / "intervals.csv",
                ["predictor", "response", "mean", "lower", "upper", "bsml"], rows)
    if summary.draws is not None:
        write_json(out / "selection_frequency.json",
                   {"frequency": selection_frequencies(summary.draws, X)})
    write_json(out / "manifest.json", _manifest(
        "fit", started, config=dataclasses.asdict(cfg), seed=cfg.seed, inputs=inputs,
        centering_offsets=offsets, kept=summary.kept,
        step_seconds=diag.step_seconds,
        shapes={"C_mean": [p, q], "C_lo": [p, q], "C_hi": [p, q], "C_R": [p, q],
                "C_RR": [p, q]}))
    print(f"fit: n={data.n} p={p} q={q} kept={summary.kept} draws")
    print(f"selected {len(sparse.selected)} of {p} predictors; estimated rank {reduced.rank_hat} "
          f"(threshold {reduced.omega:.4g})")
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_postprocess(args) -> int:
    started = time.perf_counter()
    C_mean, _ = read_matrix(args.c_mean_csv)
    X, Y_raw, inputs = _load_data(args.x_csv, args.y_csv)
    if C_mean.shape != (X.shape[1], Y_raw.shape[1]):
        raise InputError(f"{args.c_mean_csv} has shape {C_mean.shape}, expected "
                         f"{(X.shape[1], Y_raw.shape[1])} from X and Y")
    Y, offsets = center_columns(Y_raw)
    sparse, reduced = bsml(C_mean, X, Y)
    out = Path(args.out)
    _write_selection_artifacts(out, sparse, reduced)
    inputs["C_mean"] = {"path": str(args.c_mean_csv), "sha256": file_digest(args.c_mean_csv),
                        "shape": list(C_mean.shape)}
    write_json(out / "manifest.json", _manifest(
        "postprocess", started, inputs=inputs, centering_offsets=offsets,
        shapes={"C_R": list(C_mean.shape), "C_RR": list(C_mean.shape)}))
    print(f"selected {len(sparse.selected)} of {C_mean.shape[0]} predictors; "
          f"estimated rank {reduced.rank_hat} (threshold {reduced.omega:.4g})")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    started = time.perf_counter()
    doc = read_json(args.spec_json) if args.spec_json else {}
    if args.preset:
        doc.setdefault("preset", args.preset)
    if args.replicates is not None:
        doc["replicates"] = args.replicates
    doc.update(_flag_overrides(args))
    if not doc:
        raise InputError("benchmark needs a spec file or --preset")
    sim, cfg, replicates, grid = study_from(doc, args.spec_json or "flags")

    result = run_study(sim, replicates, cfg, grid, workers=args.workers)

    out = Path(args.out)
    cols = ["replicate", "postulated_rank", "status", *METRIC_NAMES, "n_selected", "omega", "error"]
    write_table(out / "results.csv", cols, [[r.get(c) for c in cols] for r in result.rows])
    write_json(out / "aggregate.json", {
        "simulation": dataclasses.asdict(sim), "gibbs": dataclasses.asdict(cfg),
        "replicates": replicates, "rank_grid": grid, "aggregates": result.aggregates})
    if grid:
        long_rows = [[a["postulated_rank"], name, a[f"mean_{name}"], a[f"se_{name}"]]
                     for a in result.aggregates for name in METRIC_NAMES]
        write_table(out / "rank_grid.csv", ["postulated_rank", "metric", "mean", "se"], long_rows)
    write_json(out / "manifest.json", _manifest(
        "benchmark", started, simulation=dataclasses.asdict(sim), config=dataclasses.asdict(cfg),
        seed=sim.seed, replicates=replicates, rank_grid=grid,
        inputs={"spec": {"path": args.spec_json, "sha256": file_digest(args.spec_json)}}
        if args.spec_json else {}))
    for a in result.aggregates:
        print(f"rank bound {a['postulated_rank']}: ok={a['n_ok']} failed={a['n_failed']} "
              + " ".join(f"{m}={a[f'mean_{m}']:.4g}" for m in METRIC_NAMES
                         if a[f"mean_{m}"] is not None))
    return EXIT_OK


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, help="fractional likelihood power in (0, 1]")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--rank-bound", dest="rank_bound", type=int,
                   help="postulated rank (columns of B and A)")
    p.add_argument("--noise-model", dest="noise_model",
                   choices=["diagonal", "inverse-wishart"])
    p.add_argument("--level", type=float, help="credible level for pointwise bounds")
    p.add_argument("--store-draws", dest="store_draws", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsml", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="sample the posterior and post-process it")
    fit.add_argument("x_csv")
    fit.add_argument("y_csv")
    fit.add_argument("--config", help="JSON sampler configuration")
    fit.add_argument("--out", required=True)
    _add_sampler_flags(fit)
    fit.set_defaults(func=cmd_fit)

    post = sub.add_parser("postprocess", help="selection and rank from a stored posterior mean")
    post.add_argument("c_mean_csv")
    post.add_argument("x_csv")
    post.add_argument("y_csv")
    post.add_argument("--out", required=True)
    post.set_defaults(func=cmd_postprocess)

    bench = sub.add_parser("benchmark", help="run a simulation study")
    bench.add_argument("spec_json", nargs="?")
    bench.add_argument("--preset", choices=sorted(PRESETS))
    bench.add_argument("--replicates", type=int)
    bench.add_argument("--workers", type=int, help="parallel replicates (default: BSML_THREADS)")
    bench.add_argument("--out", required=True)
    _add_sampler_flags(bench)
    bench.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"bsml: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, ContractError) as exc:
        print(f"bsml: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BsmlError as exc:
        print(f"bsml: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
