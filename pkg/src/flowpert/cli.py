"""Command-line front end: ``validate``, ``bench-gmm`` and ``estimate``.

Exit codes: 0 success, 1 validation/acceptance failure, 2 configuration
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, parse_estimator_token, save_config
from .errors import DegenerateEnsemble, NumericalFailure
from .estimators import draw_noise, estimate_log_det, summarize
from .flow import PassCounter
from .gmm import sample_direct, save_gmm
from .metrics import metrics_report
from .smc import run_smc, write_diagnostics_csv, write_ensemble_csv
from .validation import run_validation

log = logging.getLogger("flowpert")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

SUMMARY_COLUMNS = (
    "estimator",
    "run",
    "seed",
    "status",
    "modal_weight",
    "energy_tv",
    "distinct_ancestors",
    "resampling_events",
    "failed_proposals",
    "ode_passes",
    "wall_time_s",
)
AGGREGATE_COLUMNS = (
    "estimator",
    "n_ok",
    "modal_weight_mean",
    "modal_weight_std",
    "distinct_ancestors_mean",
    "ode_passes_mean",
    "wall_time_s_total",
)


# -- helpers -------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.out is not None:
        overrides["out"] = args.out
    try:
        return dataclasses.replace(cfg, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def run_directory(cfg: RunConfig, args, command: str) -> Path:
    """``--out`` names the run directory itself; otherwise ``<out>/<command>-seed<seed>``."""
    path = Path(args.out) if args.out is not None else Path(cfg.out) / f"{command}-seed{cfg.seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(path: Path, cfg: RunConfig, command: str, extra=None) -> None:
    import scipy

    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "master_seed": cfg.seed,
        "workers": cfg.workers,
        "versions": {
            "flowpert": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    doc.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def _num(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for row in rows:
            out.writerow([_num(v) for v in row])


# -- validate ------------------------------------------------------------------


def cmd_validate(cfg: RunConfig, args) -> int:
    results = run_validation(cfg.validate, seed=cfg.seed, delta=cfg.estimator.delta)
    for r in results:
        print(r.line(), flush=True)
    failures = [r.name for r in results if not r.passed]
    if args.out is not None:
        path = run_directory(cfg, args, "validate")
        save_config(cfg, path / "config.toml")
        write_manifest(path, cfg, "validate")
        report = [dataclasses.asdict(r) for r in results]
        (path / "validation.json").write_text(json.dumps({"failures": failures, "checks": report}, indent=2, default=str))
    print(json.dumps({"failures": failures}))
    return EXIT_FAIL if failures else EXIT_OK


# -- bench-gmm -----------------------------------------------------------------


def bench_job(cfg: RunConfig, token: str, run: int) -> dict:
    """One SMC run; pure function of its arguments (safe to farm out to workers)."""
    estimator = parse_estimator_token(token, cfg.estimator)
    seed = cfg.seed + run
    counter = PassCounter()
    flow = cfg.build_flow(counter)
    target = cfg.build_target()
    out = {"estimator": estimator.label, "token": token, "run": run, "seed": seed}
    try:
        res = run_smc(flow, target, estimator, cfg.smc, seed)
    except DegenerateEnsemble as exc:
        out.update(status="degenerate", error=str(exc), diagnostics=exc.diagnostics or [])
        return out
    except NumericalFailure as exc:
        out.update(status="numerical_failure", error=str(exc), diagnostics=[])
        return out
    ens = res.ensemble
    # reference draws depend only on the target and master seed, shared by all runs
    reference = sample_direct(target, np.random.default_rng([cfg.seed, 2**32]), cfg.bench.direct_samples)
    rep = metrics_report(
        target,
        ens.x,
        ens.weights,
        reference,
        int(len(np.unique(ens.ancestor))),
        res.ode_passes,
        res.wall_time,
        cfg.bench.rc_bins,
        cfg.bench.rc_range,
        cfg.bench.energy_bins,
    )
    out.update(
        status="ok",
        report=rep,
        ensemble=ens,
        diagnostics=res.diagnostics,
        resampling_events=sum(r.resampled for r in res.diagnostics),
        failed_proposals=res.failed_proposals,
    )
    return out


def _file_stem(job: dict) -> str:
    return f"{job['token'].lower()}_run{job['run']:03d}"


def cmd_bench_gmm(cfg: RunConfig, args) -> int:
    path = run_directory(cfg, args, "bench-gmm")
    save_config(cfg, path / "config.toml")
    target = cfg.build_target()
    save_gmm(target, path / "target.json")
    jobs = [(cfg, tok, r) for tok in cfg.bench.estimators for r in range(cfg.bench.n_runs)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(bench_job, *zip(*jobs)))
    else:
        results = [bench_job(*j) for j in jobs]

    rows = []
    for job in results:
        stem = _file_stem(job)
        write_diagnostics_csv(job["diagnostics"], path / f"{stem}_diagnostics.csv")
        if job["status"] != "ok":
            log.warning("run %s failed: %s", stem, job["error"])
            rows.append((job["estimator"], job["run"], job["seed"], job["status"], "", "", "", "", "", "", ""))
            continue
        rep = job["report"]
        write_ensemble_csv(job["ensemble"], path / f"{stem}_ensemble.csv")
        write_rows(
            path / f"{stem}_rc_hist.csv",
            ("bin_lo", "bin_hi", "smc", "reference"),
            zip(rep.rc_edges[:-1], rep.rc_edges[1:], rep.rc_hist, rep.rc_reference),
        )
        write_rows(
            path / f"{stem}_energy_hist.csv",
            ("bin_lo", "bin_hi", "smc", "reference"),
            zip(rep.energy_edges[:-1], rep.energy_edges[1:], rep.energy_hist, rep.energy_reference),
        )
        rows.append(
            (
                job["estimator"],
                job["run"],
                job["seed"],
                "ok",
                rep.modal_weight,
                rep.energy_tv,
                rep.distinct_ancestors,
                job["resampling_events"],
                job["failed_proposals"],
                rep.ode_passes,
                rep.wall_time,
            )
        )
    write_rows(path / "summary.csv", SUMMARY_COLUMNS, rows)

    agg = []
    for tok in cfg.bench.estimators:
        label = parse_estimator_token(tok, cfg.estimator).label
        ok = [r for r in rows if r[0] == label and r[3] == "ok"]
        mw = np.array([r[4] for r in ok], dtype=float)
        agg.append(
            (
                label,
                len(ok),
                float(mw.mean()) if len(ok) else float("nan"),
                float(mw.std(ddof=1)) if len(ok) > 1 else float("nan"),
                float(np.mean([r[6] for r in ok])) if ok else float("nan"),
                float(np.mean([r[9] for r in ok])) if ok else float("nan"),
                float(np.sum([r[10] for r in ok])),
            )
        )
        print(f"{label}: modal weight {agg[-1][2]:.4f} +/- {agg[-1][3]:.4f} over {len(ok)} ok runs", flush=True)
    write_rows(path / "summary_by_estimator.csv", AGGREGATE_COLUMNS, agg)
    write_manifest(path, cfg, "bench-gmm", {"run_seeds": sorted({j["seed"] for j in results})})

    failed = [r for r in rows if r[3] != "ok"]
    if failed and args.strict:
        return EXIT_FAIL
    return EXIT_OK


# -- estimate ------------------------------------------------------------------


def read_points(path, dim: int) -> np.ndarray:
    """Whitespace- or comma-separated rows of ``dim`` numbers; ``#`` starts a comment."""
    rows = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read z file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].replace(",", " ").strip()
        if not text:
            continue
        try:
            vals = [float(tok) for tok in text.split()]
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        if len(vals) != dim:
            raise ConfigError(f"{path}:{lineno}: expected {dim} values, got {len(vals)}")
        rows.append(vals)
    if not rows:
        raise ConfigError(f"{path}: no points found")
    return np.array(rows)


def estimate_records(cfg: RunConfig, points: np.ndarray, seed: int):
    """Yield one JSONL-ready dict per draw; each draw's noise is regenerable from its ``seed``."""
    counter = PassCounter()
    flow = cfg.build_flow(counter)
    est = cfg.estimator
    n = cfg.estimate.n_draws
    seeds = np.random.SeedSequence(seed).generate_state(n * len(points), dtype=np.uint64).reshape(len(points), n)
    for p, z in enumerate(points):
        start_ns = time.perf_counter_ns()
        before = counter.total
        traj = flow.push_forward(np.broadcast_to(z, (n, flow.dim)))
        if est.kind == "bruteforce":
            noise = None
        else:
            noise = np.stack([draw_noise(est, flow, np.random.default_rng(int(s))) for s in seeds[p]])
        ds = np.broadcast_to(estimate_log_det(flow, traj, est, noise), (n,))
        passes = (counter.total - before) / n
        wall = (time.perf_counter_ns() - start_ns) // n
        passes = int(passes) if passes.denominator == 1 else float(passes)
        for i in range(n):
            yield {"kind": est.label, "seed": int(seeds[p, i]), "point": p, "delta_s": float(ds[i]),
                   "ode_passes": passes, "wall_ns": int(wall)}


def summarize_records(lines) -> dict:
    """Bundled summarizer for ``estimate`` output: moments of ``delta_s`` per (kind, point)."""
    groups = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            groups.setdefault((rec["kind"], rec.get("point", 0)), []).append(float(rec["delta_s"]))
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"line {lineno}: bad record: {exc}") from exc
    out = {}
    for (kind, point), ds in groups.items():
        st = summarize(ds) if len(ds) > 1 else None
        out[f"{kind}/{point}"] = {
            "n": len(ds),
            "mean_delta_s": float(np.mean(ds)),
            "var_delta_s": st.var_delta_s if st else 0.0,
            "log_mean_exp": st.log_mean_exp if st else ds[0],
        }
    return out


def cmd_estimate(cfg: RunConfig, args) -> int:
    dim = cfg.target.dim
    if cfg.estimate.z_file:
        points = read_points(cfg.estimate.z_file, dim)
    else:
        points = np.random.default_rng(cfg.seed).standard_normal((cfg.estimate.n_points, dim))
    sink = sys.stdout
    if args.out is not None:
        path = run_directory(cfg, args, "estimate")
        save_config(cfg, path / "config.toml")
        write_manifest(path, cfg, "estimate")
        sink = open(path / "estimates.jsonl", "w")
    try:
        for rec in estimate_records(cfg, points, cfg.seed):
            sink.write(json.dumps(rec) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

COMMANDS = {"validate": cmd_validate, "bench-gmm": cmd_bench_gmm, "estimate": cmd_estimate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run config (defaults used when omitted)")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed override")
    common.add_argument("--out", metavar="DIR", help="run directory (estimate: write JSONL there instead of stdout)")
    common.add_argument("--workers", type=int, metavar="N", help="worker processes for independent runs")
    common.add_argument("--strict", action="store_true", help="treat failed SMC runs as an error")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser = argparse.ArgumentParser(prog="flowpert", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="run the estimator self-checks")
    sub.add_parser("bench-gmm", parents=[common], help="SMC on the benchmark Gaussian mixture")
    sub.add_parser("estimate", parents=[common], help="repeated entropy estimates as JSONL")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, DegenerateEnsemble) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
