import csv
import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import flowpert.cli as cli
from flowpert.config import (
    ConfigError,
    RunConfig,
    config_from_dict,
    dump_config,
    load_config,
    loads_config,
    parse_estimator_token,
    save_config,
)
from flowpert.errors import DegenerateEnsemble, NumericalFailure
from flowpert.estimators import EstimatorConfig, estimator_stats
from flowpert.metrics import energy_edges, histogram, metrics_report, modal_weights, tv_distance
from flowpert.gmm import build_benchmark_gmm, sample_direct, single_gaussian

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL_BENCH = {
    "seed": 5,
    "target": {"kind": "benchmark", "dim": 3},
    "flow": {"steps": 4},
    "smc": {"n_particles": 40, "n_levels": 3, "mcmc_steps": 1, "ess_threshold": 0.9},
    "bench": {"estimators": ["fppp", "hutchinson-G1"], "n_runs": 2, "direct_samples": 500},
}

SMALL_ESTIMATE = {
    "seed": 3,
    "target": {"kind": "benchmark", "dim": 4},
    "flow": {"steps": 8},
    "estimate": {"n_draws": 5, "n_points": 2},
}


def write_config(tmp_path, doc, name="cfg.toml"):
    path = tmp_path / name
    save_config(config_from_dict(doc), path)
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def run_estimate(capsys, argv):
    assert cli.main(["estimate", *argv]) == cli.EXIT_OK
    return [json.loads(line) for line in capsys.readouterr().out.splitlines()]


# ---------------------------------------------------------------- config


def test_default_config_round_trip(tmp_path):
    cfg = RunConfig()
    save_config(cfg, tmp_path / "c.toml")
    assert load_config(tmp_path / "c.toml") == cfg


@pytest.mark.parametrize("name", ["stationary_smoke", "gmm10d", "gmm100d", "validate_quick"])
def test_shipped_configs_load(name, tmp_path):
    cfg = load_config(CONFIGS / f"{name}.toml")
    save_config(cfg, tmp_path / "c.toml")
    assert load_config(tmp_path / "c.toml") == cfg


def test_config_sections_are_applied():
    cfg = config_from_dict(SMALL_BENCH)
    assert cfg.seed == 5 and cfg.target.dim == 3 and cfg.flow.steps == 4
    assert cfg.smc.n_particles == 40 and cfg.bench.estimators == ("fppp", "hutchinson-G1")
    assert cfg.build_flow().dim == 3 and cfg.build_target().dim == 3


@pytest.mark.parametrize(
    "doc,needle",
    [
        ({"target": {"dimension": 3}}, "unknown key(s) in [target]: dimension"),
        ({"flow": {"steps": "many"}}, "flow.steps must be an integer"),
        ({"flow": {"integrator": "rk4"}}, "flow.integrator"),
        ({"target": {"kind": "banana"}}, "target.kind"),
        ({"smc": {"resample": "stratified"}}, "unknown resampling method"),
        ({"estimator": {"kind": "magic"}}, "[estimator]"),
        ({"bench": {"estimators": ["hutchinson-X1"]}}, "bad estimator token"),
        ({"workers": 0}, "workers must be >= 1"),
        ({"seed": -1}, "unsigned 64-bit"),
        ({"nonsense": 1}, "unknown key(s) in [top level]"),
        ({"target": 3}, "[target] must be a table"),
    ],
)
def test_config_errors_are_explicit(doc, needle):
    with pytest.raises(ConfigError) as info:
        config_from_dict(doc)
    assert needle in str(info.value)


def test_malformed_toml_is_config_error(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[flow\nsteps = 3\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_estimator_tokens():
    base = EstimatorConfig()
    assert parse_estimator_token("FPPP", base).kind == "fppp"
    h = parse_estimator_token("hutchinson-R4", base)
    assert (h.kind, h.probe_dist, h.n_probes) == ("hutchinson", "rademacher", 4)
    assert parse_estimator_token("hutchinson-G1", base).label == "HutchGaussian(1)"
    for bad in ("hutchinson-", "hutchinson-Q2", "hutchinson-Gx", "sphere"):
        with pytest.raises(ConfigError):
            parse_estimator_token(bad, base)


@given(
    steps=st.integers(1, 500),
    beta_max=st.floats(0.2, 50),
    delta=st.floats(1e-8, 1e-1),
    m=st.integers(2, 10**6),
    thr=st.floats(0.01, 1.0),
    seed=st.integers(0, 2**64 - 1),
)
def test_dump_load_round_trip_property(steps, beta_max, delta, m, thr, seed):
    cfg = config_from_dict(
        {
            "seed": seed,
            "flow": {"steps": steps, "beta_max": beta_max},
            "estimator": {"delta": delta},
            "smc": {"n_particles": m, "ess_threshold": thr},
        }
    )
    assert loads_config(dump_config(cfg)) == cfg


# ---------------------------------------------------------------- metrics


def test_metrics_on_direct_samples():
    gmm = build_benchmark_gmm(4, seed=0)
    rng = np.random.default_rng(0)
    x = sample_direct(gmm, rng, 4000)
    ref = sample_direct(gmm, rng, 4000)
    rep = metrics_report(gmm, x, np.full(4000, 1 / 4000), ref, 4000, 12, 0.5)
    assert abs(rep.modal_weight - 0.25) < 4 * np.sqrt(0.25 * 0.75 / 4000)
    assert len(rep.rc_edges) == 61 and rep.rc_edges[0] == -4.0 and rep.rc_edges[-1] == 4.0
    assert len(rep.energy_edges) == 51
    assert 0.0 <= rep.energy_tv < 0.1
    assert rep.rc_hist.sum() <= 1.0 + 1e-12


def test_single_mode_modal_weight_is_exact():
    gmm = single_gaussian(np.zeros(2), np.eye(2))
    w = np.random.default_rng(1).random(100_000)
    assert modal_weights(gmm, np.zeros((100_000, 2)), w / w.sum())[0] == 1.0


@given(st.lists(st.floats(0, 10), min_size=3, max_size=30), st.lists(st.floats(0, 10), min_size=3, max_size=30))
def test_tv_distance_bounds(p, q):
    n = min(len(p), len(q))
    d = tv_distance(p[:n], q[:n])
    assert 0.0 <= d <= 1.0
    assert tv_distance(p[:n], p[:n]) == (0.0 if sum(p[:n]) > 0 else 1.0)


def test_histogram_and_edges():
    a = np.linspace(0, 1, 101)
    edges = energy_edges(a, a, 10)
    assert edges[0] == pytest.approx(0.01) and edges[-1] == pytest.approx(0.99)
    h = histogram(a, np.linspace(0, 1, 5))
    assert h.sum() == pytest.approx(1.0)


# ---------------------------------------------------------------- CLI: exit codes


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[smc]\nn_particles = 1\n")
    assert cli.main(["bench-gmm", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err
    assert cli.main(["estimate", "--workers", "0"]) == cli.EXIT_CONFIG


def test_cli_numerical_failure_exit_code(monkeypatch, capsys):
    def broken(*a, **k):
        raise NumericalFailure("non-finite state", step=3)
        yield

    monkeypatch.setattr(cli, "estimate_records", broken)
    assert cli.main(["estimate"]) == cli.EXIT_NUMERIC
    assert "step 3" in capsys.readouterr().err


def test_validate_quick_config_passes(capsys):
    code = cli.main(["validate", "--config", str(CONFIGS / "validate_quick.toml")])
    out = capsys.readouterr().out.splitlines()
    names = [line.split(" (")[0] for line in out[:-1]]
    assert names == [
        "[PASS] sphere identity",
        "[PASS] round-trip inversion",
        "[PASS] FP++ unbiasedness",
        "[PASS] variance ordering",
        "[PASS] pass accounting",
    ]
    assert json.loads(out[-1]) == {"failures": []}
    assert code == cli.EXIT_OK
    assert "fppp_fd=3" in out[4]


def test_validate_absurd_delta_fails(tmp_path, capsys):
    doc = {"validate": {"sphere_matrices": 4, "sphere_dims": [2], "sphere_draws": 1000, "roundtrip_points": 5,
                        "unbiased_draws": 5000, "variance_points": 2, "variance_draws": 500,
                        "variance_min_pass": 1},
           "estimator": {"delta": 10.0}}
    cfg = write_config(tmp_path, doc)
    code = cli.main(["validate", "--config", cfg, "--out", str(tmp_path / "v")])
    out = capsys.readouterr().out.splitlines()
    assert code == cli.EXIT_FAIL
    assert "FP++ unbiasedness" in json.loads(out[-1])["failures"]
    line = next(l for l in out if "FP++ unbiasedness" in l)
    assert line.startswith("[FAIL]") and "z=" in line and "delta=10" in line
    report = json.loads((tmp_path / "v" / "validation.json").read_text())
    assert "FP++ unbiasedness" in report["failures"]
    assert (tmp_path / "v" / "config.toml").exists() and (tmp_path / "v" / "manifest.json").exists()


@pytest.mark.slow
def test_validate_default_config_all_green(capsys):
    # Default suite sizes equal the acceptance thresholds.
    code = cli.main(["validate"])
    out = capsys.readouterr().out
    print(out)
    assert code == cli.EXIT_OK, out


# ---------------------------------------------------------------- CLI: estimate


def test_estimate_records_shape_and_determinism(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL_ESTIMATE)
    a = run_estimate(capsys, ["--config", cfg])
    b = run_estimate(capsys, ["--config", cfg])
    assert len(a) == 10
    assert set(a[0]) == {"kind", "seed", "point", "delta_s", "ode_passes", "wall_ns"}
    assert a[0]["kind"] == "FPpp" and a[0]["ode_passes"] == 3
    assert [r["delta_s"] for r in a] == [r["delta_s"] for r in b]
    assert [r["seed"] for r in a] == [r["seed"] for r in b]
    c = run_estimate(capsys, ["--config", cfg, "--seed", "4"])
    assert [r["delta_s"] for r in a] != [r["delta_s"] for r in c]


def test_estimate_draw_is_regenerable_from_its_seed(tmp_path, capsys):
    cfg_path = write_config(tmp_path, SMALL_ESTIMATE)
    recs = run_estimate(capsys, ["--config", cfg_path])
    cfg = load_config(cfg_path)
    one = dataclasses.replace(cfg, estimate=dataclasses.replace(cfg.estimate, n_draws=1))
    from flowpert.estimators import draw_noise, estimate_log_det

    flow = cfg.build_flow()
    z = np.random.default_rng(cfg.seed).standard_normal((2, 4))
    r = recs[7]
    noise = draw_noise(one.estimator, flow, np.random.default_rng(r["seed"]))
    ds = estimate_log_det(flow, flow.push_forward(z[r["point"]][None]), one.estimator, noise[None])
    # batched and single-row evaluation differ only in floating-point summation order
    assert float(np.squeeze(ds)) == pytest.approx(r["delta_s"], rel=1e-10)


def test_bruteforce_estimate_twice_identical(tmp_path, capsys):
    doc = {**SMALL_ESTIMATE, "estimator": {"kind": "bruteforce"}}
    cfg = write_config(tmp_path, doc)
    a = run_estimate(capsys, ["--config", cfg])
    b = run_estimate(capsys, ["--config", cfg, "--seed", "3"])
    assert [r["delta_s"] for r in a] == [r["delta_s"] for r in b]
    assert a[0]["ode_passes"] == 1 + 4
    # every draw at a point is the same deterministic value
    assert len({r["delta_s"] for r in a if r["point"] == 0}) == 1


def test_estimate_from_file_and_parse_errors(tmp_path, capsys):
    pts = tmp_path / "z.txt"
    pts.write_text("# latent points\n0.1, 0.2, 0.3, 0.4\n\n1 2 3 4  # trailing\n")
    cfg = write_config(tmp_path, {**SMALL_ESTIMATE, "estimate": {"n_draws": 2, "z_file": str(pts)}})
    recs = run_estimate(capsys, ["--config", cfg])
    assert [r["point"] for r in recs] == [0, 0, 1, 1]
    pts.write_text("0.1 0.2 0.3 0.4\n0.1 0.2 zz 0.4\n")
    assert cli.main(["estimate", "--config", cfg]) == cli.EXIT_CONFIG
    assert ":2:" in capsys.readouterr().err
    pts.write_text("0.1 0.2 0.3 0.4\n\n0.1 0.2\n")
    assert cli.main(["estimate", "--config", cfg]) == cli.EXIT_CONFIG
    assert ":3: expected 4 values, got 2" in capsys.readouterr().err


def test_estimate_writes_jsonl_into_run_dir(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL_ESTIMATE)
    assert cli.main(["estimate", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    lines = (tmp_path / "e" / "estimates.jsonl").read_text().splitlines()
    assert len(lines) == 10 and capsys.readouterr().out == ""


def test_summarizer_matches_estimator_stats(tmp_path, capsys):
    n = 10_000
    doc = {"seed": 9, "target": {"kind": "benchmark", "dim": 5}, "flow": {"steps": 16},
           "estimate": {"n_draws": n, "n_points": 1}}
    cfg_path = write_config(tmp_path, doc)
    recs = run_estimate(capsys, ["--config", cfg_path])
    summary = cli.summarize_records(json.dumps(r) for r in recs)["FPpp/0"]
    cfg = load_config(cfg_path)
    z = np.random.default_rng(9).standard_normal((1, 5))[0]
    ref = estimator_stats(cfg.build_flow(), z, cfg.estimator, n, np.random.default_rng(1))
    assert summary["n"] == n
    # independent draws: agreement within sampling error
    assert abs(summary["mean_delta_s"] - ref.delta_s.mean()) < 4 * np.sqrt(2 * ref.var_delta_s / n)
    assert summary["var_delta_s"] == pytest.approx(ref.var_delta_s, rel=0.1)
    # identical draws: exact agreement with the library summary
    from flowpert.estimators import summarize

    lib = summarize([r["delta_s"] for r in recs])
    assert summary["var_delta_s"] == lib.var_delta_s
    assert summary["log_mean_exp"] == lib.log_mean_exp


def test_summarizer_reports_bad_lines():
    with pytest.raises(ConfigError, match="line 2"):
        cli.summarize_records(['{"kind": "FP", "delta_s": 0.1}', "not json"])


# ---------------------------------------------------------------- CLI: bench-gmm

RUN_FILES = ("diagnostics", "ensemble", "rc_hist", "energy_hist")
TIMING = {"wall_time_s", "wall_time_s_total"}


def bench(tmp_path, name, doc=SMALL_BENCH, extra=()):
    cfg = write_config(tmp_path, doc, f"{name}.toml")
    out = tmp_path / name
    code = cli.main(["bench-gmm", "--config", cfg, "--out", str(out), *extra])
    return code, out


def strip_timing(rows):
    keep = [i for i, c in enumerate(rows[0]) if c not in TIMING]
    return [[r[i] for i in keep] for r in rows]


@pytest.fixture(scope="module")
def bench_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("bench")
    code, out = bench(tmp, "first")
    return code, out, tmp


def test_bench_run_directory_contents(bench_run):
    code, out, _ = bench_run
    assert code == cli.EXIT_OK
    for tok in ("fppp", "hutchinson-g1"):
        for run in range(2):
            for kind in RUN_FILES:
                assert (out / f"{tok}_run{run:03d}_{kind}.csv").exists()
    for name in ("config.toml", "manifest.json", "target.json", "summary.csv", "summary_by_estimator.csv"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["master_seed"] == 5 and manifest["run_seeds"] == [5, 6]
    assert set(manifest["versions"]) >= {"flowpert", "numpy", "python"}
    assert load_config(out / "config.toml").smc.n_particles == 40


def test_bench_summary_schema(bench_run):
    _, out, _ = bench_run
    rows = read_csv(out / "summary.csv")
    assert tuple(rows[0]) == cli.SUMMARY_COLUMNS
    assert len(rows) == 5
    assert {r[0] for r in rows[1:]} == {"FPpp", "HutchGaussian(1)"}
    for r in rows[1:]:
        assert r[3] == "ok"
        assert 0.0 <= float(r[4]) <= 1.0 and 0.0 <= float(r[5]) <= 1.0
        assert 1 <= int(r[6]) <= 40
    agg = read_csv(out / "summary_by_estimator.csv")
    assert tuple(agg[0]) == cli.AGGREGATE_COLUMNS
    fp = [float(r[4]) for r in rows[1:] if r[0] == "FPpp"]
    assert float(agg[1][2]) == pytest.approx(np.mean(fp), abs=1e-15)
    hist = read_csv(out / "fppp_run000_rc_hist.csv")
    assert hist[0] == ["bin_lo", "bin_hi", "smc", "reference"] and len(hist) == 61
    diag = read_csv(out / "fppp_run000_diagnostics.csv")
    assert len(diag) == 4
    # '.' decimal, no thousands separators
    assert all("," not in cell for row in rows for cell in row)


def test_bench_rerun_from_saved_config_is_bit_exact(bench_run):
    _, out, tmp = bench_run
    again = tmp / "again"
    code = cli.main(["bench-gmm", "--config", str(out / "config.toml"), "--out", str(again)])
    assert code == 0
    for f in sorted(out.glob("*_run*.csv")):
        assert f.read_bytes() == (again / f.name).read_bytes(), f.name
    for name in ("summary.csv", "summary_by_estimator.csv"):
        assert strip_timing(read_csv(out / name)) == strip_timing(read_csv(again / name))
    assert (out / "target.json").read_bytes() == (again / "target.json").read_bytes()


def test_bench_worker_count_invariance(bench_run):
    _, out, tmp = bench_run
    code, par = bench(tmp, "parallel", extra=("--workers", "2"))
    assert code == 0
    for f in sorted(out.glob("*_run*.csv")):
        a, b = read_csv(f), read_csv(par / f.name)
        assert a[0] == b[0]
        np.testing.assert_allclose(np.array(a[1:], dtype=float), np.array(b[1:], dtype=float), rtol=1e-12, atol=0)


def test_bench_degenerate_runs_recorded(tmp_path, monkeypatch):
    def degenerate(*a, **k):
        raise DegenerateEnsemble("all particle weights underflowed", level=2, diagnostics=[])

    monkeypatch.setattr(cli, "run_smc", degenerate)
    doc = {**SMALL_BENCH, "bench": {**SMALL_BENCH["bench"], "estimators": ["fppp"]}}
    code, out = bench(tmp_path, "degen", doc)
    assert code == cli.EXIT_OK
    rows = read_csv(out / "summary.csv")
    assert [r[3] for r in rows[1:]] == ["degenerate", "degenerate"]
    code, _ = bench(tmp_path, "degen_strict", doc, extra=("--strict",))
    assert code == cli.EXIT_FAIL


@pytest.mark.slow
def test_stationary_smoke_config(tmp_path):
    code = cli.main(["bench-gmm", "--config", str(CONFIGS / "stationary_smoke.toml"), "--out", str(tmp_path / "s")])
    assert code == 0
    row = read_csv(tmp_path / "s" / "summary.csv")[1]
    cfg = load_config(CONFIGS / "stationary_smoke.toml")
    target = cfg.build_target()
    ref = sample_direct(target, np.random.default_rng([cfg.seed, 2**32]), cfg.bench.direct_samples)
    direct_fraction = modal_weights(target, ref)[0]
    assert float(row[4]) == direct_fraction
    assert float(row[5]) < 0.02
