"""Acceptance checks, one test per criterion.

Each test prints a single ``CRITERION k: PASS|FAIL ...`` line (also collected
into the terminal summary). The study criteria (6 to 9) run the shipped
experiment configurations end to end through the command-line interface.
"""
import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

import fdcheck
from conftest import CRITERIA
from gnnbayes.cli import main
from gnnbayes.estimator import ArchSpec, build_interval_estimator, count_parameters, layer_parameter_counts
from gnnbayes.evaluate import decreasing_trend_pvalue, toy_quantile_deviation, train_toy_quantile_network
from gnnbayes.graph import NeighbourRule
from gnnbayes.data import SpatialDataset
from gnnbayes.simulate import (
    ClusterProcessConfig,
    GPParams,
    SchlatherParams,
    UNIT_SQUARE,
    gp_prior,
    make_rng,
    matern_covariance,
    sample_matern_cluster,
    simulate_gp,
    simulate_schlather,
)
from gnnbayes.special import bessel_k, matern_correlation

EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"


def report(k: int, ok: bool, detail: str, seconds: float, budget: float):
    ok = ok and seconds <= budget
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail} [{seconds:.1f}s, budget {budget:.0f}s]"
    print(line)
    CRITERIA.append(line)
    assert ok, line


def cli(*args) -> int:
    return main([*args, "--workers", "1"])


def read_rows(path: Path) -> list[dict]:
    with open(path) as f:
        return list(csv.DictReader(l for l in f if not l.startswith("#")))


# ---------------------------------------------------------------- 1


def test_c01_parameter_accounting():
    t0 = time.perf_counter()
    ok = True
    for p in (2, 3):
        counts = [c for _, c in layer_parameter_counts(ArchSpec(p=p))]
        ok &= counts == [385, 32_897, 32_897, 32_897, 16_512, 16_512, 129 * p]
        ok &= count_parameters(ArchSpec(p=p)) == 132_100 + 129 * p
    report(1, ok, "per-layer 385/32,897/16,512/129p and totals 132,358 (p=2), 132,487 (p=3)",
           time.perf_counter() - t0, 1)


# ---------------------------------------------------------------- 2


def test_c02_gradient_fidelity():
    t0 = time.perf_counter()
    worst = {}
    for name in ("dense", "graph_conv", "readout_deepsets", "mae", "quantile"):
        worst[name] = max(getattr(fdcheck, name)(s).worst_rel_error for s in range(100))
    for kind in ("point", "interval"):
        worst[f"end_to_end_{kind}"] = max(fdcheck.end_to_end(s, kind).worst_rel_error for s in range(10))
    ok = all(v <= fdcheck.TOL for v in worst.values())
    detail = "worst rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" (tol {fdcheck.TOL:g})"
    report(2, ok, detail, time.perf_counter() - t0, 120)


# ---------------------------------------------------------------- 3


def test_c03_special_functions():
    t0 = time.perf_counter()
    x = np.linspace(0.01, 20.0, 5000)
    half = np.sqrt(np.pi / (2 * x)) * np.exp(-x)
    e_half = np.max(np.abs(bessel_k(0.5, x) / half - 1))
    e_three = np.max(np.abs(bessel_k(1.5, x) / (half * (1 + 1 / x)) - 1))
    mono, limit = True, 0.0
    h = np.linspace(0.0, 3.0, 600)
    for rho in (0.01, 0.05, 0.2, 1.0):
        for nu in (0.3, 0.5, 1.0, 1.7, 3.0):
            r = matern_correlation(h, rho, nu)
            mono &= bool(np.all(np.diff(r) <= 1e-15) and r[0] == 1.0)
            limit = max(limit, abs(1.0 - matern_correlation(1e-30 * rho, rho, nu)))
    ok = e_half <= 1e-10 and e_three <= 1e-10 and mono and limit < 1e-8
    report(3, ok, f"K_1/2 err {e_half:.1e}, K_3/2 err {e_three:.1e}, monotone={mono}, 1-r(0+)={limit:.1e}",
           time.perf_counter() - t0, 10)


# ---------------------------------------------------------------- 4


def test_c04_simulator_fidelity():
    t0 = time.perf_counter()
    # GP: 5-point sample covariance within 4 s.e. over 1e5 draws
    S = make_rng(40).random((5, 2))
    p = GPParams(1.0, 0.2, 1.0, 0.3)
    Sigma = matern_covariance(S, p.sigma2, p.rho, p.nu, p.tau)
    N = 100_000
    Z = simulate_gp(S, p, make_rng(41), m=N)
    se = np.sqrt((np.outer(np.diag(Sigma), np.diag(Sigma)) + Sigma**2) / N)
    gp_z = float(np.max(np.abs(Z.T @ Z / N - Sigma) / se))

    # Schlather margins: KS against unit Frechet at 1%
    Zs = simulate_schlather(make_rng(42).random((10, 2)), SchlatherParams(0.15, 1.5), make_rng(43), m=3000)
    ks = [stats.kstest(Zs[:, j], lambda z: np.exp(-1 / z)).pvalue for j in range(10)]
    ks_ok = sum(pv < 0.01 for pv in ks) <= 1

    # Schlather diagonal: P(Z1<=z, Z2<=z) = exp(-theta2/z)
    hh, rho, nu = 0.1, 0.2, 1.0
    Zd = simulate_schlather(np.array([[0.4, 0.4], [0.4 + hh, 0.4]]), SchlatherParams(rho, nu), make_rng(44), m=40_000)
    theta2 = 1 + math.sqrt((1 - matern_correlation(hh, rho, nu)) / 2)
    diag_z = 0.0
    for z in (0.5, 1.0, 3.0):
        pr = math.exp(-theta2 / z)
        ph = np.mean((Zd[:, 0] <= z) & (Zd[:, 1] <= z))
        diag_z = max(diag_z, abs(ph - pr) / math.sqrt(pr * (1 - pr) / len(Zd)))

    # cluster process: mean count lam * mu within 3 s.e.
    cfg = ClusterProcessConfig(lam=10, mu=25, delta=0.1)
    rng = make_rng(45)
    c = np.array([len(sample_matern_cluster(cfg, UNIT_SQUARE, rng)) for _ in range(1000)])
    cl_z = abs(c.mean() - 250) / (c.std(ddof=1) / math.sqrt(len(c)))

    ok = gp_z < 4 and ks_ok and diag_z < 4 and cl_z < 3
    report(4, ok, f"GP cov max |z|={gp_z:.2f}<4, KS min p={min(ks):.3f} ({sum(pv < 0.01 for pv in ks)}/10 below 0.01), "
                  f"diagonal max |z|={diag_z:.2f}<4, cluster mean {c.mean():.1f} vs 250 |z|={cl_z:.2f}<3",
           time.perf_counter() - t0, 300)


# ---------------------------------------------------------------- 5


def test_c05_conjugate_quantile_network():
    t0 = time.perf_counter()
    net = train_toy_quantile_network((0.025, 0.5, 0.975), seed=0)
    dev = toy_quantile_deviation(net, n_test=1000, seed=1)
    ok = all(v <= 0.05 for v in dev.values())
    report(5, ok, "mean |q_hat - q| " + ", ".join(f"q={q}: {v:.4f}" for q, v in dev.items()) + " (<= 0.05)",
           time.perf_counter() - t0, 600)


# ---------------------------------------------------------------- 6 and 7 (GP study)


@pytest.fixture(scope="module")
def gp_runs(tmp_path_factory):
    return tmp_path_factory.mktemp("gp")


def test_c06_gp_point_estimator_vs_ml(gp_runs):
    t0 = time.perf_counter()
    cfg = str(EXPERIMENTS / "gp.json")
    assert cli("train", "--config", cfg, "--out-dir", str(gp_runs / "point")) == 0
    ckpt = str(gp_runs / "point" / "estimator.ckpt")
    assert cli("assess", "--config", cfg, "--out-dir", str(gp_runs / "assess"),
               "--set", f"paths.checkpoint={json.dumps(ckpt)}") == 0
    summary = json.loads((gp_runs / "assess" / "summary.json").read_text())
    hist = read_rows(gp_runs / "point" / "history.csv")
    v0, vbest = float(hist[0]["val_risk"]), min(float(r["val_risk"]) for r in hist)
    g, m = summary["gnn"]["rmse"], summary["ml"]["rmse"]
    ratio = g / m
    ok = ratio <= 1.5 and vbest <= 0.5 * v0
    report(6, ok, f"RMSE GNN {g:.4f} vs ML {m:.4f} on {summary['suite']['K']} vectors, ratio {ratio:.3f} <= 1.5; "
                  f"validation risk {v0:.3f} -> {vbest:.4f} over {len(hist) - 1} epochs",
           time.perf_counter() - t0, 3600)


def test_c07_gp_interval_coverage(gp_runs):
    t0 = time.perf_counter()
    cfg = str(EXPERIMENTS / "gp.json")
    assert cli("train", "--config", cfg, "--out-dir", str(gp_runs / "interval"), "--set", "task=quantiles") == 0
    ckpt = str(gp_runs / "interval" / "estimator.ckpt")
    assert cli("coverage", "--config", cfg, "--out-dir", str(gp_runs / "coverage"), "--set", "task=quantiles",
               "--set", f"paths.checkpoint={json.dumps(ckpt)}") == 0
    rows = read_rows(gp_runs / "coverage" / "coverage.csv")
    cov = {r["param"]: float(r["coverage"]) for r in rows}
    n = int(rows[0]["n_theta"]) * int(rows[0]["n_datasets"])
    ok = all(0.90 <= v <= 0.98 for v in cov.values()) and n == 1000
    report(7, ok, "coverage " + ", ".join(f"{k}={v:.3f}" for k, v in cov.items())
           + f" in [0.90, 0.98] at nominal 0.95 over {n} datasets", time.perf_counter() - t0, 3600)


# ---------------------------------------------------------------- 8


def test_c08_schlather_vs_pairwise_likelihood(tmp_path):
    t0 = time.perf_counter()
    cfg = str(EXPERIMENTS / "schlather.json")
    assert cli("train", "--config", cfg, "--out-dir", str(tmp_path / "point")) == 0
    ckpt = f"paths.checkpoint={json.dumps(str(tmp_path / 'point' / 'estimator.ckpt'))}"
    assert cli("assess", "--config", cfg, "--out-dir", str(tmp_path / "assess"), "--set", ckpt) == 0
    assert cli("bench", "--config", cfg, "--out-dir", str(tmp_path / "bench"), "--set", ckpt) == 0
    summary = json.loads((tmp_path / "assess" / "summary.json").read_text())
    times = {r["estimator"]: float(r["seconds"]) for r in read_rows(tmp_path / "bench" / "timing.csv")}
    g, pl = summary["gnn"]["rmse"], summary["pl"]["rmse"]
    speedup = times["pl"] / times["gnn"]
    ok = g < pl and speedup >= 10
    report(8, ok, f"RMSE GNN {g:.4f} < PL {pl:.4f} on {summary['suite']['K']} vectors (n=100, m=10); "
                  f"per-fit {times['gnn'] * 1e3:.1f} ms vs {times['pl']:.2f} s, speedup {speedup:.0f}x >= 10",
           time.perf_counter() - t0, 5400)


# ---------------------------------------------------------------- 9


def test_c09_variable_sample_size(tmp_path):
    t0 = time.perf_counter()
    cfg = str(EXPERIMENTS / "variable_n.json")
    runs = {"range": [], "fixed30": ["--set", "locations.n_range=[30,30]"],
            "fixed300": ["--set", "locations.n_range=[300,300]"]}
    for name, extra in runs.items():
        assert cli("train", "--config", cfg, "--out-dir", str(tmp_path / name), *extra) == 0
    compare = {k: str(tmp_path / k / "estimator.ckpt") for k in ("fixed30", "fixed300")}
    assert cli("assess", "--config", cfg, "--out-dir", str(tmp_path / "assess"),
               "--set", f"paths.checkpoint={json.dumps(str(tmp_path / 'range' / 'estimator.ckpt'))}",
               "--set", f"assess.compare={json.dumps(compare)}") == 0
    rows = read_rows(tmp_path / "assess" / "variable_n.csv")
    curve = {(r["estimator"], int(r["n"])): float(r["rmse"]) for r in rows}
    grid = [30, 60, 100, 150, 200, 300]
    rng_curve = [curve[("gnn", n)] for n in grid]
    pval = decreasing_trend_pvalue(grid, rng_curve)
    beats_small = curve[("gnn", 300)] < curve[("fixed30", 300)]
    beats_large = curve[("gnn", 30)] < curve[("fixed300", 30)]
    extrap = curve[("gnn", 450)] < curve[("prior_midpoint", 450)]
    ok = pval < 0.05 and beats_small and beats_large and extrap
    report(9, ok, "range-trained RMSE " + "/".join(f"{v:.3f}" for v in rng_curve)
           + f" at n={grid}, Kendall p={pval:.4f} < 0.05; n=300: {curve[('gnn', 300)]:.3f} < fixed-30 "
             f"{curve[('fixed30', 300)]:.3f}; n=30: {curve[('gnn', 30)]:.3f} < fixed-300 {curve[('fixed300', 30)]:.3f}; "
             f"n=450: {curve[('gnn', 450)]:.3f} < midpoint {curve[('prior_midpoint', 450)]:.3f}",
           time.perf_counter() - t0, 2700)


# ---------------------------------------------------------------- 10


def test_c10_interval_structure():
    t0 = time.perf_counter()
    prior = gp_prior()
    a, b = prior.lower_array, prior.upper_array
    arch = ArchSpec(p=2, n_layers=2, channels=8, hidden=(8,), rule=NeighbourRule(0.3, 10))
    violations, total = 0, 0
    # random pre-logistic network outputs, far into the saturated range
    iv = build_interval_estimator(arch, prior, make_rng(0))
    rng = make_rng(1)
    u = rng.standard_normal((10_000, 2)) * rng.choice([1, 10, 100, 1e4], (10_000, 1))
    v = rng.standard_normal((10_000, 2)) * rng.choice([1, 5, 50], (10_000, 1))
    lo, hi = iv.endpoints(u, v)
    violations += int(np.sum(~((a < lo) & (lo < hi) & (hi < b))))
    total += len(u)
    # random datasets through randomly initialised networks with inflated weights
    for s in range(20):
        net = build_interval_estimator(arch, prior, make_rng(100 + s))
        for w in net.named_params().values():
            w *= 1 + 4 * (s % 5)
        data = []
        for k in range(500):
            r = make_rng(200 + s, k)
            n = int(r.integers(1, 40))
            data.append(SpatialDataset.shared(r.random((n, 2)), r.standard_normal((int(r.integers(1, 4)), n)) * 10))
        lo, hi = net.interval(data, reproducible=True)
        violations += int(np.sum(~((a < lo) & (lo < hi) & (hi < b))))
        total += len(data)
    report(10, violations == 0, f"{violations} violations of a < lower < upper < b over {total} random inputs",
           time.perf_counter() - t0, 60)


# ---------------------------------------------------------------- 11


def test_c11_cli_determinism(tmp_path):
    t0 = time.perf_counter()
    tiny = {
        "model": "gp", "seed": 11, "locations": {"n_range": [30, 30]}, "simulate": {"K": 2},
        "arch": {"n_layers": 2, "channels": 4, "hidden": [8]},
        "train": {"K_train": 16, "K_val": 8, "J": 1, "max_epochs": 2, "batch_size": 8},
        "coverage": {"n_theta": 4, "n_datasets": 2},
        "assess": {"K": 3, "baseline_restarts": 0, "sampling_reps": 2, "n_grid": [20, 40]},
        "bench": {"n_grid": [30, 60], "reps": 2, "baseline_reps": 1},
    }
    (tmp_path / "c.json").write_text(json.dumps(tiny))
    base = ["--config", str(tmp_path / "c.json"), "--reproducible"]
    prep = tmp_path / "prep"
    assert cli("train", *base, "--out-dir", str(prep / "p")) == 0
    assert cli("train", *base, "--out-dir", str(prep / "q"), "--set", "task=quantiles") == 0
    assert cli("simulate", *base, "--out-dir", str(prep / "s")) == 0
    pc = f"paths.checkpoint={json.dumps(str(prep / 'p' / 'estimator.ckpt'))}"
    qc = f"paths.checkpoint={json.dumps(str(prep / 'q' / 'estimator.ckpt'))}"
    data = f"paths.data={json.dumps(str(prep / 's' / 'data' / 'dataset_0001.csv'))}"
    commands = {
        "simulate": [], "train": [], "train-quantiles": ["--set", "task=quantiles"],
        "estimate": ["--set", pc, "--set", data], "estimate-rescale": ["--set", pc, "--set", data, "--rescale"],
        "assess": ["--set", pc], "coverage": ["--set", qc, "--set", "task=quantiles"], "bench": ["--set", pc],
    }
    identical = []
    for name, extra in commands.items():
        cmd = name.split("-")[0]
        outs = []
        for r in ("a", "b"):
            d = tmp_path / name / r
            assert cli(cmd, *base, "--out-dir", str(d), *extra) == 0
            outs.append({str(f.relative_to(d)): f.read_bytes() for f in sorted(d.rglob("*")) if f.is_file()})
        identical.append(bool(outs[0]) and outs[0] == outs[1])
    ok = all(identical)
    report(11, ok, f"{sum(identical)}/{len(identical)} command runs byte-identical on rerun "
                   f"({', '.join(commands)})", time.perf_counter() - t0, 300)
