"""Command-line entry point: ``gnnbayes <command> --config run.json [flags]``.

Commands: simulate, train, estimate, assess, coverage, bench. Settings come
from a JSON file layered over profile defaults (``desk`` or ``paper``);
command-line flags override both. Every output file carries the config hash
and seed in a leading ``#`` line (or in the metadata for checkpoints).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .baselines import fit_results_csv, ml_estimate_gp, pl_estimate_schlather
from .data import SpatialDataset, read_dataset, write_dataset
from .estimator import (ArchSpec, CheckpointError, build_interval_estimator, build_point_estimator,
                        load_checkpoint, save_checkpoint)
from .evaluate import (empirical_coverage, make_test_suite, reference_configurations, rmse_from_estimates,
                       rmse_on_test, rows_to_csv, sampling_distribution,
                       sampling_distribution_csv, summary_json, timing_benchmark, variable_n_curve)
from .graph import NeighbourRule, rescale_to_unit_square
from .simulate import LocationPrior, PriorSpec, make_rng, sample_locations, sample_prior, simulate_fields
from .train import SimulationTask, TrainConfig, TrainingError, train

log = logging.getLogger("gnnbayes")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_CHECKPOINT = 4
EXIT_MISMATCH = 5
EXIT_VALIDATION = 6

COMMANDS = ("simulate", "train", "estimate", "assess", "coverage", "bench")


class CLIError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


# ----------------------------------------------------------------------------
# Configuration schema
# ----------------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LocationsConfig(_Strict):
    kind: Literal["cluster", "uniform"] = "cluster"
    n_range: tuple[int, int] = (100, 100)
    lam_range: tuple[float, float] = (10.0, 100.0)
    delta_range: tuple[float, float] = (0.1, 0.1)


class ArchConfig(_Strict):
    n_layers: int = Field(4, ge=1)
    channels: int = Field(64, ge=1)
    hidden: list[int] = [64, 64]
    radius: float = Field(0.2, gt=0)
    max_neighbours: int = Field(30, ge=1)
    strategy: Literal["random", "minmax"] = "random"
    input_transform: Literal["identity", "log"] = "identity"
    gamma0: float = Field(0.1, gt=0)


class TrainSection(_Strict):
    K_train: int = Field(1000, ge=1)
    K_val: int = Field(200, ge=1)
    J: int = Field(5, ge=1)
    m: int = Field(1, ge=1)
    batch_size: int = Field(32, ge=1)
    patience: int = Field(5, ge=1)
    max_epochs: int = Field(100, ge=1)
    lr: float = Field(1e-3, gt=0)


class SimulateSection(_Strict):
    K: int = Field(10, ge=1)
    m: int = Field(1, ge=1)


class AssessSection(_Strict):
    K: int = Field(200, ge=1)
    m: int = Field(1, ge=1)
    baseline: bool = True
    baseline_restarts: int = Field(4, ge=0)
    theta0: Optional[list[float]] = None
    sampling_reps: int = Field(0, ge=0)
    n_grid: list[int] = []
    compare: dict[str, str] = {}


class CoverageSection(_Strict):
    n_theta: int = Field(200, ge=1)
    n_datasets: int = Field(5, ge=1)
    m: int = Field(1, ge=1)


class BenchSection(_Strict):
    n_grid: list[int] = [100, 200, 400, 800]
    reps: int = Field(20, ge=1)
    baseline_reps: int = Field(3, ge=1)
    m: int = Field(1, ge=1)


class PathsSection(_Strict):
    checkpoint: Optional[str] = None
    data: Optional[str] = None
    out_dir: str = "out"


class RunConfig(_Strict):
    model: Literal["gp", "schlather"] = "gp"
    task: Literal["point", "quantiles"] = "point"
    profile: Literal["desk", "paper"] = "desk"
    seed: int = 0
    workers: int = Field(1, ge=1)
    reproducible: bool = False
    rescale: bool = False
    prior: dict[str, tuple[float, float]]
    fixed: dict[str, float] = {}
    quantiles: tuple[float, float] = (0.025, 0.975)
    locations: LocationsConfig = LocationsConfig()
    arch: ArchConfig = ArchConfig()
    train: TrainSection = TrainSection()
    simulate: SimulateSection = SimulateSection()
    assess: AssessSection = AssessSection()
    coverage: CoverageSection = CoverageSection()
    bench: BenchSection = BenchSection()
    paths: PathsSection = PathsSection()

    @field_validator("prior")
    @classmethod
    def _prior_boxes(cls, v):
        if not v:
            raise ValueError("prior must name at least one parameter")
        for k, (a, b) in v.items():
            if not a < b:
                raise ValueError(f"prior for {k}: lower bound must be below upper bound")
        return v

    @field_validator("quantiles")
    @classmethod
    def _levels(cls, v):
        if not 0 < v[0] < v[1] < 1:
            raise ValueError("quantile levels must satisfy 0 < q1 < q2 < 1")
        return v

    @model_validator(mode="after")
    def _model_params(self):
        allowed = {"gp": {"tau", "rho", "sigma2", "nu"}, "schlather": {"rho", "nu"}}[self.model]
        for k in (*self.prior, *self.fixed):
            if k not in allowed:
                raise ValueError(f"parameter {k!r} does not belong to model {self.model!r}")
        overlap = set(self.prior) & set(self.fixed)
        if overlap:
            raise ValueError(f"parameters both estimated and fixed: {sorted(overlap)}")
        return self

    def prior_spec(self, locations: LocationsConfig | None = None) -> PriorSpec:
        loc = locations or self.locations
        names = tuple(self.prior)
        return PriorSpec(names, tuple(self.prior[k][0] for k in names), tuple(self.prior[k][1] for k in names),
                         LocationPrior(**loc.model_dump()))

    def sim_task(self) -> SimulationTask:
        return SimulationTask(self.model, self.prior_spec(), dict(self.fixed))

    def arch_spec(self) -> ArchSpec:
        a = self.arch
        return ArchSpec(p=len(self.prior), n_layers=a.n_layers, channels=a.channels, hidden=tuple(a.hidden),
                        final_activation="exp", input_transform=a.input_transform, gamma0=a.gamma0,
                        rule=NeighbourRule(a.radius, a.max_neighbours, a.strategy))


MODEL_DEFAULTS = {
    "gp": {"prior": {"tau": [0.1, 1.0], "rho": [0.05, 0.3]}, "fixed": {"sigma2": 1.0, "nu": 1.0}},
    "schlather": {"prior": {"rho": [0.05, 0.3], "nu": [0.5, 2.5]}, "fixed": {},
                  "arch": {"input_transform": "log"}},
}

PROFILES = {
    "desk": {"arch": {"channels": 64, "hidden": [64, 64]},
             "train": {"K_train": 1000, "K_val": 200},
             "locations": {"n_range": [100, 100]}},
    "paper": {"arch": {"channels": 128, "hidden": [128, 128]},
              "train": {"K_train": 10000, "K_val": 2000},
              "locations": {"n_range": [250, 250]},
              "coverage": {"n_theta": 3000, "n_datasets": 10},
              "assess": {"K": 1000}},
}

# replicates per dataset when not configured
REPLICATES = {("gp", "desk"): 1, ("gp", "paper"): 1, ("schlather", "desk"): 10, ("schlather", "paper"): 20}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("prior", "fixed", "compare"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict, overrides: dict) -> RunConfig:
    """Model defaults < profile defaults < config file < command-line flags."""
    if not isinstance(raw, dict):
        raise CLIError("configuration must be a JSON object", EXIT_CONFIG)
    merged = _merge(raw, overrides)
    model = merged.get("model", "gp")
    profile = merged.get("profile", "desk")
    if model not in MODEL_DEFAULTS:
        raise CLIError(f"unknown model {model!r}", EXIT_CONFIG)
    if profile not in PROFILES:
        raise CLIError(f"unknown profile {profile!r}", EXIT_CONFIG)
    m = REPLICATES[(model, profile)]
    base = _merge(MODEL_DEFAULTS[model], PROFILES[profile])
    base = _merge(base, {s: {"m": m} for s in ("train", "simulate", "assess", "coverage", "bench")})
    try:
        return RunConfig.model_validate(_merge(base, merged))
    except ValidationError as e:
        raise CLIError(f"invalid configuration:\n{e}", EXIT_CONFIG) from None


def config_hash(cfg: RunConfig) -> str:
    """Hash of every setting that can change results (not paths or workers)."""
    d = cfg.model_dump(mode="json")
    d.pop("workers")
    d["paths"].pop("out_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------


class Run:
    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.out = Path(cfg.paths.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []

    @property
    def header(self) -> list[str]:
        return [f"command={self.command} config_sha256={self.hash} seed={self.cfg.seed} "
                f"model={self.cfg.model} profile={self.cfg.profile}"]

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.written.append(path)
        return path

    def seconds(self, s: float):
        return "NA" if self.cfg.reproducible else round(s, 6)

    def load_estimator(self, kind: str | None = None, path: str | None = None):
        path = path or self.cfg.paths.checkpoint
        if not path:
            raise CLIError("no checkpoint given (paths.checkpoint)", EXIT_CONFIG)
        if not Path(path).is_file():
            raise CLIError(f"checkpoint not found: {path}", EXIT_MISSING_FILE)
        try:
            est, arch, meta = load_checkpoint(path)
        except (CheckpointError, ValueError, KeyError) as e:
            raise CLIError(f"cannot load checkpoint: {e}", EXIT_CHECKPOINT) from None
        if meta.get("model", self.cfg.model) != self.cfg.model:
            raise CLIError(f"checkpoint was trained for model {meta.get('model')!r}, "
                           f"config says {self.cfg.model!r}", EXIT_MISMATCH)
        if tuple(est.names) != tuple(self.cfg.prior):
            raise CLIError(f"checkpoint estimates {list(est.names)}, config prior names "
                           f"{list(self.cfg.prior)}", EXIT_MISMATCH)
        if kind is not None and est.kind != kind:
            raise CLIError(f"command needs the {kind} estimator kind, checkpoint holds {est.kind}",
                           EXIT_MISMATCH)
        return est

    def point_fn(self, est):
        repro = self.cfg.reproducible
        rng = make_rng(self.cfg.seed, 30)
        return lambda ds: est.predict(ds, rng, repro).astype(np.float64)

    def interval_fn(self, est):
        repro = self.cfg.reproducible
        rng = make_rng(self.cfg.seed, 31)
        return lambda ds: est.interval(ds, rng, repro)


def cmd_simulate(run: Run) -> dict:
    cfg = run.cfg
    task = cfg.sim_task()
    thetas = sample_prior(task.prior, cfg.simulate.K, make_rng(cfg.seed, 0))
    rows = []
    (run.out / "data").mkdir(exist_ok=True)
    for k, th in enumerate(thetas, start=1):
        rng = make_rng(cfg.seed, 1, k)
        S = sample_locations(task.prior.locations, rng)
        Z = simulate_fields(task.model, dict(zip(task.prior.names, th)), S, cfg.simulate.m, rng, task.fixed)
        fname = f"data/dataset_{k:04d}.csv"
        labels = " ".join(f"{n}={v!r}" for n, v in zip(task.prior.names, th))
        write_dataset(run.out / fname, SpatialDataset.shared(S, Z), run.header + [labels])
        run.written.append(run.out / fname)
        rows.append({"dataset_id": k, "file": fname, **dict(zip(task.prior.names, map(float, th))),
                     "n": len(S), "m": cfg.simulate.m})
    run.write("manifest.csv", rows_to_csv(rows, run.header))
    return {"datasets": len(rows)}


def cmd_train(run: Run) -> dict:
    cfg = run.cfg
    task = cfg.sim_task()
    arch = cfg.arch_spec()
    rng = make_rng(cfg.seed, 20)
    if cfg.task == "point":
        est = build_point_estimator(arch, task.prior.names, rng)
    else:
        est = build_interval_estimator(arch, task.prior, rng, cfg.quantiles)
    t = cfg.train
    tc = TrainConfig(K_train=t.K_train, K_val=t.K_val, J=t.J, m=t.m, batch_size=t.batch_size,
                     patience=t.patience, max_epochs=t.max_epochs, lr=t.lr, seed=cfg.seed,
                     reproducible=cfg.reproducible, workers=cfg.workers)
    t0 = time.perf_counter()
    try:
        est, hist = train(est, task, tc)
    except (TrainingError, FloatingPointError) as e:
        raise CLIError(f"training failed: {e}", EXIT_VALIDATION) from None
    meta = {"config_sha256": run.hash, "seed": cfg.seed, "model": cfg.model, "task": cfg.task,
            "fixed": cfg.fixed, "prior": {k: list(v) for k, v in cfg.prior.items()},
            "best_epoch": hist.best_epoch, "best_val_risk": hist.best_val_risk}
    save_checkpoint(run.out / "estimator.ckpt", est, meta)
    run.written.append(run.out / "estimator.ckpt")
    run.write("history.csv", "\n".join(f"# {h}" for h in run.header) + "\n"
              + hist.to_csv(with_timing=not cfg.reproducible))
    return {"best_epoch": hist.best_epoch, "stopped_epoch": hist.stopped_epoch,
            "initial_val_risk": hist.initial_val_risk, "best_val_risk": hist.best_val_risk,
            "seconds": run.seconds(time.perf_counter() - t0)}


def _rescaled(ds: SpatialDataset) -> tuple[SpatialDataset, float]:
    allS = np.vstack(ds.coords)
    _, c = rescale_to_unit_square(allS)
    lo = allS.min(axis=0)
    return SpatialDataset([(S - lo) / c for S in ds.coords], ds.values), c


def cmd_estimate(run: Run) -> dict:
    cfg = run.cfg
    est = run.load_estimator()
    path = cfg.paths.data
    if not path:
        raise CLIError("no dataset given (paths.data)", EXIT_CONFIG)
    if not Path(path).is_file():
        raise CLIError(f"dataset not found: {path}", EXIT_MISSING_FILE)
    try:
        ds = read_dataset(path)
    except ValueError as e:
        raise CLIError(str(e), EXIT_VALIDATION) from None
    scale = 1.0
    if cfg.rescale:
        ds, scale = _rescaled(ds)
    rep = est.estimate(ds, make_rng(cfg.seed, 32), reproducible=cfg.reproducible)
    for arr in (rep.estimate, rep.lower, rep.upper):
        if arr is None:
            continue
        if not np.all(np.isfinite(arr)):
            raise CLIError("estimator produced non-finite output", EXIT_VALIDATION)
        if cfg.rescale and "rho" in est.names:
            arr[est.names.index("rho")] *= scale
    extra = [f"rescale_factor={scale!r}"] if cfg.rescale else []
    run.write("estimate.csv", "\n".join(f"# {h}" for h in run.header + extra) + "\n"
              + rep.to_csv(with_timing=not cfg.reproducible))
    return {"m": ds.m, "n": ds.sizes[0] if ds.m == 1 else ds.sizes}


def _baseline_fit(cfg: RunConfig, ds: SpatialDataset, k: int):
    bounds = [tuple(cfg.prior[n]) for n in cfg.prior]
    rng = make_rng(cfg.seed, 40, k)
    restarts = cfg.assess.baseline_restarts
    if cfg.model == "gp":
        return ml_estimate_gp(np.asarray(ds.values), ds.coords[0], bounds, tuple(cfg.prior), cfg.fixed, rng, restarts)
    return pl_estimate_schlather(ds, bounds, 0.2, rng, restarts)


def cmd_assess(run: Run) -> dict:
    cfg = run.cfg
    task = cfg.sim_task()
    est = run.load_estimator("point")
    gnn = run.point_fn(est)
    a = cfg.assess
    suite = make_test_suite(task, a.K, a.m, cfg.seed)
    t0 = time.perf_counter()
    rep = rmse_on_test(gnn, suite)
    gnn_secs = (time.perf_counter() - t0) / len(suite)
    rows = [{"estimator": "gnn", "param": k, "rmse": v} for k, v in rep.per_param.items()]
    rows.append({"estimator": "gnn", "param": "all", "rmse": rep.overall})
    summary = {"suite": suite.meta, "gnn": {**rep.to_dict(), "seconds_per_dataset": run.seconds(gnn_secs)}}
    base_name = "ml" if cfg.model == "gp" else "pl"
    if a.baseline:
        fits = [_baseline_fit(cfg, ds, k) for k, ds in enumerate(suite.datasets)]
        est_b = np.array([f.x for f in fits])
        brep = rmse_from_estimates(suite.names, suite.thetas, est_b)
        rows += [{"estimator": base_name, "param": k, "rmse": v} for k, v in brep.per_param.items()]
        rows.append({"estimator": base_name, "param": "all", "rmse": brep.overall})
        secs = float(np.mean([f.seconds for f in fits]))
        summary[base_name] = {**brep.to_dict(), "seconds_per_dataset": run.seconds(secs),
                              "converged": int(sum(f.converged for f in fits))}
        summary["rmse_ratio_gnn_to_" + base_name] = rep.overall / brep.overall
        run.write(f"{base_name}_fits.csv", fit_results_csv(
            [(k + 1, suite.names, f) for k, f in enumerate(fits)], run.header, not cfg.reproducible))
    run.write("rmse.csv", rows_to_csv(rows, run.header))

    if a.sampling_reps > 0:
        theta0 = np.asarray(a.theta0 if a.theta0 is not None else task.prior.midpoint, dtype=np.float64)
        if len(theta0) != task.prior.p:
            raise CLIError("assess.theta0 has the wrong length", EXIT_CONFIG)
        n = cfg.locations.n_range[1]
        configs = reference_configurations(n, cfg.seed)
        samples = sampling_distribution(gnn, task, theta0, configs, a.sampling_reps, a.m, cfg.seed)
        text = sampling_distribution_csv(suite.names, samples, "gnn", run.header)
        summary["sampling_median"] = {str(c): dict(zip(suite.names, np.median(s, axis=0).tolist()))
                                      for c, s in enumerate(samples)}
        run.write("sampling.csv", text)
        cfg_rows = [{"configuration": c, "x": float(x), "y": float(y)}
                    for c, S in enumerate(configs) for x, y in S]
        run.write("configurations.csv", rows_to_csv(cfg_rows, run.header))

    if a.n_grid:
        fns = {"gnn": gnn}
        for name, path in a.compare.items():
            fns[name] = run.point_fn(run.load_estimator("point", path))
        mid = task.prior.midpoint
        fns["prior_midpoint"] = lambda ds: np.tile(mid, (len(ds), 1))
        curve = variable_n_curve(fns, a.n_grid, task, a.K, a.m, cfg.seed)
        run.write("variable_n.csv", rows_to_csv(curve, run.header))
        summary["variable_n"] = curve
    run.write("summary.json", summary_json({"header": run.header[0], **summary}))
    return {"rmse": rep.overall}


def cmd_coverage(run: Run) -> dict:
    cfg = run.cfg
    est = run.load_estimator("interval")
    c = cfg.coverage
    nominal = cfg.quantiles[1] - cfg.quantiles[0]
    if not np.allclose(est.q, cfg.quantiles):
        raise CLIError(f"checkpoint quantile levels {est.q} differ from config {cfg.quantiles}", EXIT_MISMATCH)
    rep = empirical_coverage(run.interval_fn(est), cfg.sim_task(), c.n_theta, c.n_datasets, nominal,
                             c.m, cfg.seed)
    run.write("coverage.csv", rep.to_csv(run.header))
    run.write("summary.json", summary_json({"header": run.header[0], "coverage": rep.coverage,
                                            "nominal": nominal, "n_theta": rep.n_theta,
                                            "n_datasets": rep.n_datasets}))
    return {"coverage": rep.coverage}


def cmd_bench(run: Run) -> dict:
    cfg = run.cfg
    task = cfg.sim_task()
    est = run.load_estimator()
    b = cfg.bench
    theta = dict(zip(task.prior.names, task.prior.midpoint))
    data = {}
    for i, n in enumerate(b.n_grid):
        loc = LocationPrior(**{**cfg.locations.model_dump(), "n_range": (n, n)})
        rng = make_rng(cfg.seed, 50, i)
        S = sample_locations(loc, rng)
        data[n] = SpatialDataset.shared(S, simulate_fields(task.model, theta, S, b.m, rng, task.fixed))
    fns = {"gnn": lambda ds: est.predict([ds], reproducible=True)}
    reps = {"gnn": b.reps}
    if cfg.assess.baseline:
        name = "ml" if cfg.model == "gp" else "pl"
        fns[name] = lambda ds: _baseline_fit(cfg, ds, 0)
        reps[name] = b.baseline_reps
    rows = timing_benchmark(fns, data, reps)
    if cfg.reproducible:
        for r in rows:
            r["seconds"] = "NA"
    run.write("timing.csv", rows_to_csv(rows, run.header))
    return {"rows": len(rows)}


HANDLERS = {"simulate": cmd_simulate, "train": cmd_train, "estimate": cmd_estimate,
            "assess": cmd_assess, "coverage": cmd_coverage, "bench": cmd_bench}


# ----------------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------------


def _parse_set(items: list[str]) -> dict:
    out: dict = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise CLIError(f"--set expects key=value, got {item!r}", EXIT_CONFIG)
        try:
            value = json.loads(val)
        except json.JSONDecodeError:
            value = val
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gnnbayes", description="Neural Bayes estimation for irregular spatial data")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--profile", choices=("desk", "paper"))
    ap.add_argument("--workers", type=int, help="worker processes (default: available cores)")
    ap.add_argument("--rescale", action="store_true", default=None,
                    help="map locations to the unit square before estimating")
    ap.add_argument("--reproducible", action="store_true", default=None,
                    help="deterministic neighbour sampling; timings written as NA")
    ap.add_argument("--out-dir")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override any config entry, e.g. locations.n_range=[30,30]")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        raw = {}
        if args.config:
            if not Path(args.config).is_file():
                raise CLIError(f"config not found: {args.config}", EXIT_MISSING_FILE)
            try:
                raw = json.loads(Path(args.config).read_text())
            except json.JSONDecodeError as e:
                raise CLIError(f"{args.config}: invalid JSON ({e})", EXIT_CONFIG) from None
        overrides = _parse_set(args.set)
        for key, val in (("seed", args.seed), ("profile", args.profile), ("rescale", args.rescale),
                         ("reproducible", args.reproducible)):
            if val is not None:
                overrides[key] = val
        overrides["workers"] = args.workers or raw.get("workers") or os.cpu_count() or 1
        if args.out_dir:
            overrides.setdefault("paths", {})["out_dir"] = args.out_dir
        cfg = resolve_config(raw, overrides)
        run = Run(args.command, cfg)
        result = HANDLERS[args.command](run)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except KeyboardInterrupt:
        return 130
    print(json.dumps({"command": args.command, "outputs": [str(p) for p in run.written], **result},
                     default=lambda o: o.item() if isinstance(o, np.generic) else str(o)))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
