"""Assessment procedures: RMSE on prior-drawn test suites, interval coverage,
sampling distributions, RMSE against sample size, timing, and a conjugate
Gaussian toy model where the posterior quantiles are known exactly.

Estimators enter as plain functions so neural and likelihood-based
estimators are scored the same way:

* point: ``fn(list[SpatialDataset]) -> (B, p) array``
* interval: ``fn(list[SpatialDataset]) -> (lower, upper)``, each ``(B, p)``
"""
from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from scipy import stats

from .data import SpatialDataset
from .nn import AdamState, DenseLayer, adam_update, quantile_loss, quantile_loss_grad
from .simulate import LocationPrior, make_rng, sample_locations, sample_prior, simulate_fields

# stream ids for suites under a report seed
_SUITE_THETA, _SUITE_DATA, _COVER_THETA, _COVER_DATA, _SAMPLING, _CONFIGS = range(10, 16)


@dataclass
class TestSuite:
    """Parameter vectors with one simulated dataset each.

    ``meta`` records how the suite was made (model, n range, m, location
    family, seed) so it can be regenerated.
    """

    __test__ = False  # not a pytest class

    names: tuple[str, ...]
    thetas: np.ndarray
    datasets: list[SpatialDataset]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.datasets)


def make_test_suite(task, K: int, m: int, seed: int, locations: LocationPrior | None = None,
                    thetas: np.ndarray | None = None) -> TestSuite:
    """``K`` prior draws, each with one dataset of ``m`` replicates on fresh locations.

    ``task`` is a ``SimulationTask``; ``locations`` overrides its location prior.
    """
    loc = locations or task.prior.locations
    if thetas is None:
        thetas = sample_prior(task.prior, K, make_rng(seed, _SUITE_THETA))
    datasets = []
    for k, th in enumerate(thetas):
        rng = make_rng(seed, _SUITE_DATA, k)
        S = sample_locations(loc, rng)
        Z = simulate_fields(task.model, dict(zip(task.prior.names, th)), S, m, rng, task.fixed)
        datasets.append(SpatialDataset.shared(S, Z))
    meta = {"model": task.model, "K": len(thetas), "m": m, "seed": seed,
            "n_range": list(loc.n_range), "locations": loc.kind}
    return TestSuite(task.prior.names, np.asarray(thetas, dtype=np.float64), datasets, meta)


def batched(fn, datasets: list[SpatialDataset], size: int = 64):
    """Apply an estimator function in chunks and stack the results."""
    outs = [fn(datasets[i:i + size]) for i in range(0, len(datasets), size)]
    if isinstance(outs[0], tuple):
        return tuple(np.concatenate(parts) for parts in zip(*outs))
    return np.concatenate([np.asarray(o, dtype=np.float64) for o in outs])


# ----------------------------------------------------------------------------
# RMSE
# ----------------------------------------------------------------------------


@dataclass
class RMSEReport:
    names: tuple[str, ...]
    overall: float
    per_param: dict[str, float]
    estimates: np.ndarray

    def to_dict(self) -> dict:
        return {"rmse": self.overall, "per_param": self.per_param}


def rmse_from_estimates(names, thetas, estimates) -> RMSEReport:
    err = np.asarray(estimates, dtype=np.float64) - np.asarray(thetas, dtype=np.float64)
    per = np.sqrt(np.mean(err**2, axis=0))
    return RMSEReport(tuple(names), float(np.sqrt(np.mean(err**2))),
                      {k: float(v) for k, v in zip(names, per)}, np.asarray(estimates))


def rmse_on_test(estimator_fn, suite: TestSuite) -> RMSEReport:
    """Root mean squared error over datasets and parameters, plus a per-parameter split."""
    if len(suite) == 0:
        raise ValueError("empty test suite")
    est = batched(estimator_fn, suite.datasets)
    if est.shape != suite.thetas.shape:
        raise ValueError(f"estimator returned shape {est.shape}, expected {suite.thetas.shape}")
    return rmse_from_estimates(suite.names, suite.thetas, est)


# ----------------------------------------------------------------------------
# Coverage
# ----------------------------------------------------------------------------


@dataclass
class CoverageReport:
    names: tuple[str, ...]
    coverage: dict[str, float]
    nominal: float
    n_theta: int
    n_datasets: int

    @property
    def count(self) -> int:
        return self.n_theta * self.n_datasets

    def to_csv(self, header_lines=None) -> str:
        out = [f"# {h}" for h in header_lines or []]
        out.append("param,coverage,nominal,n_theta,n_datasets")
        for k in self.names:
            out.append(f"{k},{self.coverage[k]!r},{self.nominal!r},{self.n_theta},{self.n_datasets}")
        return "\n".join(out) + "\n"


def coverage_from_intervals(names, thetas, lower, upper, nominal, n_theta, n_datasets) -> CoverageReport:
    inside = (lower <= thetas) & (thetas <= upper)
    cov = inside.mean(axis=0)
    return CoverageReport(tuple(names), {k: float(c) for k, c in zip(names, cov)},
                          float(nominal), n_theta, n_datasets)


def empirical_coverage(interval_fn, task, n_theta: int, n_datasets: int, nominal: float = 0.95,
                       m: int = 1, seed: int = 0) -> CoverageReport:
    """Fraction of intervals containing the true value over ``n_theta`` prior
    draws with ``n_datasets`` simulated datasets each, each on its own
    locations from the task's location prior."""
    thetas = sample_prior(task.prior, n_theta, make_rng(seed, _COVER_THETA))
    all_theta = np.repeat(thetas, n_datasets, axis=0)
    datasets = []
    for k in range(n_theta):
        for j in range(n_datasets):
            rng = make_rng(seed, _COVER_DATA, k, j)
            S = sample_locations(task.prior.locations, rng)
            Z = simulate_fields(task.model, dict(zip(task.prior.names, thetas[k])), S, m, rng, task.fixed)
            datasets.append(SpatialDataset.shared(S, Z))
    lo, hi = batched(interval_fn, datasets)
    return coverage_from_intervals(task.prior.names, all_theta, lo, hi, nominal, n_theta, n_datasets)


# ----------------------------------------------------------------------------
# Sampling distributions and sample-size curves
# ----------------------------------------------------------------------------


def reference_configurations(n: int, seed: int, lam_scales=(10.0, 25.0, 50.0, 100.0),
                             delta: float = 0.1) -> list[np.ndarray]:
    """Fixed location sets from the cluster prior, from strongly clustered
    (small parent intensity) to nearly uniform."""
    configs = []
    for i, scale in enumerate(lam_scales):
        loc = LocationPrior(n_range=(n, n), lam_range=(scale, scale), delta_range=(delta, delta))
        configs.append(sample_locations(loc, make_rng(seed, _CONFIGS, i)))
    return configs


def sampling_distribution(estimator_fn, task, theta0, configurations, reps: int, m: int = 1,
                          seed: int = 0) -> list[np.ndarray]:
    """For every configuration, ``reps`` estimates from data simulated at ``theta0``."""
    theta = dict(zip(task.prior.names, np.asarray(theta0, dtype=np.float64)))
    out = []
    for c, S in enumerate(configurations):
        datasets = []
        for r in range(reps):
            Z = simulate_fields(task.model, theta, S, m, make_rng(seed, _SAMPLING, c, r), task.fixed)
            datasets.append(SpatialDataset.shared(S, Z))
        out.append(batched(estimator_fn, datasets))
    return out


def sampling_distribution_csv(names, samples: list[np.ndarray], estimator: str = "gnn",
                              header_lines=None) -> str:
    out = [f"# {h}" for h in header_lines or []]
    out.append("estimator,configuration,rep,param,estimate")
    for c, arr in enumerate(samples):
        for r, row in enumerate(arr):
            for k, v in zip(names, row):
                out.append(f"{estimator},{c},{r},{k},{float(v)!r}")
    return "\n".join(out) + "\n"


def variable_n_curve(estimators: dict, n_grid, task, K: int, m: int = 1, seed: int = 0) -> list[dict]:
    """RMSE of each estimator on a K-vector suite at every ``n`` in ``n_grid``.

    The suite at each ``n`` keeps the task's cluster-process ranges but fixes
    the expected count; the same parameter draws are used across ``n``.
    """
    base = task.prior.locations
    thetas = sample_prior(task.prior, K, make_rng(seed, _SUITE_THETA))
    rows = []
    for n in n_grid:
        loc = LocationPrior(kind=base.kind, n_range=(n, n), lam_range=base.lam_range,
                            delta_range=base.delta_range, domain=base.domain)
        suite = make_test_suite(task, K, m, seed * 7919 + int(n), loc, thetas)
        for name, fn in estimators.items():
            rep = rmse_on_test(fn, suite)
            rows.append({"estimator": name, "n": int(n), "rmse": rep.overall, **{
                f"rmse_{k}": v for k, v in rep.per_param.items()}})
    return rows


def decreasing_trend_pvalue(n_values, rmse_values) -> float:
    """One-sided Kendall test of a decreasing trend of RMSE in ``n``."""
    return float(stats.kendalltau(n_values, rmse_values, alternative="less").pvalue)


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# ----------------------------------------------------------------------------
# Timing
# ----------------------------------------------------------------------------


def time_call(fn, reps: int = 20, warmup: int = 2) -> float:
    """Median wall-clock seconds of ``fn()`` over ``reps`` runs after warm-up."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def timing_benchmark(estimators: dict, datasets_by_n: dict, reps: int = 20, warmup: int = 2) -> list[dict]:
    """``estimators`` maps a name to ``fn(dataset)``; ``datasets_by_n`` maps n to a dataset."""
    rows = []
    for name, fn in estimators.items():
        r = reps[name] if isinstance(reps, dict) else reps
        for n, ds in datasets_by_n.items():
            rows.append({"estimator": name, "n": int(n),
                         "seconds": time_call(lambda: fn(ds), r, warmup)})
    return rows


# ----------------------------------------------------------------------------
# Conjugate Gaussian toy model
# ----------------------------------------------------------------------------

_STD_NORMAL = NormalDist()


def conjugate_quantile_oracle(q: float, z):
    """Posterior q-quantile when theta ~ N(0, 1) and Z | theta ~ N(theta, 1)."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    return np.asarray(z) / 2.0 + math.sqrt(0.5) * _STD_NORMAL.inv_cdf(q)


def conjugate_interval_oracle(z, q1: float = 0.025, q2: float = 0.975):
    return conjugate_quantile_oracle(q1, z), conjugate_quantile_oracle(q2, z)


class QuantileMLP:
    """Small fully connected network mapping z to several posterior quantiles."""

    def __init__(self, levels, rng, hidden=(64, 64)):
        self.levels = tuple(levels)
        widths = (1, *hidden)
        self.layers = [DenseLayer.init(rng, a, b, "relu", np.float64) for a, b in zip(widths, widths[1:])]
        self.layers.append(DenseLayer.init(rng, widths[-1], len(self.levels), "identity", np.float64))

    def named_params(self):
        return {f"{i}.{k}": v for i, L in enumerate(self.layers) for k, v in L.params().items()}

    def forward(self, z):
        h = np.asarray(z, dtype=np.float64).reshape(-1, 1)
        caches = []
        for L in self.layers:
            h, c = L.forward(h)
            caches.append(c)
        return h, caches

    def __call__(self, z):
        return self.forward(z)[0]

    def loss_and_grads(self, theta, z):
        out, caches = self.forward(z)
        theta = theta.reshape(-1, 1)
        loss = 0.0
        dout = np.empty_like(out)
        for i, q in enumerate(self.levels):
            loss += float(np.mean(quantile_loss(theta[:, 0], out[:, i], q)))
            dout[:, i] = quantile_loss_grad(theta[:, 0], out[:, i], q) / len(out)
        grads = {}
        d = dout
        for i in reversed(range(len(self.layers))):
            d, g = self.layers[i].backward(caches[i], d)
            grads.update({f"{i}.{k}": v for k, v in g.items()})
        return loss, grads


def train_toy_quantile_network(levels=(0.025, 0.5, 0.975), seed: int = 0, steps: int = 6000,
                               batch_size: int = 1024, lr: float = 1e-3) -> QuantileMLP:
    """Fit one network under the summed pinball loss, drawing fresh
    ``(theta, z)`` pairs at every step."""
    rng = make_rng(seed, 0)
    net = QuantileMLP(levels, make_rng(seed, 1))
    params = net.named_params()
    state = AdamState(lr=lr)
    for step in range(steps):
        if step == int(0.75 * steps):
            state.lr = lr / 10.0
        theta = rng.standard_normal(batch_size)
        z = theta + rng.standard_normal(batch_size)
        _, grads = net.loss_and_grads(theta, z)
        adam_update(params, grads, state)
    return net


def toy_quantile_deviation(net: QuantileMLP, n_test: int = 1000, seed: int = 1) -> dict[float, float]:
    """Mean absolute deviation from the exact posterior quantiles at
    ``n_test`` z-values drawn from the marginal N(0, 2)."""
    z = make_rng(seed, 2).normal(0.0, math.sqrt(2.0), n_test)
    out = net(z)
    return {q: float(np.mean(np.abs(out[:, i] - conjugate_quantile_oracle(q, z))))
            for i, q in enumerate(net.levels)}


# ----------------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------------


def rows_to_csv(rows: list[dict], header_lines=None) -> str:
    out = [f"# {h}" for h in header_lines or []]
    if rows:
        keys = list(rows[0])
        out.append(",".join(keys))
        for r in rows:
            out.append(",".join(_fmt(r.get(k, "")) for k in keys))
    return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")
