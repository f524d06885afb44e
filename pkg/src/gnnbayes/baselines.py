"""Likelihood-based estimators used as comparisons.

* exact Gaussian likelihood for the Matern-plus-nugget model (Cholesky);
* pairwise log-likelihood for Schlather's max-stable model with
  distance-cutoff weights;
* bounded, multi-start Nelder-Mead.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .data import SpatialDataset
from .simulate import GPParams, SchlatherParams
from .special import matern_correlation

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    nit: int
    converged: bool
    seconds: float = 0.0


def _initial_simplex(x0, lo, hi, scale):
    # steps of ``scale`` times the box width, flipped inward at the far side
    pts = [x0]
    for i in range(len(x0)):
        x = x0.copy()
        step = scale * (hi[i] - lo[i])
        x[i] = x0[i] + step if x0[i] + step <= hi[i] else x0[i] - step
        pts.append(x)
    return np.array(pts)


def nelder_mead(
    objective: Callable[[np.ndarray], float],
    x0,
    bounds,
    xatol: float = 1e-8,
    fatol: float = 1e-10,
    maxiter: int = 2000,
    max_restarts: int = 5,
) -> OptimResult:
    """Minimise ``objective`` over a box; candidate points are clipped into it.

    A simplex squeezed against a face of the box can stall there. When the
    solution ends on a face, the simplex is rebuilt around it and the search
    restarted, up to ``max_restarts`` times, until a restart no longer helps.
    Interior solutions are returned after a single run.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    lo = np.array([b[0] for b in bounds], dtype=np.float64)
    hi = np.array([b[1] for b in bounds], dtype=np.float64)
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise ValueError("starting point lies outside the bounds")
    t0 = time.perf_counter()
    x, fun, nit, ok = x0, math.inf, 0, False
    scale = 0.1
    for _ in range(max_restarts + 1):
        res = minimize(
            objective, x, method="Nelder-Mead", bounds=list(zip(lo, hi)),
            options={"xatol": xatol, "fatol": fatol, "maxiter": maxiter, "maxfev": 4 * maxiter,
                     "initial_simplex": _initial_simplex(x, lo, hi, scale)},
        )
        nit += int(res.nit)
        ok = bool(res.success)
        improved = fun - float(res.fun) > fatol
        if float(res.fun) <= fun:
            x, fun = np.clip(res.x, lo, hi), float(res.fun)
        on_face = np.any(np.isclose(x, lo, rtol=0, atol=1e-9 * (hi - lo))
                         | np.isclose(x, hi, rtol=0, atol=1e-9 * (hi - lo)))
        if not ok or not improved or not on_face:
            break
        scale = max(scale / 2, 1e-3)
    return OptimResult(x, fun, nit, ok, time.perf_counter() - t0)


def multistart_minimise(objective, bounds, rng: np.random.Generator | None, restarts: int = 4,
                        **kw) -> OptimResult:
    """Nelder-Mead from the box midpoint plus ``restarts`` uniform random starts."""
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    starts = [0.5 * (lo + hi)]
    if restarts:
        rng = rng or np.random.default_rng(0)
        starts += list(lo + rng.random((restarts, len(lo))) * (hi - lo))
    t0 = time.perf_counter()
    best = None
    nit = 0
    for x0 in starts:
        r = nelder_mead(objective, x0, bounds, **kw)
        nit += r.nit
        if best is None or r.fun < best.fun:
            best = r
    best.nit = nit
    best.seconds = time.perf_counter() - t0
    return best


# ----------------------------------------------------------------------------
# Gaussian process
# ----------------------------------------------------------------------------


def _gp_loglik_from_dists(dists: np.ndarray, n: int, Z: np.ndarray, params: GPParams) -> float:
    C = np.empty((n, n))
    if n > 1:
        iu = np.triu_indices(n, 1)
        c = params.sigma2 * matern_correlation(dists, params.rho, params.nu)
        C[iu] = c
        C[iu[1], iu[0]] = c
    np.fill_diagonal(C, params.sigma2 + params.tau**2)
    try:
        cf = cho_factor(C, lower=True, check_finite=False)
    except LinAlgError:
        warnings.warn(f"covariance not positive definite at {params}; log-likelihood is -inf",
                      RuntimeWarning, stacklevel=3)
        return -math.inf
    Z = np.atleast_2d(Z)
    logdet = 2.0 * np.log(np.diag(cf[0])).sum()
    quad = float(np.sum(Z.T * cho_solve(cf, Z.T, check_finite=False)))
    return -0.5 * (Z.shape[0] * (n * LOG_2PI + logdet) + quad)


def gp_loglikelihood(theta: GPParams, Z, S) -> float:
    """log N(Z; 0, Sigma(theta)); ``Z`` may hold several replicates as rows."""
    S = np.asarray(S, dtype=np.float64).reshape(-1, 2)
    return _gp_loglik_from_dists(pdist(S), len(S), np.asarray(Z, dtype=np.float64), theta)


def ml_estimate_gp(
    Z,
    S,
    bounds,
    names=("tau", "rho"),
    fixed: dict | None = None,
    rng: np.random.Generator | None = None,
    restarts: int = 4,
) -> OptimResult:
    """Maximum-likelihood estimate of ``names`` over the box ``bounds``.

    Parameters not in ``names`` come from ``fixed`` (defaults sigma2 = 1,
    nu = 1). ``fun`` of the result is the maximised log-likelihood.
    """
    S = np.asarray(S, dtype=np.float64).reshape(-1, 2)
    Z = np.asarray(Z, dtype=np.float64)
    d = pdist(S)
    n = len(S)
    base = {"sigma2": 1.0, "nu": 1.0, "tau": 0.5, "rho": 0.1}
    base.update(fixed or {})

    def nll(x):
        vals = dict(base)
        vals.update(zip(names, x))
        ll = _gp_loglik_from_dists(d, n, Z, GPParams(**vals))
        return 1e300 if not math.isfinite(ll) else -ll

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = multistart_minimise(nll, bounds, rng, restarts)
    res.fun = -res.fun
    return res


# ----------------------------------------------------------------------------
# Schlather pairwise likelihood
# ----------------------------------------------------------------------------


def _check_pair_args(z1, z2, r):
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(~(z1 > 0)) or np.any(~(z2 > 0)):
        raise ValueError("Frechet arguments must be positive")
    if np.any(r <= -1.0) or np.any(r > 1.0):
        raise ValueError("correlation must lie in (-1, 1]")
    return z1, z2, r


def _exponent_terms(z1, z2, r):
    a = 1.0 / z1
    b = 1.0 / z2
    # a^2 + b^2 - 2rab, written to stay accurate as r -> 1
    D = np.sqrt((a - b) ** 2 + 2.0 * (1.0 - r) * a * b)
    V = 0.5 * (a + b + D)
    return a, b, D, V


def schlather_bivariate_cdf(z1, z2, r):
    """P(Z1 <= z1, Z2 <= z2) for Schlather's model with correlation ``r``."""
    z1, z2, r = _check_pair_args(z1, z2, r)
    V = _exponent_terms(z1, z2, r)[3]
    out = np.exp(-V)
    return float(out) if out.ndim == 0 else out


def schlather_pair_logdensity(z1, z2, r):
    z1, z2, r = _check_pair_args(z1, z2, r)
    a, b, D, V = _exponent_terms(z1, z2, r)
    with np.errstate(divide="ignore", invalid="ignore"):
        Va = 0.5 * (1.0 + (a - r * b) / D)
        Vb = 0.5 * (1.0 + (b - r * a) / D)
        mixed = (1.0 - r * r) * a * b / (2.0 * D**3)
        out = -V + 2.0 * np.log(a) + 2.0 * np.log(b) + np.log(Va * Vb + mixed)
    return float(out) if out.ndim == 0 else out


def schlather_pair_density(z1, z2, r):
    """Mixed partial derivative of :func:`schlather_bivariate_cdf`."""
    out = np.exp(schlather_pair_logdensity(z1, z2, r))
    return float(out) if np.ndim(out) == 0 else out


def _pairs_within(S: np.ndarray, cutoff: float):
    pairs = cKDTree(S).query_pairs(cutoff, output_type="ndarray")
    if len(pairs) == 0:
        return pairs.reshape(0, 2), np.empty(0)
    d = np.sqrt(((S[pairs[:, 0]] - S[pairs[:, 1]]) ** 2).sum(axis=1))
    keep = (d <= cutoff) & (d > 0.0)
    if np.any(d == 0.0):
        warnings.warn("coincident locations are excluded from the pairwise likelihood",
                      RuntimeWarning, stacklevel=3)
    return pairs[keep], d[keep]


class PairwiseTerms:
    """Pairs within ``cutoff`` for every replicate, grouped by shared locations."""

    def __init__(self, data: SpatialDataset, cutoff: float = 0.2):
        if not cutoff > 0:
            raise ValueError("cutoff must be positive")
        groups: dict[bytes, tuple[np.ndarray, list]] = {}
        for S, z in zip(data.coords, data.values):
            key = np.ascontiguousarray(S).tobytes()
            if key not in groups:
                groups[key] = (S, [])
            groups[key][1].append(z)
        self.blocks = []
        for S, zs in groups.values():
            pairs, d = _pairs_within(S, cutoff)
            Zs = np.asarray(zs)
            self.blocks.append((d, Zs[:, pairs[:, 0]], Zs[:, pairs[:, 1]]))
        self.n_pairs = sum(z1.size for _, z1, _ in self.blocks)

    def loglik(self, rho: float, nu: float) -> float:
        total = 0.0
        for d, z1, z2 in self.blocks:
            if d.size == 0:
                continue
            r = matern_correlation(d, rho, nu)
            total += float(np.sum(schlather_pair_logdensity(z1, z2, r[None, :])))
        return total


def pl_loglikelihood(theta: SchlatherParams, data: SpatialDataset, cutoff: float = 0.2) -> float:
    """Sum over replicates of log pair densities for pairs within ``cutoff``."""
    terms = PairwiseTerms(data, cutoff)
    if terms.n_pairs == 0:
        warnings.warn("no pairs within the cutoff distance; pairwise likelihood is 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return terms.loglik(theta.rho, theta.nu)


def pl_estimate_schlather(
    data: SpatialDataset,
    bounds,
    cutoff: float = 0.2,
    rng: np.random.Generator | None = None,
    restarts: int = 4,
) -> OptimResult:
    """Maximum pairwise-likelihood estimate of ``(rho, nu)`` within ``bounds``."""
    terms = PairwiseTerms(data, cutoff)

    def npl(x):
        ll = terms.loglik(x[0], x[1])
        return 1e300 if not math.isfinite(ll) else -ll

    res = multistart_minimise(npl, bounds, rng, restarts)
    res.fun = -res.fun
    return res


def fit_results_csv(rows, header_lines: list[str] | None = None, with_timing: bool = True) -> str:
    """``rows`` of (dataset_id, names, OptimResult) as
    ``dataset_id,param,estimate,loglik,seconds,converged``."""
    out = [f"# {h}" for h in header_lines or []]
    out.append("dataset_id,param,estimate,loglik,seconds,converged")
    for ds_id, names, res in rows:
        secs = f"{res.seconds:.4f}" if with_timing else "NA"
        for name, val in zip(names, res.x):
            out.append(f"{ds_id},{name},{float(val)!r},{res.fun!r},{secs},{str(res.converged).lower()}")
    return "\n".join(out) + "\n"
