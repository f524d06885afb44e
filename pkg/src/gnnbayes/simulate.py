"""Simulation of parameters, spatial locations and spatial data.

Random numbers come from numpy's counter-based Philox generator. A stream is
identified by ``(seed, *stream_id)`` through ``SeedSequence.spawn_key``, so
any simulated dataset can be regenerated from its seed and stream id alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, LinAlgError
from scipy.spatial.distance import pdist, squareform

from .special import matern_correlation

SQRT_2PI = math.sqrt(2.0 * math.pi)


class SimulationError(RuntimeError):
    pass


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, stream...)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


# ----------------------------------------------------------------------------
# Types
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Domain2D:
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 1.0
    y1: float = 1.0

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate domain {self}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def inflate(self, by: float) -> "Domain2D":
        return Domain2D(self.x0 - by, self.y0 - by, self.x1 + by, self.y1 + by)

    def contains(self, S: np.ndarray) -> np.ndarray:
        return (
            (S[:, 0] >= self.x0) & (S[:, 0] <= self.x1)
            & (S[:, 1] >= self.y0) & (S[:, 1] <= self.y1)
        )


UNIT_SQUARE = Domain2D()


@dataclass(frozen=True)
class ClusterProcessConfig:
    """Matern cluster process: parent intensity, mean daughters, disk radius."""

    lam: float
    mu: float
    delta: float

    def __post_init__(self):
        if not self.lam > 0 or self.mu < 0 or not self.delta > 0:
            raise ValueError(f"invalid cluster process parameters {self}")


@dataclass(frozen=True)
class GPParams:
    sigma2: float = 1.0
    rho: float = 0.1
    nu: float = 1.0
    tau: float = 0.5

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.rho > 0 and self.nu > 0 and self.tau >= 0):
            raise ValueError(f"invalid Gaussian-process parameters {self}")


@dataclass(frozen=True)
class SchlatherParams:
    rho: float = 0.1
    nu: float = 1.0

    def __post_init__(self):
        if not (self.rho > 0 and self.nu > 0):
            raise ValueError(f"invalid Schlather parameters {self}")


@dataclass
class LocationPrior:
    """Prior over location configurations.

    ``kind="cluster"``: a Matern cluster process whose expected count is
    ``n`` (discrete uniform on ``n_range``). The parent intensity is drawn
    as ``U(*lam_range) * n / 250`` so the mean cluster size ``250 / U``
    does not depend on ``n``; ``delta`` is drawn from ``delta_range``.

    ``kind="uniform"``: exactly ``n`` i.i.d. uniform points.
    """

    kind: str = "cluster"
    n_range: tuple[int, int] = (100, 100)
    lam_range: tuple[float, float] = (10.0, 100.0)
    delta_range: tuple[float, float] = (0.1, 0.1)
    domain: Domain2D = UNIT_SQUARE
    min_points: int = 2

    def __post_init__(self):
        if self.kind not in ("cluster", "uniform"):
            raise ValueError(f"unknown location prior kind {self.kind!r}")
        lo, hi = self.n_range
        if not (1 <= lo <= hi):
            raise ValueError(f"invalid sample-size range {self.n_range}")
        if not (0 < self.lam_range[0] <= self.lam_range[1]):
            raise ValueError(f"invalid lambda range {self.lam_range}")
        if not (0 < self.delta_range[0] <= self.delta_range[1]):
            raise ValueError(f"invalid delta range {self.delta_range}")


@dataclass
class PriorSpec:
    """Independent uniform priors on named parameters plus a location prior."""

    names: tuple[str, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    locations: LocationPrior = field(default_factory=LocationPrior)

    def __post_init__(self):
        self.names = tuple(self.names)
        self.lower = tuple(float(a) for a in self.lower)
        self.upper = tuple(float(b) for b in self.upper)
        if not (len(self.names) == len(self.lower) == len(self.upper) >= 1):
            raise ValueError("prior names and bounds must have equal, positive length")
        for k, a, b in zip(self.names, self.lower, self.upper):
            if not (math.isfinite(a) and math.isfinite(b) and a < b):
                raise ValueError(f"prior support for {k} must be a bounded interval, got [{a}, {b}]")

    @property
    def p(self) -> int:
        return len(self.names)

    @property
    def lower_array(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def upper_array(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower_array + self.upper_array)


def gp_prior(locations: LocationPrior | None = None) -> PriorSpec:
    """tau ~ U(0.1, 1), rho ~ U(0.05, 0.3)."""
    return PriorSpec(("tau", "rho"), (0.1, 0.05), (1.0, 0.3), locations or LocationPrior())


def schlather_prior(locations: LocationPrior | None = None) -> PriorSpec:
    """rho ~ U(0.05, 0.3), nu ~ U(0.5, 2.5)."""
    return PriorSpec(("rho", "nu"), (0.05, 0.5), (0.3, 2.5), locations or LocationPrior())


# ----------------------------------------------------------------------------
# Parameters and locations
# ----------------------------------------------------------------------------


def sample_prior(prior: PriorSpec, K: int, rng: np.random.Generator) -> np.ndarray:
    """K x p matrix of independent uniform draws."""
    if K < 1:
        raise ValueError("K must be at least 1")
    u = rng.random((K, prior.p))
    return prior.lower_array + u * (prior.upper_array - prior.lower_array)


def sample_uniform_points(n: int, domain: Domain2D, rng: np.random.Generator) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be non-negative")
    u = rng.random((n, 2))
    lo = np.array([domain.x0, domain.y0])
    span = np.array([domain.x1 - domain.x0, domain.y1 - domain.y0])
    return lo + u * span


def sample_matern_cluster(
    cfg: ClusterProcessConfig, domain: Domain2D, rng: np.random.Generator
) -> np.ndarray:
    """Daughter points of a Matern cluster process observed on ``domain``.

    Parents live on the domain inflated by ``delta`` so clusters centred just
    outside the window still contribute; daughters outside are dropped.
    """
    big = domain.inflate(cfg.delta)
    n_parents = rng.poisson(cfg.lam * big.area)
    parents = sample_uniform_points(n_parents, big, rng)
    counts = rng.poisson(cfg.mu, size=n_parents)
    total = int(counts.sum())
    if total == 0:
        return np.empty((0, 2))
    centres = np.repeat(parents, counts, axis=0)
    r = cfg.delta * np.sqrt(rng.random(total))
    a = 2.0 * math.pi * rng.random(total)
    pts = centres + np.column_stack((r * np.cos(a), r * np.sin(a)))
    return pts[domain.contains(pts)]


def sample_locations(loc: LocationPrior, rng: np.random.Generator) -> np.ndarray:
    """One configuration from the location prior (at least ``min_points`` points)."""
    while True:
        n = int(rng.integers(loc.n_range[0], loc.n_range[1] + 1))
        if loc.kind == "uniform":
            S = sample_uniform_points(n, loc.domain, rng)
        else:
            scale = rng.uniform(*loc.lam_range)
            lam = scale * n / 250.0
            cfg = ClusterProcessConfig(lam=lam, mu=n / lam, delta=rng.uniform(*loc.delta_range))
            S = sample_matern_cluster(cfg, loc.domain, rng)
        if len(S) >= loc.min_points:
            return S


# ----------------------------------------------------------------------------
# Data models
# ----------------------------------------------------------------------------


def matern_covariance(S: np.ndarray, sigma2: float, rho: float, nu: float, tau: float = 0.0) -> np.ndarray:
    n = len(S)
    C = np.empty((n, n))
    if n > 1:
        C[:] = squareform(sigma2 * matern_correlation(pdist(S), rho, nu))
    np.fill_diagonal(C, sigma2 + tau * tau)
    return C


def _duplicate_pair(S: np.ndarray) -> tuple[int, int] | None:
    if len(S) < 2:
        return None
    D = squareform(pdist(S))
    np.fill_diagonal(D, np.inf)
    idx = np.argwhere(D == 0.0)
    if len(idx):
        i, j = sorted(idx[0])
        return int(i), int(j)
    return None


def simulate_gp(
    S: np.ndarray, params: GPParams, rng: np.random.Generator, m: int | None = None
) -> np.ndarray:
    """Gaussian-process data with Matern covariance plus nugget.

    Returns an ``(n,)`` vector, or ``(m, n)`` when ``m`` is given.
    """
    S = np.asarray(S, dtype=np.float64)
    if params.tau == 0.0:
        dup = _duplicate_pair(S)
        if dup is not None:
            raise SimulationError(
                f"covariance is singular: locations {dup[0]} and {dup[1]} coincide and tau = 0"
            )
    C = matern_covariance(S, params.sigma2, params.rho, params.nu, params.tau)
    try:
        L = cholesky(C, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise SimulationError(f"Cholesky factorisation failed: {exc}") from None
    reps = 1 if m is None else m
    Z = (L @ rng.standard_normal((len(S), reps))).T
    return Z[0] if m is None else Z


def _robust_cholesky(C: np.ndarray) -> np.ndarray:
    # near-coincident points with smooth correlations lose definiteness in
    # floating point; add the smallest jitter that restores it
    for jitter in (0.0, 1e-10, 1e-8, 1e-6, 1e-4):
        try:
            A = C if jitter == 0.0 else C + jitter * np.eye(len(C))
            return cholesky(A, lower=True, check_finite=False)
        except LinAlgError:
            continue
    raise SimulationError("correlation matrix is not positive definite even with jitter 1e-4")


def simulate_schlather(
    S: np.ndarray,
    params: SchlatherParams,
    rng: np.random.Generator,
    m: int | None = None,
    bound: float = 3.5,
    max_functions: int = 10_000,
) -> np.ndarray:
    """Schlather max-stable process with unit Frechet margins.

    Each spectral function is a Matern Gaussian field times sqrt(2*pi) so that
    ``E[max(0, Y)] = 1``. A replicate stops once ``bound / zeta_k`` falls
    below the smallest value of its running maximum.
    """
    S = np.asarray(S, dtype=np.float64)
    n = len(S)
    if n == 0:
        raise ValueError("need at least one location")
    if not bound > 0:
        raise ValueError("bound must be positive")
    reps = 1 if m is None else m
    L = _robust_cholesky(matern_covariance(S, 1.0, params.rho, params.nu))
    Z = np.zeros((reps, n))
    zeta = np.zeros(reps)
    active = np.arange(reps)
    k = 0
    while active.size:
        zeta[active] += rng.exponential(size=active.size)
        done = bound / zeta[active] < Z[active].min(axis=1)
        active = active[~done]
        if not active.size:
            break
        k += 1
        if k > max_functions:
            raise SimulationError(
                f"exceeded {max_functions} spectral functions; the bound may be too large"
            )
        Y = SQRT_2PI * (L @ rng.standard_normal((n, active.size))).T
        Z[active] = np.maximum(Z[active], np.maximum(Y, 0.0) / zeta[active, None])
    return Z[0] if m is None else Z


def simulate_fields(
    model: str,
    theta: dict[str, float],
    S: np.ndarray,
    m: int,
    rng: np.random.Generator,
    fixed: dict[str, float] | None = None,
) -> np.ndarray:
    """``(m, n)`` replicates of ``model`` at ``S`` for named parameters."""
    vals = dict(fixed or {})
    vals.update(theta)
    if model == "gp":
        params = GPParams(**{k: vals[k] for k in ("sigma2", "rho", "nu", "tau") if k in vals})
        return simulate_gp(S, params, rng, m=m)
    if model == "schlather":
        params = SchlatherParams(**{k: vals[k] for k in ("rho", "nu") if k in vals})
        return simulate_schlather(S, params, rng, m=m)
    raise ValueError(f"unknown model {model!r}")
