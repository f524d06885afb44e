"""Modified Bessel function of the second kind and the Matern correlation.

``bessel_k`` evaluates K at the reduced order ``mu = nu - round(nu)`` in
[-1/2, 1/2] with Temme's series for ``x < 4`` and Steed's continued
fraction (CF2) otherwise, then recurs upward to ``nu``. The scalar kernel
is compiled with numba; arrays are handled by a plain loop.
"""
from __future__ import annotations

import math

import numba
import numpy as np

_EPS = 1e-16
_MAXIT = 10000
_XMIN = 4.0
_EULER = 0.57721566490153286061
# Taylor coefficient of mu**3 in 1/Gamma(1 + mu).
_RGAM_C3 = -0.042002635034095235529
_HUGE = np.finfo(np.float64).max


@numba.njit(cache=True)
def _gam12(mu):
    gampl = 1.0 / math.gamma(1.0 + mu)
    gammi = 1.0 / math.gamma(1.0 - mu)
    if abs(mu) < 1e-5:
        gam1 = -(_EULER + _RGAM_C3 * mu * mu)
    else:
        gam1 = (gammi - gampl) / (2.0 * mu)
    gam2 = 0.5 * (gammi + gampl)
    return gam1, gam2, gampl, gammi


@numba.njit(cache=True)
def _k_reduced(mu, x, gam1, gam2, gampl, gammi):
    """Return K_mu(x), K_{mu+1}(x) for |mu| <= 1/2.

    The series loses roughly exp(2x) in relative accuracy to cancellation,
    about 1e-12 at the x = 4 switch point.
    """
    mu2 = mu * mu
    if x < _XMIN:
        x2 = 0.5 * x
        pimu = math.pi * mu
        fact = 1.0 if abs(pimu) < _EPS else pimu / math.sin(pimu)
        d = -math.log(x2)
        e = mu * d
        fact2 = 1.0 if abs(e) < _EPS else math.sinh(e) / e
        ff = fact * (gam1 * math.cosh(e) + gam2 * fact2 * d)
        total = ff
        e = math.exp(e)
        p = 0.5 * e / gampl
        q = 0.5 / (e * gammi)
        c = 1.0
        dd = x2 * x2
        total1 = p
        for i in range(1, _MAXIT):
            ff = (i * ff + p + q) / (i * i - mu2)
            c *= dd / i
            p /= i - mu
            q /= i + mu
            delta = c * ff
            total += delta
            total1 += c * (p - i * ff)
            if abs(delta) < abs(total) * _EPS:
                break
        return total, total1 * 2.0 / x
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d
    delh = d
    q1 = 0.0
    q2 = 1.0
    a1 = 0.25 - mu2
    q = a1
    c = a1
    a = -a1
    s = 1.0 + q * delh
    for i in range(2, _MAXIT):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1 = q2
        q2 = qnew
        q += c * qnew
        b += 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h += delh
        dels = q * delh
        s += dels
        if abs(dels / s) < _EPS:
            break
    h = a1 * h
    kmu = math.sqrt(math.pi / (2.0 * x)) * math.exp(-x) / s
    return kmu, kmu * (mu + x + 0.5 - h) / x


@numba.njit(cache=True)
def _bessel_k_array(nu, x, out):
    nl = int(nu + 0.5)
    mu = nu - nl
    gam1, gam2, gampl, gammi = _gam12(mu)
    for j in range(x.size):
        xj = x[j]
        kmu, k1 = _k_reduced(mu, xj, gam1, gam2, gampl, gammi)
        for i in range(1, nl + 1):
            ktmp = (mu + i) * (2.0 / xj) * k1 + kmu
            kmu = k1
            k1 = ktmp
        if not math.isfinite(kmu):
            kmu = _HUGE
        out[j] = kmu


@numba.njit(cache=True)
def _matern_array(u, nu, out):
    logc = (1.0 - nu) * math.log(2.0) - math.lgamma(nu)
    nl = int(nu + 0.5)
    mu = nu - nl
    gam1, gam2, gampl, gammi = _gam12(mu)
    for j in range(u.size):
        uj = u[j]
        if uj <= 0.0:
            out[j] = 1.0
            continue
        if nu == 0.5:
            out[j] = math.exp(-uj)
            continue
        if uj > 700.0:
            out[j] = 0.0
            continue
        kmu, k1 = _k_reduced(mu, uj, gam1, gam2, gampl, gammi)
        for i in range(1, nl + 1):
            ktmp = (mu + i) * (2.0 / uj) * k1 + kmu
            kmu = k1
            k1 = ktmp
        val = math.exp(logc + nu * math.log(uj)) * kmu
        out[j] = min(val, 1.0)


def bessel_k(order, x):
    """Modified Bessel function of the second kind, K_order(x).

    ``order`` is a non-negative scalar; ``x`` a positive scalar or array.
    Values that would overflow for tiny ``x`` saturate at the largest
    finite double.
    """
    nu = float(order)
    if not (nu >= 0.0 and math.isfinite(nu)):
        raise ValueError(f"order must be a finite non-negative real, got {order!r}")
    xa = np.asarray(x, dtype=np.float64)
    if np.any(~(xa > 0.0)):
        raise ValueError("bessel_k is defined for x > 0 only")
    flat = np.ascontiguousarray(xa).ravel()
    out = np.empty_like(flat)
    _bessel_k_array(nu, flat, out)
    if np.ndim(x) == 0:
        return float(out[0])
    return out.reshape(xa.shape)


def matern_correlation(h, rho: float, nu: float):
    """Matern correlation ``2^(1-nu)/Gamma(nu) (h/rho)^nu K_nu(h/rho)``.

    One at ``h = 0``; vectorised over ``h``.
    """
    if not rho > 0.0:
        raise ValueError(f"range rho must be positive, got {rho!r}")
    if not nu > 0.0:
        raise ValueError(f"smoothness nu must be positive, got {nu!r}")
    ha = np.asarray(h, dtype=np.float64)
    if np.any(ha < 0.0):
        raise ValueError("distances must be non-negative")
    u = np.ascontiguousarray(ha).ravel() / rho
    out = np.empty_like(u)
    _matern_array(u, float(nu), out)
    if np.ndim(h) == 0:
        return float(out[0])
    return out.reshape(ha.shape)
