"""Layers, losses and optimiser with hand-written reverse-mode gradients.

Each layer has ``forward`` returning ``(output, cache)`` and ``backward``
taking that cache and the upstream gradient, returning the input gradient and
a dict of parameter gradients. Parameters are plain numpy arrays; their dtype
(float32 for training, float64 for gradient checks) sets the arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .graph import GraphBatch

ACTIVATIONS = ("relu", "identity", "exp")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "identity":
        return x
    if kind == "exp":
        return np.exp(x)
    raise ValueError(f"unknown activation {kind!r}")


def activate_backward(pre: np.ndarray, out: np.ndarray, kind: str, dout: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return dout * (pre > 0)
    if kind == "identity":
        return dout
    if kind == "exp":
        return dout * out
    raise ValueError(f"unknown activation {kind!r}")


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=np.float32) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in)).astype(dtype)


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, activation: str = "relu", dtype=np.float32) -> "DenseLayer":
        return cls(glorot_uniform(rng, n_out, n_in, dtype), np.zeros(n_out, dtype=dtype), activation)

    @property
    def n_params(self) -> int:
        return self.W.size + self.b.size

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def forward(self, X: np.ndarray):
        if X.shape[-1] != self.W.shape[1]:
            raise ValueError(f"dense layer expects width {self.W.shape[1]}, got {X.shape[-1]}")
        pre = X @ self.W.T + self.b
        out = activate(pre, self.activation)
        return out, (X, pre, out)

    def backward(self, cache, dout: np.ndarray):
        X, pre, out = cache
        dpre = activate_backward(pre, out, self.activation, dout)
        return dpre @ self.W, {"W": dpre.T @ X, "b": dpre.sum(axis=0)}


@dataclass
class GraphConvLayer:
    """h_j <- g(W1 h_j + b + mean_{j' in N(j)} exp(-d_jj'/gamma) W2 h_j').

    ``gamma = softplus(gamma_raw)``; an empty neighbourhood sends no message.
    """

    W1: np.ndarray
    W2: np.ndarray
    b: np.ndarray
    gamma_raw: np.ndarray
    activation: str = "relu"

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, gamma0: float = 0.1,
             activation: str = "relu", dtype=np.float32) -> "GraphConvLayer":
        return cls(
            glorot_uniform(rng, n_out, n_in, dtype),
            glorot_uniform(rng, n_out, n_in, dtype),
            np.zeros(n_out, dtype=dtype),
            np.array([softplus_inv(gamma0)], dtype=dtype),
            activation,
        )

    @property
    def gamma(self) -> float:
        return float(softplus(self.gamma_raw[0]))

    @property
    def n_params(self) -> int:
        return self.W1.size + self.W2.size + self.b.size + 1

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "W2": self.W2, "b": self.b, "gamma_raw": self.gamma_raw}

    def forward(self, batch: GraphBatch, H: np.ndarray):
        if H.shape != (batch.n_nodes, self.W1.shape[1]):
            raise ValueError(
                f"graph conv expects features of shape {(batch.n_nodes, self.W1.shape[1])}, got {H.shape}"
            )
        dtype = H.dtype
        gamma = softplus(self.gamma_raw[0].astype(np.float64))
        e = np.exp(-batch.dist / gamma)
        w = (e * batch.inv_degree[batch.rows]).astype(dtype)
        A = batch.adjacency(w)
        M = H @ self.W2.T
        pre = H @ self.W1.T + A @ M + self.b
        out = activate(pre, self.activation)
        return out, (H, M, w, A, pre, out, gamma)

    def backward(self, batch: GraphBatch, cache, dout: np.ndarray):
        H, M, w, A, pre, out, gamma = cache
        dpre = activate_backward(pre, out, self.activation, dout)
        dM = A.T @ dpre
        dH = dpre @ self.W1 + dM @ self.W2
        # d w_e / d gamma = w_e * d_e / gamma^2
        C = batch.adjacency((w * batch.dist / gamma**2).astype(H.dtype))
        dgamma = float(np.sum(dpre * (C @ M), dtype=np.float64))
        dgraw = dgamma * float(expit(self.gamma_raw[0].astype(np.float64)))
        grads = {
            "W1": dpre.T @ H,
            "W2": dM.T @ H,
            "b": dpre.sum(axis=0),
            "gamma_raw": np.array([dgraw], dtype=H.dtype),
        }
        return dH, grads


def mean_readout(H: np.ndarray) -> np.ndarray:
    """Columnwise average of node features."""
    H = np.asarray(H)
    if H.shape[0] == 0:
        raise ValueError("readout of an empty graph")
    return H.mean(axis=0)


def set_average(vectors) -> np.ndarray:
    """Elementwise average of equal-length vectors."""
    R = np.asarray(vectors)
    if R.ndim != 2 or R.shape[0] == 0:
        raise ValueError("set_average needs a non-empty list of equal-length vectors")
    return R.mean(axis=0)


# ----------------------------------------------------------------------------
# Losses. Batched inputs have a leading batch axis; losses average over it.
# ----------------------------------------------------------------------------


def mae_loss(theta, theta_hat):
    """Mean absolute error and its gradient with respect to ``theta_hat``."""
    theta = np.asarray(theta)
    theta_hat = np.asarray(theta_hat)
    if theta.shape != theta_hat.shape:
        raise ValueError(f"shape mismatch {theta.shape} vs {theta_hat.shape}")
    diff = theta_hat - theta
    loss = float(np.mean(np.abs(diff), dtype=np.float64))
    return loss, (np.sign(diff) / diff.size).astype(theta_hat.dtype)


def _check_level(q: float) -> None:
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")


def quantile_loss(theta, theta_hat, q: float):
    """Pinball loss ``(theta_hat - theta) * (1{theta_hat > theta} - q)`` (elementwise)."""
    _check_level(q)
    theta_hat = np.asarray(theta_hat)
    diff = theta_hat - np.asarray(theta)
    val = diff * ((diff > 0) - q)
    return float(val) if val.ndim == 0 else val


def quantile_loss_grad(theta, theta_hat, q: float):
    _check_level(q)
    diff = np.asarray(theta_hat) - np.asarray(theta)
    return ((diff > 0) - q).astype(np.asarray(theta_hat).dtype)


def joint_interval_loss(theta, Q, q1: float, q2: float):
    """Sum of pinball losses at ``q1`` (first p outputs) and ``q2`` (last p).

    For a batch ``theta`` (B x p), ``Q`` (B x 2p), the per-dataset sums are
    averaged over the batch. Returns ``(loss, dloss/dQ)``.
    """
    _check_level(q1)
    _check_level(q2)
    if not q1 < q2:
        raise ValueError("need q1 < q2")
    theta = np.asarray(theta)
    Q = np.asarray(Q)
    p = theta.shape[-1]
    if Q.shape[-1] != 2 * p or Q.shape[:-1] != theta.shape[:-1]:
        raise ValueError(f"interval output of shape {Q.shape} does not match theta of shape {theta.shape}")
    lo, hi = Q[..., :p], Q[..., p:]
    total = quantile_loss(theta, lo, q1) + quantile_loss(theta, hi, q2)
    B = 1 if theta.ndim == 1 else theta.shape[0]
    loss = float(np.sum(total, dtype=np.float64)) / B
    grad = np.concatenate(
        (quantile_loss_grad(theta, lo, q1), quantile_loss_grad(theta, hi, q2)), axis=-1
    ) / B
    return loss, grad.astype(Q.dtype)


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam step, applied in place; returns ``(params, state)``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown tensor {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for tensor {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# ----------------------------------------------------------------------------
# Finite-difference gradient check
# ----------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    worst_rel_error: float
    per_tensor: dict[str, float]
    skipped: int = 0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.per_tensor.items())
        return f"{status} worst={self.worst_rel_error:.2e} ({parts})"


def finite_difference_check(
    fn: Callable,
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    tol: float = 1e-5,
    eps: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    richardson: bool = False,
) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``fn``.

    ``fn(params)`` returns the scalar loss, or ``(loss, signature)`` where the
    signature identifies the piecewise-smooth region (e.g. ReLU masks). If a
    perturbation changes the signature, the one-sided difference on the
    unchanged side is used instead. With ``richardson`` the central
    differences at ``eps`` and ``eps/2`` are combined (error O(eps^4)) and
    the one-sided fallback is second order, which allows a larger step and
    less cancellation on small gradients. The error per tensor is
    ``||a - n|| / max(||a||, ||n||)``.
    """

    def call(p):
        out = fn(p)
        if isinstance(out, tuple):
            return float(out[0]), out[1]
        return float(out), None

    def ok(sig):
        return sig0 is None or _same(sig, sig0)

    f0, sig0 = call(params)
    steps = (eps, eps / 2) if richardson else (eps,)
    per_tensor: dict[str, float] = {}
    skipped = 0
    for name, arr in params.items():
        if name not in analytic:
            continue
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
        num = np.empty(len(idx))
        keep = np.ones(len(idx), dtype=bool)
        for t, i in enumerate(idx):
            old = flat[i]
            vals = {}
            for k in (1, -1):
                for h in steps:
                    flat[i] = old + k * h
                    vals[k * h] = call(params)
                flat[i] = old
            up = all(ok(vals[h][1]) for h in steps)
            dn = all(ok(vals[-h][1]) for h in steps)
            if up and dn:
                d = [(vals[h][0] - vals[-h][0]) / (2 * h) for h in steps]
                num[t] = (4 * d[1] - d[0]) / 3 if richardson else d[0]
            elif up or dn:
                k = 1 if up else -1
                if richardson:
                    # second order: (-3 f(0) + 4 f(h) - f(2h)) / 2h with h = eps/2
                    num[t] = k * (-3 * f0 + 4 * vals[k * eps / 2][0] - vals[k * eps][0]) / eps
                else:
                    num[t] = k * (vals[k * eps][0] - f0) / eps
            else:
                keep[t] = False
                skipped += 1
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[idx][keep]
        n = num[keep]
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        per_tensor[name] = 0.0 if scale == 0.0 else float(np.linalg.norm(a - n) / scale)
    worst = max(per_tensor.values(), default=0.0)
    return GradCheckReport(worst <= tol, worst, per_tensor, skipped)


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
