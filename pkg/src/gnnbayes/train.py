"""Monte Carlo risk minimisation with on-the-fly simulation.

Parameter draws for training and validation are fixed at the start. The
validation datasets are simulated once; the training datasets (``J`` per
parameter vector) are regenerated at every epoch, each on fresh locations
from the location prior. Training stops once the validation risk has not
decreased for ``patience`` consecutive epochs and the best-epoch parameters
are returned.
"""
from __future__ import annotations

import copy
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import SpatialDataset
from .estimator import node_features, prepare_batch
from .nn import AdamState, adam_update, joint_interval_loss, mae_loss
from .simulate import PriorSpec, make_rng, sample_locations, sample_prior, simulate_fields

log = logging.getLogger(__name__)

# stream ids under the run seed
_THETA_TRAIN, _THETA_VAL, _DATA_VAL, _DATA_TRAIN, _SHUFFLE, _GRAPHS = range(6)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    K_train: int = 1000
    K_val: int = 200
    J: int = 5
    m: int = 1
    batch_size: int = 32
    patience: int = 5
    max_epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    reproducible: bool = True
    workers: int = 1

    def __post_init__(self):
        for k in ("K_train", "K_val", "J", "m", "batch_size", "patience", "max_epochs", "workers"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be at least 1")


@dataclass
class SimulationTask:
    """What to simulate: model name, its fixed parameters, and the prior."""

    model: str
    prior: PriorSpec
    fixed: dict = field(default_factory=dict)


@dataclass
class LabelledSet:
    thetas: np.ndarray
    datasets: list[SpatialDataset]

    def __len__(self) -> int:
        return len(self.datasets)


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    train_risk: list[float] = field(default_factory=list)
    val_risk: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    initial_val_risk: float = math.nan
    best_epoch: int = 0
    stopped_epoch: int = 0

    @property
    def best_val_risk(self) -> float:
        return min([self.initial_val_risk, *self.val_risk])

    def to_csv(self, with_timing: bool = True) -> str:
        rows = ["epoch,train_risk,val_risk,seconds", f"0,nan,{self.initial_val_risk!r},0"]
        for e, tr, va, s in zip(self.epochs, self.train_risk, self.val_risk, self.seconds):
            rows.append(f"{e},{tr!r},{va!r},{f'{s:.3f}' if with_timing else 'NA'}")
        return "\n".join(rows) + "\n"


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strict decrease."""

    def __init__(self, patience: int, initial: float = math.inf):
        self.patience = patience
        self.best = initial
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, risk: float) -> bool:
        if risk < self.best:
            self.best, self.best_epoch, self.bad = risk, epoch, 0
        else:
            self.bad += 1
        return self.bad >= self.patience


def _simulate_one(args):
    task, theta, seed, stream, m = args
    rng = make_rng(seed, *stream)
    S = sample_locations(task.prior.locations, rng)
    Z = simulate_fields(task.model, dict(zip(task.prior.names, theta)), S, m, rng, task.fixed)
    return SpatialDataset.shared(S, Z)


def simulate_set(task: SimulationTask, thetas: np.ndarray, J: int, m: int, seed: int,
                 stream: tuple[int, ...], workers: int = 1) -> LabelledSet:
    """``J`` datasets of ``m`` replicates for every row of ``thetas``.

    Dataset ``(k, j)`` uses its own RNG stream ``(seed, *stream, k, j)``, so
    the result does not depend on ``workers``.
    """
    jobs = [(task, thetas[k], seed, (*stream, k, j), m) for k in range(len(thetas)) for j in range(J)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            datasets = list(ex.map(_simulate_one, jobs, chunksize=64))
    else:
        datasets = [_simulate_one(a) for a in jobs]
    return LabelledSet(np.repeat(thetas, J, axis=0), datasets)


def loss_and_grad(estimator, theta: np.ndarray, out: np.ndarray):
    if estimator.kind == "interval":
        return joint_interval_loss(theta.astype(out.dtype), out, *estimator.q)
    return mae_loss(theta.astype(out.dtype), out)


def risk_of_outputs(kind: str, theta: np.ndarray, out: np.ndarray, q=(0.025, 0.975)) -> float:
    """Mean loss of raw estimator outputs over a labelled set."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.asarray(out, dtype=np.float64)
    if kind == "interval":
        return joint_interval_loss(theta, out, *q)[0]
    return mae_loss(theta, out)[0]


class _Prepared:
    """Pre-built graph batches for a fixed labelled set."""

    def __init__(self, estimator, lset: LabelledSet, rng, batch_size: int):
        self.items = []
        for i in range(0, len(lset), batch_size):
            ds = lset.datasets[i:i + batch_size]
            batch, values = prepare_batch(ds, estimator.arch.rule, rng)
            x = node_features(values, estimator.arch.input_transform, estimator.dtype)
            self.items.append((batch, x, lset.thetas[i:i + batch_size]))


def validation_risk(estimator, validation, batch_size: int = 64) -> float:
    """Mean loss of ``estimator`` over a fixed validation set.

    ``validation`` is a ``LabelledSet`` or pre-built batches. ``estimator`` may
    also be a plain callable mapping a list of datasets to outputs, in which
    case it is scored with the absolute-error loss.
    """
    if isinstance(validation, LabelledSet):
        if len(validation) == 0:
            raise ValueError("empty validation set")
        if callable(estimator) and not hasattr(estimator, "forward"):
            out = np.asarray(estimator(validation.datasets), dtype=np.float64)
            return risk_of_outputs("point", validation.thetas, out)
        validation = _Prepared(estimator, validation, make_rng(0, _GRAPHS), batch_size)
    if not validation.items:
        raise ValueError("empty validation set")
    total, count = 0.0, 0
    for batch, x, theta in validation.items:
        out, _ = estimator.forward(batch, x)
        total += risk_of_outputs(estimator.kind, theta, out, getattr(estimator, "q", None)) * len(theta)
        count += len(theta)
    return total / count


def _snapshot(estimator) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in estimator.named_params().items()}


def _restore(estimator, snap) -> None:
    params = estimator.named_params()
    for k, v in snap.items():
        params[k][...] = v


def train(estimator, task: SimulationTask, cfg: TrainConfig, progress=None):
    """Train ``estimator`` in place; returns ``(estimator, TrainHistory)``.

    The loss follows the estimator kind: absolute error for point
    estimators, the joint pinball loss for interval estimators.
    """
    seed = cfg.seed
    prior = task.prior
    theta_train = sample_prior(prior, cfg.K_train, make_rng(seed, _THETA_TRAIN))
    theta_val = sample_prior(prior, cfg.K_val, make_rng(seed, _THETA_VAL))
    val_set = simulate_set(task, theta_val, cfg.J, cfg.m, seed, (_DATA_VAL,), cfg.workers)
    val = _Prepared(estimator, val_set, make_rng(seed, _GRAPHS, 0), 64)

    params = estimator.named_params()
    state = AdamState(lr=cfg.lr)
    hist = TrainHistory()
    hist.initial_val_risk = validation_risk(estimator, val)
    stopper = EarlyStopping(cfg.patience, hist.initial_val_risk)
    best = _snapshot(estimator)
    log.info("epoch 0: validation risk %.5f", hist.initial_val_risk)

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        train_set = simulate_set(task, theta_train, cfg.J, cfg.m, seed, (_DATA_TRAIN, epoch), cfg.workers)
        rng = make_rng(seed, _SHUFFLE, epoch)
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            batch, values = prepare_batch([train_set.datasets[j] for j in idx], estimator.arch.rule, rng)
            x = node_features(values, estimator.arch.input_transform, estimator.dtype)
            theta = train_set.thetas[idx]
            out, cache = estimator.forward(batch, x)
            loss, dout = loss_and_grad(estimator, theta, out)
            if not math.isfinite(loss):
                bad = int(np.sum(~np.isfinite(out)))
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch}, step {i // cfg.batch_size}; "
                    f"{bad} of {out.size} outputs non-finite"
                )
            grads = estimator.backward(batch, cache, dout)
            adam_update(params, grads, state)
            total += loss * len(idx)
            count += len(idx)
        vr = validation_risk(estimator, val)
        if not math.isfinite(vr):
            raise TrainingError(f"non-finite validation risk at epoch {epoch}")
        hist.epochs.append(epoch)
        hist.train_risk.append(total / count)
        hist.val_risk.append(vr)
        hist.seconds.append(time.perf_counter() - t0)
        stop = stopper.update(epoch, vr)
        if stopper.best_epoch == epoch:
            best = _snapshot(estimator)
        log.info("epoch %d: train %.5f  val %.5f  (%.1fs)", epoch, total / count, vr, hist.seconds[-1])
        if progress is not None:
            progress(epoch, total / count, vr)
        if stop:
            break
    hist.stopped_epoch = hist.epochs[-1] if hist.epochs else 0
    hist.best_epoch = stopper.best_epoch
    _restore(estimator, best)
    return estimator, hist


def clone(estimator):
    return copy.deepcopy(estimator)
