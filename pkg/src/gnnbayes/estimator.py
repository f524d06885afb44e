"""GNN/DeepSets point and interval estimators, parameter accounting, checkpoints.

Network layout: graph convolutions -> node average per replicate -> average
over replicates -> dense layers. Interval estimators hold two such networks
``U`` and ``V`` and report ``[g(U), g(U + exp(V))]`` where ``g`` is a
logistic map onto the prior support.
"""
from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .data import SpatialDataset
from .graph import NeighbourRule, batch_graphs, build_graph
from .nn import ACTIVATIONS, DenseLayer, GraphConvLayer
from .simulate import PriorSpec, make_rng

MAGIC = b"GNNBAYES"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ArchSpec:
    p: int
    n_layers: int = 4
    channels: int = 128
    hidden: tuple[int, ...] = (128, 128)
    final_activation: str = "exp"
    input_transform: str = "identity"
    gamma0: float = 0.1
    rule: NeighbourRule = field(default_factory=NeighbourRule)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if isinstance(self.rule, dict):
            self.rule = NeighbourRule(**self.rule)
        if self.p < 1 or self.n_layers < 1 or self.channels < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"invalid architecture {self}")
        if self.final_activation not in ACTIVATIONS:
            raise ValueError(f"unknown final activation {self.final_activation!r}")
        if self.input_transform not in ("identity", "log"):
            raise ValueError(f"unknown input transform {self.input_transform!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["rule"] = NeighbourRule(**d["rule"])
        return cls(**d)


def layer_parameter_counts(arch: ArchSpec) -> list[tuple[str, int]]:
    """Per-layer trainable-parameter counts for one network."""
    out = []
    width = 1
    for l in range(arch.n_layers):
        out.append((f"conv{l} ({width}->{arch.channels})", 2 * arch.channels * width + arch.channels + 1))
        width = arch.channels
    for i, h in enumerate(arch.hidden):
        out.append((f"dense{i} ({width}->{h})", h * width + h))
        width = h
    out.append((f"dense{len(arch.hidden)} ({width}->{arch.p})", arch.p * width + arch.p))
    return out


class GNN:
    """One psi/phi network (graph convolutions, averages, dense mapping)."""

    def __init__(self, arch: ArchSpec, final_activation: str, rng: np.random.Generator, dtype=np.float32):
        self.arch = arch
        self.convs: list[GraphConvLayer] = []
        width = 1
        for _ in range(arch.n_layers):
            self.convs.append(GraphConvLayer.init(rng, width, arch.channels, arch.gamma0, "relu", dtype))
            width = arch.channels
        self.dense: list[DenseLayer] = []
        for h in arch.hidden:
            self.dense.append(DenseLayer.init(rng, width, h, "relu", dtype))
            width = h
        self.dense.append(DenseLayer.init(rng, width, arch.p, final_activation, dtype))

    def named_params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for l, conv in enumerate(self.convs):
            for k, v in conv.params().items():
                out[f"{prefix}conv{l}.{k}"] = v
        for l, layer in enumerate(self.dense):
            for k, v in layer.params().items():
                out[f"{prefix}dense{l}.{k}"] = v
        return out

    def set_params(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        for l, conv in enumerate(self.convs):
            for k in ("W1", "W2", "b", "gamma_raw"):
                setattr(conv, k, values[f"{prefix}conv{l}.{k}"])
        for l, layer in enumerate(self.dense):
            for k in ("W", "b"):
                setattr(layer, k, values[f"{prefix}dense{l}.{k}"])

    def forward(self, batch, x: np.ndarray):
        H = x
        caches = []
        for conv in self.convs:
            H, c = conv.forward(batch, H)
            caches.append(c)
        P = batch.readout_matrix(H.dtype)
        A = batch.set_matrix(H.dtype)
        X = A @ (P @ H)
        for layer in self.dense:
            X, c = layer.forward(X)
            caches.append(c)
        return X, (caches, P, A)

    def backward(self, batch, cache, dout: np.ndarray, prefix: str = "") -> dict[str, np.ndarray]:
        caches, P, A = cache
        grads = {}
        nc = len(self.convs)
        d = dout
        for l in range(len(self.dense) - 1, -1, -1):
            d, g = self.dense[l].backward(caches[nc + l], d)
            for k, v in g.items():
                grads[f"{prefix}dense{l}.{k}"] = v
        d = P.T @ (A.T @ d)
        for l in range(nc - 1, -1, -1):
            d, g = self.convs[l].backward(batch, caches[l], d)
            for k, v in g.items():
                grads[f"{prefix}conv{l}.{k}"] = v
        return grads


def node_features(values: list[np.ndarray], transform: str, dtype) -> np.ndarray:
    z = np.concatenate(values)
    if transform == "log":
        z = np.log(z)
    return z.astype(dtype)[:, None]


def prepare_batch(datasets: list[SpatialDataset], rule: NeighbourRule, rng: np.random.Generator):
    """Build graphs for every replicate of every dataset and batch them."""
    graphs, owner, values = [], [], []
    for d, ds in enumerate(datasets):
        if ds.m == 0:
            raise ValueError("dataset has no replicates")
        for S, z in zip(ds.coords, ds.values):
            if len(z) == 0:
                raise ValueError("replicate with no observations")
            graphs.append(build_graph(S, rule, rng))
            owner.append(d)
            values.append(z)
    return batch_graphs(graphs, owner), values


@dataclass
class EstimateReport:
    names: tuple[str, ...]
    estimate: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    seconds: float = 0.0
    n: list[int] = field(default_factory=list)
    m: int = 0

    def to_csv(self, with_timing: bool = True) -> str:
        lines = []
        if self.estimate is not None:
            lines.append("param,estimate")
            lines += [f"{k},{float(v)!r}" for k, v in zip(self.names, self.estimate)]
        else:
            lines.append("param,lower,upper")
            lines += [f"{k},{float(a)!r},{float(b)!r}" for k, a, b in zip(self.names, self.lower, self.upper)]
        secs = f"{self.seconds:.6f}" if with_timing else "NA"
        lines.append(f"# seconds={secs} m={self.m} n={'/'.join(map(str, self.n))}")
        return "\n".join(lines) + "\n"


class _EstimatorBase:
    kind = ""

    def __init__(self, arch: ArchSpec, names: tuple[str, ...]):
        self.arch = arch
        self.names = tuple(names)
        if len(self.names) != arch.p:
            raise ValueError(f"{len(self.names)} parameter names for p = {arch.p}")

    def count_parameters(self) -> int:
        return int(sum(v.size for v in self.named_params().values()))

    def _graph_rng(self, ds: list[SpatialDataset], rng, reproducible: bool):
        if reproducible or rng is None:
            h = hashlib.sha256()
            for d in ds:
                h.update(d.digest())
            return np.random.Generator(np.random.Philox(int.from_bytes(h.digest()[:16], "little")))
        return rng

    def predict(self, datasets: list[SpatialDataset], rng=None, reproducible: bool = False) -> np.ndarray:
        """Raw outputs for a list of datasets (B x p, or B x 2p for intervals)."""
        if not datasets:
            raise ValueError("no datasets to estimate from")
        batch, values = prepare_batch(datasets, self.arch.rule, self._graph_rng(datasets, rng, reproducible))
        x = node_features(values, self.arch.input_transform, self.dtype)
        return self.forward(batch, x)[0]

    @property
    def dtype(self):
        return next(iter(self.named_params().values())).dtype


class PointEstimator(_EstimatorBase):
    kind = "point"

    def __init__(self, arch: ArchSpec, names, rng: np.random.Generator, dtype=np.float32):
        super().__init__(arch, names)
        self.net = GNN(arch, arch.final_activation, rng, dtype)

    def named_params(self) -> dict[str, np.ndarray]:
        return self.net.named_params()

    def set_params(self, values) -> None:
        self.net.set_params(values)

    def forward(self, batch, x):
        return self.net.forward(batch, x)

    def backward(self, batch, cache, dout):
        return self.net.backward(batch, cache, dout)

    def estimate(self, data: SpatialDataset, rng=None, reproducible: bool = False) -> EstimateReport:
        t0 = time.perf_counter()
        out = self.predict([data], rng, reproducible)[0]
        return EstimateReport(self.names, estimate=out.astype(np.float64),
                              seconds=time.perf_counter() - t0, n=data.sizes, m=data.m)


class IntervalEstimator(_EstimatorBase):
    """Outputs ``(g(U), g(U + exp(V)))`` with ``g(x) = a + (b - a) / (1 + e^-x)``."""

    kind = "interval"

    def __init__(self, arch: ArchSpec, prior: PriorSpec, rng: np.random.Generator,
                 q: tuple[float, float] = (0.025, 0.975), dtype=np.float32):
        super().__init__(arch, prior.names)
        self.lower = prior.lower_array
        self.upper = prior.upper_array
        self.q = tuple(q)
        self.U = GNN(arch, "identity", rng, dtype)
        self.V = GNN(arch, "identity", rng, dtype)
        # start from the prior's central interval; at u = v = 0 the interval is
        # narrow and the first steps blow exp(v) up into the flat saturated tail
        lo, hi = logit(self.q[0]), logit(self.q[1])
        self.U.dense[-1].b[:] = lo
        self.V.dense[-1].b[:] = np.log(hi - lo)

    def named_params(self) -> dict[str, np.ndarray]:
        return {**self.U.named_params("U."), **self.V.named_params("V.")}

    def set_params(self, values) -> None:
        self.U.set_params(values, "U.")
        self.V.set_params(values, "V.")

    def _g(self, x):
        return self.lower + (self.upper - self.lower) * expit(x)

    def _dg(self, x):
        s = expit(x)
        return (self.upper - self.lower) * s * (1.0 - s)

    def forward(self, batch, x):
        u, cu = self.U.forward(batch, x)
        v, cv = self.V.forward(batch, x)
        u64 = u.astype(np.float64)
        ev = np.exp(v.astype(np.float64))
        Q = np.concatenate((self._g(u64), self._g(u64 + ev)), axis=1)
        return Q.astype(u.dtype), (cu, cv, u64, ev)

    def backward(self, batch, cache, dQ):
        cu, cv, u64, ev = cache
        p = self.arch.p
        dlo, dhi = dQ[:, :p].astype(np.float64), dQ[:, p:].astype(np.float64)
        ghi = self._dg(u64 + ev) * dhi
        du = self._dg(u64) * dlo + ghi
        dv = ghi * ev
        dt = dQ.dtype
        return {**self.U.backward(batch, cu, du.astype(dt), "U."),
                **self.V.backward(batch, cv, dv.astype(dt), "V.")}

    def interval(self, datasets: list[SpatialDataset], rng=None, reproducible: bool = False):
        """``(lower, upper)`` arrays of shape (B, p), computed in double precision.

        Exact arithmetic gives ``a < lower < upper < b``; when the logistic map
        saturates in floating point the endpoints are nudged to the nearest
        representable values that keep that ordering.
        """
        batch, values = prepare_batch(datasets, self.arch.rule, self._graph_rng(datasets, rng, reproducible))
        x = node_features(values, self.arch.input_transform, self.dtype)
        u, _ = self.U.forward(batch, x)
        v, _ = self.V.forward(batch, x)
        return self.endpoints(u, v)

    def endpoints(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        with np.errstate(over="ignore"):
            lo = self._g(u)
            hi = self._g(u + np.exp(v))
        a = np.broadcast_to(self.lower, lo.shape)
        b = np.broadcast_to(self.upper, lo.shape)
        lo = np.clip(lo, np.nextafter(a, np.inf), np.nextafter(np.nextafter(b, -np.inf), -np.inf))
        hi = np.clip(hi, np.nextafter(lo, np.inf), np.nextafter(b, -np.inf))
        return lo, hi

    def estimate(self, data: SpatialDataset, rng=None, reproducible: bool = False) -> EstimateReport:
        t0 = time.perf_counter()
        lo, hi = self.interval([data], rng, reproducible)
        return EstimateReport(self.names, lower=lo[0], upper=hi[0],
                              seconds=time.perf_counter() - t0, n=data.sizes, m=data.m)


def build_point_estimator(arch: ArchSpec, names, rng: np.random.Generator, dtype=np.float32) -> PointEstimator:
    return PointEstimator(arch, names, rng, dtype)


def build_interval_estimator(arch: ArchSpec, prior: PriorSpec, rng: np.random.Generator,
                             q=(0.025, 0.975), dtype=np.float32) -> IntervalEstimator:
    return IntervalEstimator(arch, prior, rng, q, dtype)


def count_parameters(obj) -> int:
    """Trainable scalars in an estimator, or in one network of an ``ArchSpec``."""
    if isinstance(obj, ArchSpec):
        return sum(c for _, c in layer_parameter_counts(obj))
    return obj.count_parameters()


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------


def _header(est, metadata: dict) -> dict:
    params = est.named_params()
    h = {
        "kind": est.kind,
        "arch": est.arch.to_dict(),
        "names": list(est.names),
        "metadata": metadata,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    if est.kind == "interval":
        h["lower"] = [float(a) for a in est.lower]
        h["upper"] = [float(b) for b in est.upper]
        h["q"] = list(est.q)
    return h


def checkpoint_bytes(est, metadata: dict | None = None) -> bytes:
    header = json.dumps(_header(est, metadata or {}), sort_keys=True, separators=(",", ":")).encode()
    body = bytearray(MAGIC)
    body += struct.pack("<II", FORMAT_VERSION, len(header))
    body += header
    for arr in est.named_params().values():
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(body) + hashlib.sha256(body).digest()


def save_checkpoint(path: str | Path, est, metadata: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(est, metadata))


def load_checkpoint(path: str | Path):
    """Return ``(estimator, arch, metadata)``."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 + 32 or not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted file)")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off = len(MAGIC) + 8
    header = json.loads(body[off:off + hlen])
    off += hlen
    arch = ArchSpec.from_dict(header["arch"])
    rng = np.random.default_rng(0)
    if header["kind"] == "point":
        est = PointEstimator(arch, tuple(header["names"]), rng)
    elif header["kind"] == "interval":
        prior = PriorSpec(tuple(header["names"]), tuple(header["lower"]), tuple(header["upper"]))
        est = IntervalEstimator(arch, prior, rng, tuple(header["q"]))
    else:
        raise CheckpointError(f"{path}: unknown estimator kind {header['kind']!r}")
    values = {}
    for t in header["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).astype(np.float32)
        values[t["name"]] = arr.reshape(t["shape"])
        off += 4 * size
    if off != len(body):
        raise CheckpointError(f"{path}: tensor data length does not match manifest")
    est.set_params(values)
    return est, arch, header["metadata"]
