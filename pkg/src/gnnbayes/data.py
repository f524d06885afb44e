"""Replicated spatial datasets and their CSV representation."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class SpatialDataset:
    """``m`` independent fields; field ``i`` has locations ``coords[i]`` (n_i x 2)
    and values ``values[i]`` (n_i,)."""

    coords: list[np.ndarray]
    values: list[np.ndarray]

    def __post_init__(self):
        if len(self.coords) != len(self.values):
            raise ValueError("coords and values must list the same number of replicates")
        self.coords = [np.asarray(S, dtype=np.float64).reshape(-1, 2) for S in self.coords]
        self.values = [np.asarray(z, dtype=np.float64).ravel() for z in self.values]
        for i, (S, z) in enumerate(zip(self.coords, self.values)):
            if len(S) != len(z):
                raise ValueError(f"replicate {i + 1}: {len(S)} locations but {len(z)} values")

    @classmethod
    def shared(cls, S: np.ndarray, Z: np.ndarray) -> "SpatialDataset":
        """Replicates ``Z`` (m x n) observed at common locations ``S``."""
        Z = np.atleast_2d(Z)
        return cls([S] * len(Z), list(Z))

    @property
    def m(self) -> int:
        return len(self.values)

    @property
    def sizes(self) -> list[int]:
        return [len(z) for z in self.values]

    def digest(self) -> bytes:
        """Content hash, used to derive reproducible neighbour subsampling."""
        h = hashlib.sha256()
        for S, z in zip(self.coords, self.values):
            h.update(np.ascontiguousarray(S).tobytes())
            h.update(np.ascontiguousarray(z).tobytes())
        return h.digest()

    def permuted(self, order) -> "SpatialDataset":
        return SpatialDataset([self.coords[i] for i in order], [self.values[i] for i in order])


def dataset_to_csv(ds: SpatialDataset, header_lines: list[str] | None = None) -> str:
    buf = io.StringIO()
    for line in header_lines or []:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replicate", "x", "y", "z"])
    for i, (S, z) in enumerate(zip(ds.coords, ds.values), start=1):
        for (x, y), v in zip(S, z):
            w.writerow([i, repr(float(x)), repr(float(y)), repr(float(v))])
    return buf.getvalue()


def write_dataset(path: str | Path, ds: SpatialDataset, header_lines: list[str] | None = None) -> None:
    Path(path).write_text(dataset_to_csv(ds, header_lines))


def read_dataset(path: str | Path) -> SpatialDataset:
    """Read a ``replicate,x,y,z`` CSV; ``#`` lines are comments."""
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    reader = csv.reader(rows)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["replicate", "x", "y", "z"]:
        raise ValueError(f"{path}: expected header 'replicate,x,y,z', got {header}")
    groups: dict[int, list[tuple[float, float, float]]] = {}
    for lineno, row in enumerate(reader, start=2):
        if len(row) != 4:
            raise ValueError(f"{path}: line {lineno} has {len(row)} fields")
        rep = int(row[0])
        if rep < 1:
            raise ValueError(f"{path}: replicate ids are 1-based, got {rep}")
        groups.setdefault(rep, []).append((float(row[1]), float(row[2]), float(row[3])))
    if not groups:
        raise ValueError(f"{path}: no data rows")
    coords, values = [], []
    for rep in sorted(groups):
        arr = np.array(groups[rep])
        coords.append(arr[:, :2])
        values.append(arr[:, 2])
    return SpatialDataset(coords, values)
