"""Point sets S = (x_i, z_i): loading, synthetic generation, rescaling and
general-position checks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from itertools import combinations, islice
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import ParseError, ValidationError


@dataclass(frozen=True)
class DataSet:
    """N points x_i in R^d with scalar targets z_i."""

    X: np.ndarray
    z: np.ndarray
    name: str = "data"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        z = np.asarray(self.z, dtype=float).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[1] < 1:
            raise ValidationError("X must be a 2-D array with at least one column")
        if X.shape[0] != z.shape[0]:
            raise ValidationError(f"X has {X.shape[0]} rows but z has {z.shape[0]} entries")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(z))):
            raise ValidationError("non-finite coordinate or target")
        dup = _first_duplicate(X)
        if dup is not None:
            raise ValidationError(f"points {dup[0]} and {dup[1]} share identical x coordinates")
        X.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "z", z)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def N(self) -> int:
        return self.X.shape[0]

    def to_bytes(self) -> bytes:
        """Canonical byte image, used as a cache key ingredient."""
        return self.X.astype("<f8").tobytes() + self.z.astype("<f8").tobytes()

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "name": self.name,
            "points": [[*map(float, x), float(zi)] for x, zi in zip(self.X, self.z)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DataSet":
        pts = np.asarray(obj["points"], dtype=float)
        d = int(obj["dim"])
        if pts.ndim != 2 or pts.shape[1] != d + 1:
            raise ValidationError(f"points must have {d + 1} entries each")
        return cls(pts[:, :d], pts[:, d], obj.get("name", "data"))


def _first_duplicate(X: np.ndarray):
    order = np.lexsort(X.T[::-1])
    Xs = X[order]
    same = np.all(Xs[1:] == Xs[:-1], axis=1)
    if np.any(same):
        k = int(np.argmax(same))
        return tuple(sorted((int(order[k]), int(order[k + 1]))))
    return None


def load_csv(path: str | Path, name: str | None = None) -> DataSet:
    """Read a CSV file with header ``x1,...,xd,z``.

    Raises:
        ParseError: malformed header or a non-numeric cell (line number given).
        ValidationError: duplicate x coordinates.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = [f"x{r + 1}" for r in range(d)] + ["z"]
        if d < 1 or header != expected:
            raise ParseError(f"{path}:1: header must be {','.join(expected) if d >= 1 else 'x1,...,xd,z'}, got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != d + 1:
                raise ParseError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric value in row {row}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    arr = np.asarray(rows)
    return DataSet(arr[:, :d], arr[:, d], name or path.stem)


def save_csv(ds: DataSet, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{r + 1}" for r in range(ds.dim)] + ["z"])
        for x, zi in zip(ds.X, ds.z):
            w.writerow([repr(float(v)) for v in x] + [repr(float(zi))])


# Synthetic functions of the benchmark suite: id -> (arity, callable, default box, default N)
FUNCTIONS = {
    "x2*sin(x1)": (2, lambda X: X[:, 1] * np.sin(X[:, 0]), [(0.0, math.pi), (0.0, 1.0)], 121),
    "x1^2-x2^2": (2, lambda X: X[:, 0] ** 2 - X[:, 1] ** 2, [(-1.0, 1.0), (-1.0, 1.0)], 64),
    "x1^2+x2^2+x3^2": (3, lambda X: X[:, 0] ** 2 + X[:, 1] ** 2 + X[:, 2] ** 2, [(0.0, 1.0)] * 3, 64),
    "x1*x2*x3": (3, lambda X: X[:, 0] * X[:, 1] * X[:, 2], [(0.0, 1.0)] * 3, 64),
}


@dataclass(frozen=True)
class SyntheticSpec:
    function: str
    box: tuple[tuple[float, float], ...] | None = None
    n_points: int | None = None
    seed: int = 0
    sampling: Literal["grid", "uniform-random"] = "uniform-random"

    def __post_init__(self):
        if self.function not in FUNCTIONS:
            raise ValidationError(f"unknown function {self.function!r}; choose from {sorted(FUNCTIONS)}")
        arity, _, box, n = FUNCTIONS[self.function]
        box = tuple(tuple(map(float, b)) for b in (self.box if self.box is not None else box))
        if len(box) != arity:
            raise ValidationError(f"{self.function} takes {arity} inputs but the box has {len(box)} sides")
        if any(lo >= hi for lo, hi in box):
            raise ValidationError("every box side must satisfy lo < hi")
        if self.sampling not in ("grid", "uniform-random"):
            raise ValidationError(f"unknown sampling mode {self.sampling!r}")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "n_points", int(self.n_points if self.n_points is not None else n))
        if self.n_points < 1:
            raise ValidationError("n_points must be positive")


def evaluate_function(function: str, X) -> np.ndarray:
    return FUNCTIONS[function][1](np.atleast_2d(np.asarray(X, dtype=float)))


def generate(spec: SyntheticSpec) -> DataSet:
    """Sample a synthetic data set; deterministic for a fixed seed.

    Grid sampling uses the smallest lattice with at least ``n_points`` nodes and
    keeps the first ``n_points`` in C order. Grids are not in general position.
    """
    box = np.asarray(spec.box)
    d = box.shape[0]
    if spec.sampling == "grid":
        m = math.ceil(spec.n_points ** (1.0 / d) - 1e-9)
        axes = [np.linspace(lo, hi, m) for lo, hi in box]
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)[: spec.n_points]
    else:
        rng = np.random.default_rng(spec.seed)
        X = box[:, 0] + rng.random((spec.n_points, d)) * (box[:, 1] - box[:, 0])
    return DataSet(X, evaluate_function(spec.function, X), spec.function)


@dataclass(frozen=True)
class ScalingInfo:
    """Affine map u = (v - offset) / scale per coordinate; z is the last entry."""

    offset: np.ndarray
    scale: np.ndarray
    unscaled: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {"offset": self.offset.tolist(), "scale": self.scale.tolist(), "unscaled": list(self.unscaled)}

    @classmethod
    def from_json(cls, obj: dict) -> "ScalingInfo":
        return cls(np.asarray(obj["offset"], float), np.asarray(obj["scale"], float), tuple(obj.get("unscaled", ())))


def rescale(ds: DataSet) -> tuple[DataSet, ScalingInfo]:
    """Map every coordinate and z onto [0, 1] by min-max scaling.

    A constant column cannot be stretched: it is shifted to 0, keeps scale 1
    and its index is listed in ``ScalingInfo.unscaled``.
    """
    V = np.column_stack([ds.X, ds.z])
    lo = V.min(axis=0)
    span = V.max(axis=0) - lo
    flat = span <= 0
    scale = np.where(flat, 1.0, span)
    out = (V - lo) / scale
    info = ScalingInfo(lo, scale, tuple(int(i) for i in np.flatnonzero(flat)))
    return DataSet(out[:, :-1], out[:, -1], ds.name), info


def unscale(ds: DataSet, info: ScalingInfo) -> DataSet:
    V = np.column_stack([ds.X, ds.z]) * info.scale + info.offset
    return DataSet(V[:, :-1], V[:, -1], ds.name)


@dataclass
class GeneralPositionReport:
    passed: bool
    checked: int
    total: int
    exhaustive: bool
    offending: tuple[int, ...] | None = None
    min_ratio: float = field(default=math.inf)

    @property
    def coverage(self) -> float:
        return self.checked / self.total if self.total else 1.0


def lifted(X: np.ndarray) -> np.ndarray:
    """Rows [x_i, 1] of the lifted coordinate matrix."""
    return np.column_stack([X, np.ones(X.shape[0])])


def subset_chunks(N: int, k: int, chunk: int = 20000):
    """Lexicographic k-subsets of range(N) as integer arrays of at most ``chunk`` rows."""
    it = combinations(range(N), k)
    while True:
        block = list(islice(it, chunk))
        if not block:
            return
        yield np.asarray(block, dtype=np.intp)


def _degenerate_mask(M: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    d = M.shape[-1] - 1
    det = np.abs(np.linalg.det(M))
    norm = np.abs(M).sum(axis=-1).max(axis=-1)
    ratio = det / norm**d
    return ratio <= tol, ratio


def check_general_position(
    ds: DataSet,
    tol: float = 1e-9,
    cap: int = 2_000_000,
    samples: int = 200_000,
    seed: int = 0,
) -> GeneralPositionReport:
    """Check that every (d+1)-subset of x-points is affinely independent.

    Exhaustive when C(N, d+1) <= cap, otherwise a random sample of ``samples``
    subsets. The first failing subset in lexicographic order is reported.
    """
    d, N = ds.dim, ds.N
    if N < d + 1:
        raise ValidationError(f"need at least d+1={d + 1} points, got {N}")
    total = math.comb(N, d + 1)
    L = lifted(ds.X)
    min_ratio = math.inf
    if total <= cap:
        checked = 0
        for idx in subset_chunks(N, d + 1):
            bad, ratio = _degenerate_mask(L[idx], tol)
            checked += len(idx)
            min_ratio = min(min_ratio, float(ratio.min()))
            if np.any(bad):
                k = int(np.argmax(bad))
                return GeneralPositionReport(False, checked, total, True, tuple(int(v) for v in idx[k]), min_ratio)
        return GeneralPositionReport(True, checked, total, True, None, min_ratio)
    rng = np.random.default_rng(seed)
    failing = []
    for start in range(0, samples, 10000):
        m = min(10000, samples - start)
        idx = np.sort(rng.permuted(np.tile(np.arange(N), (m, 1)), axis=1)[:, : d + 1], axis=1)
        bad, ratio = _degenerate_mask(L[idx], tol)
        min_ratio = min(min_ratio, float(ratio.min()))
        failing += [tuple(int(v) for v in row) for row in idx[bad]]
    if failing:
        return GeneralPositionReport(False, samples, total, False, min(failing), min_ratio)
    return GeneralPositionReport(True, samples, total, False, None, min_ratio)


def save_json(ds: DataSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ds.to_json()))
