"""Continuous piecewise-linear functions in difference-of-convex form.

f(x) = max_j (a_j^+ . x + b_j^+) - max_k (a_k^- . x + b_k^-)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DataSet
from .errors import ValidationError

ARGMAX_TOL = 1e-9
ACTIVITY_TOL = 1e-6
REPORT_TOL = 1e-6


@dataclass(frozen=True)
class AffinePiece:
    a: tuple[float, ...]
    b: float

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(v) for v in np.atleast_1d(self.a)))
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self) -> int:
        return len(self.a)


def eval_affine(p: AffinePiece, x) -> float:
    """a.x + b accumulated left to right."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (p.dim,):
        raise ValidationError(f"point has dimension {x.size}, piece has {p.dim}")
    acc = 0.0
    for ar, xr in zip(p.a, x):
        acc += ar * float(xr)
    return acc + p.b


class ConvexPWL:
    """Pointwise maximum of P >= 1 affine pieces, stored as arrays A (P, d), b (P,)."""

    def __init__(self, A, b):
        A = np.array(A, dtype=float, ndmin=2)
        b = np.array(b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0] or A.shape[0] < 1:
            raise ValidationError("a convex part needs at least one piece and matching A, b")
        A.setflags(write=False)
        b.setflags(write=False)
        self.A, self.b = A, b

    @classmethod
    def from_pieces(cls, pieces) -> "ConvexPWL":
        pieces = list(pieces)
        if not pieces:
            raise ValidationError("a convex part needs at least one piece")
        return cls([p.a for p in pieces], [p.b for p in pieces])

    @property
    def pieces(self) -> list[AffinePiece]:
        return [AffinePiece(a, b) for a, b in zip(self.A, self.b)]

    @property
    def P(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def piece_values(self, X) -> np.ndarray:
        """(N, P) matrix of every piece at every point."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValidationError(f"points have dimension {X.shape[1]}, function has {self.dim}")
        return X @ self.A.T + self.b

    def __call__(self, X) -> np.ndarray:
        return self.piece_values(X).max(axis=1)

    def __eq__(self, other):
        return isinstance(other, ConvexPWL) and np.array_equal(self.A, other.A) and np.array_equal(self.b, other.b)

    def to_json(self) -> list:
        return [{"a": [float(v) for v in a], "b": float(b)} for a, b in zip(self.A, self.b)]


class DCFunction:
    def __init__(self, plus: ConvexPWL, minus: ConvexPWL):
        if plus.dim != minus.dim:
            raise ValidationError("plus and minus parts have different dimensions")
        self.plus, self.minus = plus, minus

    @classmethod
    def from_arrays(cls, Ap, bp, Am, bm) -> "DCFunction":
        return cls(ConvexPWL(Ap, bp), ConvexPWL(Am, bm))

    @property
    def dim(self) -> int:
        return self.plus.dim

    @property
    def Pp(self) -> int:
        return self.plus.P

    @property
    def Pm(self) -> int:
        return self.minus.P

    def __call__(self, X) -> np.ndarray:
        return self.plus(X) - self.minus(X)

    def pair(self, j: int, k: int) -> AffinePiece:
        """f_{j,k} = f_j^+ - f_k^-."""
        return AffinePiece(self.plus.A[j] - self.minus.A[k], self.plus.b[j] - self.minus.b[k])

    def __eq__(self, other):
        return isinstance(other, DCFunction) and self.plus == other.plus and self.minus == other.minus

    def to_json(self) -> dict:
        return {"plus": self.plus.to_json(), "minus": self.minus.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "DCFunction":
        def part(items):
            if not items:
                raise ValidationError("empty piece list")
            return ConvexPWL([p["a"] for p in items], [p["b"] for p in items])

        return cls(part(obj["plus"]), part(obj["minus"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "DCFunction":
        return cls.from_json(json.loads(Path(path).read_text()))


def eval_dc(f: DCFunction, x, tol: float = ARGMAX_TOL) -> tuple[float, frozenset, frozenset]:
    """Value of f at a single point together with the argmax index sets of both parts."""
    vp = [eval_affine(p, x) for p in f.plus.pieces]
    vm = [eval_affine(p, x) for p in f.minus.pieces]
    mp, mm = max(vp), max(vm)
    J = frozenset(j for j, v in enumerate(vp) if mp - v <= tol)
    K = frozenset(k for k, v in enumerate(vm) if mm - v <= tol)
    return mp - mm, J, K


def normalize(f: DCFunction) -> DCFunction:
    """Equivalent representation with pieces sorted by first coefficient and the
    first minus piece equal to zero (translation invariance of the max)."""
    op = np.argsort(f.plus.A[:, 0], kind="stable")
    om = np.argsort(f.minus.A[:, 0], kind="stable")
    ga, gb = f.minus.A[om[0]], f.minus.b[om[0]]
    return DCFunction.from_arrays(f.plus.A[op] - ga, f.plus.b[op] - gb, f.minus.A[om] - ga, f.minus.b[om] - gb)


@dataclass
class FitReport:
    errors: np.ndarray
    max_error: float
    mean_error: float
    eps: float
    feasible: bool
    violations: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "errors": [float(e) for e in self.errors],
            "max_error": self.max_error,
            "mean_error": self.mean_error,
            "eps": self.eps,
            "feasible": self.feasible,
            "violations": self.violations,
        }


def verify_eps_approx(f: DCFunction, S: DataSet, eps: float, tol: float = REPORT_TOL) -> FitReport:
    """Signed errors e_i = f(x_i) - z_i and the check max |e_i| <= eps (+ tol)."""
    if f.dim != S.dim:
        raise ValidationError(f"function dimension {f.dim} does not match data dimension {S.dim}")
    e = f(S.X) - S.z
    ae = np.abs(e)
    viol = [int(i) for i in np.flatnonzero(ae > eps + tol)]
    return FitReport(e, float(ae.max()), float(ae.mean()), float(eps), not viol, viol)


@dataclass(frozen=True)
class ActivityMap:
    J: tuple[frozenset, ...]
    K: tuple[frozenset, ...]

    def pairs(self) -> list[tuple[int, int]]:
        """Sorted (j, k) pairs active at one or more data points."""
        out = set()
        for Ji, Ki in zip(self.J, self.K):
            out.update((j, k) for j in Ji for k in Ki)
        return sorted(out)


def activity_map(f: DCFunction, S: DataSet, tol: float = ACTIVITY_TOL) -> ActivityMap:
    Vp = f.plus.piece_values(S.X)
    Vm = f.minus.piece_values(S.X)
    Ap = Vp.max(axis=1, keepdims=True) - Vp <= tol
    Am = Vm.max(axis=1, keepdims=True) - Vm <= tol
    J = tuple(frozenset(int(j) for j in np.flatnonzero(r)) for r in Ap)
    K = tuple(frozenset(int(k) for k in np.flatnonzero(r)) for r in Am)
    return ActivityMap(J, K)


@dataclass
class WellBehavedReport:
    passed: bool
    counts: dict[tuple[int, int], int]
    interpolated: dict[tuple[int, int], tuple[int, ...]]
    need: int

    @property
    def underdetermined(self) -> list[tuple[int, int]]:
        return [p for p, c in self.counts.items() if c < self.need]


def interpolation_sets(f: DCFunction, S: DataSet, pairs, tol: float = ACTIVITY_TOL) -> dict:
    """For each pair (j, k), points where f_{j,k} meets the targets t_i = f(x_i)."""
    t = f(S.X)
    Vp = f.plus.piece_values(S.X)
    Vm = f.minus.piece_values(S.X)
    return {(j, k): tuple(int(i) for i in np.flatnonzero(np.abs(Vp[:, j] - Vm[:, k] - t) <= tol)) for j, k in pairs}


def check_well_behaved(f: DCFunction, S: DataSet, tol: float = ACTIVITY_TOL) -> WellBehavedReport:
    """Every pair active at a data point must interpolate at least d+1 of the
    targets z_i + e_i = f(x_i)."""
    pairs = activity_map(f, S, tol).pairs()
    sets = interpolation_sets(f, S, pairs, tol)
    counts = {p: len(s) for p, s in sets.items()}
    need = S.dim + 1
    return WellBehavedReport(all(c >= need for c in counts.values()), counts, sets, need)


def _lift(verts: np.ndarray) -> np.ndarray:
    return np.vstack([verts.T, np.ones(verts.shape[0])])


def barycentric(x, verts) -> np.ndarray:
    """Barycentric coordinates of x in the simplex spanned by d+1 vertices."""
    V = np.asarray(verts, dtype=float)
    x = np.asarray(x, dtype=float)
    if V.ndim != 2 or V.shape[0] != V.shape[1] + 1 or x.shape != (V.shape[1],):
        raise ValidationError("need d+1 vertices in R^d and a point in R^d")
    L = _lift(V)
    if abs(np.linalg.det(L)) <= 1e-12 * max(1.0, np.abs(L).max()) ** V.shape[1]:
        raise ValidationError("degenerate simplex")
    return np.linalg.solve(L, np.append(x, 1.0))


def point_in_simplex(x, verts, tol: float = 1e-12) -> bool:
    """True iff every barycentric coordinate of x is >= -tol (boundary counts)."""
    return bool(np.all(barycentric(x, verts) >= -tol))


def segment_crosses_facet(q1, q2, verts, tol: float = 1e-12) -> bool:
    """True iff the open segment (q1, q2) meets the relative interior of the
    (d-1)-simplex spanned by d vertices transversally. Coplanar contact is not
    a crossing."""
    V = np.atleast_2d(np.asarray(verts, dtype=float))
    q1 = np.atleast_1d(np.asarray(q1, dtype=float))
    q2 = np.atleast_1d(np.asarray(q2, dtype=float))
    d = q1.shape[0]
    if V.shape != (d, d):
        raise ValidationError("need d vertices in R^d")
    if d > 1:
        E = V[1:] - V[0]
        if np.linalg.matrix_rank(E, tol=1e-12 * max(1.0, np.abs(E).max())) < d - 1:
            raise ValidationError("degenerate facet")
    # q1 + t (q2 - q1) = sum_n mu_n v_n, sum_n mu_n = 1
    M = np.zeros((d + 1, d + 1))
    M[:d, 0] = q2 - q1
    M[:d, 1:] = -V.T
    M[d, 1:] = 1.0
    rhs = np.append(-q1, 1.0)
    scale = max(1.0, np.abs(M).max())
    if abs(np.linalg.det(M)) <= 1e-12 * scale ** (d + 1):
        return False
    sol = np.linalg.solve(M, rhs)
    t, mu = sol[0], sol[1:]
    return bool(tol < t < 1 - tol and np.all(mu > tol))
