"""Extreme affine set enumeration, tight big-M values and variable bounds.

Every affine function that eps-approximates d+1 of the points lies in a
parallelotope whose 2^(d+1) vertices interpolate z_s + e, e in {-eps, +eps}^(d+1).
Extrema of any linear functional over all such functions are attained at those
vertices, so a single pass over all (d+1)-subsets yields every bound.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .cpwl import AffinePiece
from .dataset import DataSet, lifted, subset_chunks
from .errors import ValidationError

SINGULAR_TOL = 1e-12
DEDUP_TOL = 1e-10


def sign_patterns(d: int) -> np.ndarray:
    """(2^(d+1), d+1) array of +-1 patterns in itertools.product order."""
    return np.array(list(product([-1.0, 1.0], repeat=d + 1)))


def _solve_chunk(L: np.ndarray, z: np.ndarray, idx: np.ndarray, eps: float, signs: np.ndarray) -> np.ndarray:
    """Coefficients (m, 2^(d+1), d+1) of the vertex functions of each subset in ``idx``.

    One LU factorisation per subset serves all 2^(d+1) right-hand sides.
    """
    M = L[idx]
    d = M.shape[-1] - 1
    det = np.abs(np.linalg.det(M))
    scale = np.abs(M).sum(axis=-1).max(axis=-1) ** d
    bad = det <= SINGULAR_TOL * scale
    if np.any(bad):
        s = tuple(int(v) for v in idx[int(np.argmax(bad))])
        raise ValidationError(f"points {s} are affinely dependent (general position violated)")
    rhs = z[idx][:, :, None] + eps * signs.T[None, :, :]
    sol = np.linalg.solve(M, rhs)
    return np.swapaxes(sol, 1, 2)


def _iter_solutions(S: DataSet, eps: float, chunk: int):
    if eps < 0:
        raise ValidationError("eps must be non-negative")
    if S.N < S.dim + 1:
        raise ValidationError(f"need at least d+1={S.dim + 1} points, got {S.N}")
    L = lifted(S.X)
    signs = sign_patterns(S.dim)
    for idx in subset_chunks(S.N, S.dim + 1, chunk):
        yield idx, _solve_chunk(L, S.z, idx, eps, signs)


@dataclass
class ExtremeAffineSet:
    """Vertex functions as rows [a_1, ..., a_d, b] of ``coeffs``."""

    coeffs: np.ndarray
    n_raw: int
    n_duplicates: int
    sources: list[tuple[tuple[int, ...], tuple[int, ...]]] | None = None

    @property
    def functions(self) -> list[AffinePiece]:
        return [AffinePiece(c[:-1], c[-1]) for c in self.coeffs]

    def __len__(self) -> int:
        return self.coeffs.shape[0]


def enumerate_extreme_affine(S: DataSet, eps: float, dedup: bool = True, keep_sources: bool = False, chunk: int = 4096) -> ExtremeAffineSet:
    """Materialise the extreme affine set. Memory grows as C(N, d+1) 2^(d+1);
    use :func:`compute_extrema` for large instances."""
    d = S.dim
    signs = sign_patterns(d)
    blocks, sources = [], []
    for idx, F in _iter_solutions(S, eps, chunk):
        blocks.append(F.reshape(-1, d + 1))
        if keep_sources:
            sources.extend((tuple(int(v) for v in s), tuple(int(v) for v in e)) for s in idx for e in signs)
    coeffs = np.concatenate(blocks)
    n_raw = coeffs.shape[0]
    if dedup:
        _, keep = np.unique(np.round(coeffs / DEDUP_TOL), axis=0, return_index=True)
        keep.sort()
        coeffs = coeffs[keep]
        if keep_sources:
            sources = [sources[i] for i in keep]
    return ExtremeAffineSet(coeffs, n_raw, n_raw - coeffs.shape[0], sources if keep_sources else None)


def pointwise_extrema(A: ExtremeAffineSet, S: DataSet) -> tuple[np.ndarray, np.ndarray]:
    if len(A) == 0:
        raise ValidationError("empty affine set")
    V = lifted(S.X) @ A.coeffs.T
    return V.min(axis=1), V.max(axis=1)


def coefficient_extrema(A: ExtremeAffineSet) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Componentwise (a_lo, a_hi, b_lo, b_hi)."""
    if len(A) == 0:
        raise ValidationError("empty affine set")
    lo, hi = A.coeffs.min(axis=0), A.coeffs.max(axis=0)
    return lo[:-1], hi[:-1], float(lo[-1]), float(hi[-1])


@dataclass
class Extrema:
    """Reductions over the extreme affine set of (S, eps); independent of piece counts."""

    eps: float
    gmin: np.ndarray
    gmax: np.ndarray
    a_lo: np.ndarray
    a_hi: np.ndarray
    b_lo: float
    b_hi: float
    n_functions: int
    seconds: float = 0.0


def compute_extrema(S: DataSet, eps: float, chunk: int = 4096, workers: int = 1) -> Extrema:
    """Streaming pass over all subsets; nothing but running extrema is stored."""
    t0 = time.perf_counter()
    d = S.dim
    Lx = lifted(S.X)

    def reduce(item):
        _, F = item
        C = F.reshape(-1, d + 1)
        V = Lx @ C.T
        return V.min(axis=1), V.max(axis=1), C.min(axis=0), C.max(axis=0), C.shape[0]

    gmin = np.full(S.N, np.inf)
    gmax = np.full(S.N, -np.inf)
    clo = np.full(d + 1, np.inf)
    chi = np.full(d + 1, -np.inf)
    n = 0

    def fold(r):
        nonlocal gmin, gmax, clo, chi, n
        gmin = np.minimum(gmin, r[0])
        gmax = np.maximum(gmax, r[1])
        clo = np.minimum(clo, r[2])
        chi = np.maximum(chi, r[3])
        n += r[4]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            for r in pool.map(reduce, _iter_solutions(S, eps, chunk)):
                fold(r)
    else:
        for item in _iter_solutions(S, eps, chunk):
            fold(reduce(item))
    return Extrema(float(eps), gmin, gmax, clo[:-1], chi[:-1], float(clo[-1]), float(chi[-1]), n, time.perf_counter() - t0)


def compute_bigM(gmin, gmax, Pp: int, Pm: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-point (M_minus, M_plus): M_i^c = min(P^c - 1, P^(not c)) (gmax_i - gmin_i)."""
    if Pp < 1 or Pm < 1:
        raise ValidationError("piece counts must be at least 1")
    span = np.asarray(gmax, float) - np.asarray(gmin, float)
    return min(Pm - 1, Pp) * span, min(Pp - 1, Pm) * span


def pairwise_bigM(M) -> np.ndarray:
    """Symmetric table M_p + M_q; the diagonal is never used and is set to 0."""
    M = np.asarray(M, float)
    T = M[:, None] + M[None, :]
    np.fill_diagonal(T, 0.0)
    return T


@dataclass
class BoundsBundle:
    eps: float
    Pp: int
    Pm: int
    gmin: np.ndarray
    gmax: np.ndarray
    M_minus: np.ndarray
    M_plus: np.ndarray
    a_lo: np.ndarray
    a_hi: np.ndarray
    b_lo: float
    b_hi: float
    a_prime: np.ndarray
    b_prime: float
    n_functions: int = 0
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    KEYS = ("gmin", "gmax", "M_minus", "M_plus", "a_lo", "a_hi", "b_lo", "b_hi", "a_prime", "b_prime")

    def variable_bounds(self, z: np.ndarray, eps: float | None = None) -> dict[str, tuple]:
        """Lower/upper arrays per variable family, valid for well-behaved
        solutions in the normalised (first minus piece zero, sorted) form.

        a-bounds have shape (P, d); f-bounds have shape (N,)."""
        eps = self.eps if eps is None else eps
        z = np.asarray(z, float)
        am_lo = np.tile(-self.a_prime, (self.Pm, 1))
        am_lo[:, 0] = 0.0
        am_hi = np.tile(self.a_prime, (self.Pm, 1))
        ap_lo = np.tile(self.a_lo - self.a_prime, (self.Pp, 1))
        ap_lo[:, 0] = self.a_lo[0]
        ap_hi = np.tile(self.a_hi + self.a_prime, (self.Pp, 1))
        return {
            "f": (z - eps, z + eps),
            "fm": (np.zeros_like(z), self.M_minus.copy()),
            "fp": (z - eps, z + eps + self.M_minus),
            "am": (am_lo, am_hi),
            "ap": (ap_lo, ap_hi),
            "bm": (np.full(self.Pm, -self.b_prime), np.full(self.Pm, self.b_prime)),
            "bp": (np.full(self.Pp, self.b_lo - self.b_prime), np.full(self.Pp, self.b_hi + self.b_prime)),
        }

    def to_json(self) -> dict:
        out = {"eps": self.eps, "Pp": self.Pp, "Pm": self.Pm, "n_functions": self.n_functions, "seconds": self.seconds}
        for k in self.KEYS:
            v = getattr(self, k)
            out[k] = v.tolist() if isinstance(v, np.ndarray) else float(v)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "BoundsBundle":
        arr = {k: np.asarray(obj[k], float) for k in ("gmin", "gmax", "M_minus", "M_plus", "a_lo", "a_hi", "a_prime")}
        return cls(
            float(obj["eps"]), int(obj["Pp"]), int(obj["Pm"]),
            arr["gmin"], arr["gmax"], arr["M_minus"], arr["M_plus"], arr["a_lo"], arr["a_hi"],
            float(obj["b_lo"]), float(obj["b_hi"]), arr["a_prime"], float(obj["b_prime"]),
            int(obj.get("n_functions", 0)), float(obj.get("seconds", 0.0)),
        )


def derived_bounds(ext: Extrema, Pp: int, Pm: int) -> BoundsBundle:
    M_minus, M_plus = compute_bigM(ext.gmin, ext.gmax, Pp, Pm)
    w = min(Pm - 1, Pp)
    return BoundsBundle(
        ext.eps, Pp, Pm, ext.gmin, ext.gmax, M_minus, M_plus, ext.a_lo, ext.a_hi, ext.b_lo, ext.b_hi,
        w * (ext.a_hi - ext.a_lo), w * (ext.b_hi - ext.b_lo), ext.n_functions, ext.seconds,
    )


def cache_key(S: DataSet, eps: float) -> str:
    h = hashlib.sha256()
    h.update(S.dim.to_bytes(4, "little"))
    h.update(S.to_bytes())
    h.update(np.float64(eps).tobytes())
    return h.hexdigest()


def extrema_to_json(ext: Extrema) -> dict:
    return {
        "eps": ext.eps, "gmin": ext.gmin.tolist(), "gmax": ext.gmax.tolist(),
        "a_lo": ext.a_lo.tolist(), "a_hi": ext.a_hi.tolist(), "b_lo": ext.b_lo, "b_hi": ext.b_hi,
        "n_functions": ext.n_functions, "seconds": ext.seconds,
    }


def extrema_from_json(obj: dict) -> Extrema:
    return Extrema(
        float(obj["eps"]), np.asarray(obj["gmin"], float), np.asarray(obj["gmax"], float),
        np.asarray(obj["a_lo"], float), np.asarray(obj["a_hi"], float), float(obj["b_lo"]), float(obj["b_hi"]),
        int(obj["n_functions"]), float(obj.get("seconds", 0.0)),
    )


def compute_bounds(S: DataSet, eps: float, Pp: int, Pm: int, cache_dir: str | Path | None = None, workers: int = 1) -> BoundsBundle:
    """Bounds for (S, eps, Pp, Pm), reusing a cached extrema file when present."""
    if cache_dir is None:
        return derived_bounds(compute_extrema(S, eps, workers=workers), Pp, Pm)
    path = Path(cache_dir) / f"extrema-{cache_key(S, eps)}.json"
    if path.exists():
        ext = extrema_from_json(json.loads(path.read_text()))
    else:
        ext = compute_extrema(S, eps, workers=workers)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(extrema_to_json(ext)))
    return derived_bounds(ext, Pp, Pm)


def expected_function_count(N: int, d: int) -> int:
    return math.comb(N, d + 1) * 2 ** (d + 1)
