"""Difference-of-convex MILP for CPWL fitting, with optional tightening.

Variables per point i: f_i, fp_i, fm_i (values of f, f^+, f^- at x_i), the
error e_i and binaries del_p_i_j / del_m_i_k marking the active pieces.
Per piece: coefficients ap_j_r, bp_j (plus) and am_k_r, bm_k (minus).
All variable names use 1-based indices.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_CEILING, Decimal
from itertools import combinations
from typing import Literal

import numpy as np

from .cpwl import ACTIVITY_TOL, DCFunction, activity_map, normalize
from .dataset import DataSet, lifted, subset_chunks
from .errors import InconsistentSolutionError, ModelBuildError, ValidationError
from .preprocess import BoundsBundle, pairwise_bigM

INF = math.inf
SIGNS = ("p", "m")

ERROR_KINDS = ("MaxError", "MeanError")
PIECE_KINDS = ("PieceCountF", "PieceCountFplus", "PieceCountFminus")


@dataclass(frozen=True)
class FitParams:
    eps: float
    Pp: int
    Pm: int

    def __post_init__(self):
        if not self.eps >= 0:
            raise ValidationError("eps must be non-negative")
        if self.Pp < 1 or self.Pm < 1:
            raise ValidationError("Pp and Pm must be at least 1")


@dataclass(frozen=True)
class Objective:
    """``kind`` is an error or piece-count measure, or ``Hierarchical`` combining
    ``kind1`` (piece count, dominant) with ``kind2`` (error, weight 1/(2 eps))."""

    kind: str = "MaxError"
    kind1: str | None = None
    kind2: str | None = None

    def __post_init__(self):
        if self.kind == "Hierarchical":
            if self.kind1 not in PIECE_KINDS or self.kind2 not in ERROR_KINDS:
                raise ValidationError("Hierarchical needs kind1 in piece counts and kind2 in errors")
        elif self.kind not in ERROR_KINDS + PIECE_KINDS:
            raise ValidationError(f"unknown objective {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Objective":
        """``MaxError`` or ``Hierarchical:PieceCountF:MeanError``."""
        parts = text.split(":")
        if parts[0] == "Hierarchical":
            if len(parts) != 3:
                raise ValidationError("use Hierarchical:<piece kind>:<error kind>")
            return cls("Hierarchical", parts[1], parts[2])
        return cls(text)

    def __str__(self):
        return f"Hierarchical:{self.kind1}:{self.kind2}" if self.kind == "Hierarchical" else self.kind


@dataclass(frozen=True)
class TighteningConfig:
    fix_first_piece: bool = False
    sort_pieces: bool = False
    points_per_piece: Literal[None, "PerConvexPart", "PerF"] = None
    bigM_mode: Literal["Indicator", "Default", "Tight"] = "Tight"
    bound_variables: bool = False
    monotonicity_cuts: bool = False
    simplex_cuts: Literal[None, "PointInSimplex", "Both"] = None

    def __post_init__(self):
        if self.points_per_piece not in (None, "PerConvexPart", "PerF"):
            raise ValidationError(f"unknown points_per_piece {self.points_per_piece!r}")
        if self.bigM_mode not in ("Indicator", "Default", "Tight"):
            raise ValidationError(f"unknown bigM_mode {self.bigM_mode!r}")
        if self.simplex_cuts not in (None, "PointInSimplex", "Both"):
            raise ValidationError(f"unknown simplex_cuts {self.simplex_cuts!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TighteningConfig":
        return cls(**obj)

    def replace(self, **kw) -> "TighteningConfig":
        return TighteningConfig(**{**asdict(self), **kw})


_T = TighteningConfig
PRESETS: dict[str, TighteningConfig] = {
    "C1": _T(bigM_mode="Indicator"),
    "C2": _T(bigM_mode="Default"),
    "C3": _T(bigM_mode="Tight"),
    "C4": _T(fix_first_piece=True),
    "C5": _T(fix_first_piece=True, sort_pieces=True),
    "C6": _T(fix_first_piece=True, sort_pieces=True, bound_variables=True),
    "C7": _T(fix_first_piece=True, sort_pieces=True, points_per_piece="PerConvexPart", bound_variables=True),
    "C8": _T(fix_first_piece=True, sort_pieces=True, points_per_piece="PerF", bound_variables=True),
    "C9": _T(points_per_piece="PerConvexPart", bound_variables=True),
    "C10": _T(points_per_piece="PerF", bound_variables=True),
    "C11": _T(fix_first_piece=True, points_per_piece="PerConvexPart", bound_variables=True),
}


def preset(cid: str) -> TighteningConfig:
    try:
        return PRESETS[cid.upper()]
    except KeyError:
        raise ValidationError(f"unknown preset {cid!r}; choose from C1..C11") from None


def default_bigM(*M_tight) -> float:
    """Largest tight value rounded up to one significant digit (632.8 -> 700)."""
    m = max((float(np.max(v)) for v in M_tight if np.size(v)), default=0.0)
    if m <= 0:
        return 0.0
    x = Decimal(repr(m))
    unit = Decimal(1).scaleb(x.adjusted())
    return float((x / unit).to_integral_value(rounding=ROUND_CEILING) * unit)


@dataclass
class Variable:
    name: str
    lb: float
    ub: float
    binary: bool = False


@dataclass
class Row:
    name: str
    idx: tuple[int, ...]
    coef: tuple[float, ...]
    sense: str  # "<=", ">=", "="
    rhs: float
    family: str


@dataclass
class IndicatorRow:
    name: str
    binvar: int
    value: int
    row: Row


@dataclass
class ModelIR:
    name: str
    variables: list[Variable] = field(default_factory=list)
    rows: list[Row] = field(default_factory=list)
    indicators: list[IndicatorRow] = field(default_factory=list)
    objective: dict[int, float] = field(default_factory=dict)
    catalog: dict[str, np.ndarray] = field(default_factory=dict)
    bound_records: list[tuple[str, str]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def var_index(self) -> dict[str, int]:
        return {v.name: i for i, v in enumerate(self.variables)}

    @property
    def n_binaries(self) -> int:
        return sum(v.binary for v in self.variables)

    def rows_by_family(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.rows:
            out[r.family] = out.get(r.family, 0) + 1
        for ind in self.indicators:
            out[ind.row.family] = out.get(ind.row.family, 0) + 1
        return out

    def bounds_by_strategy(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s, _ in self.bound_records:
            out[s] = out.get(s, 0) + 1
        return out

    def objective_value(self, values: dict[str, float]) -> float:
        return float(sum(c * values.get(self.variables[i].name, 0.0) for i, c in self.objective.items()))

    def to_json(self) -> str:
        """Canonical debug dump; byte-identical for identical models."""

        def num(x):
            return repr(float(x))

        def row(r: Row):
            return {"name": r.name, "terms": [[self.variables[i].name, num(c)] for i, c in zip(r.idx, r.coef)],
                    "sense": r.sense, "rhs": num(r.rhs), "family": r.family}

        doc = {
            "name": self.name,
            "variables": [[v.name, num(v.lb), num(v.ub), v.binary] for v in self.variables],
            "rows": [row(r) for r in self.rows],
            "indicators": [{"name": d.name, "binvar": self.variables[d.binvar].name, "value": d.value, "row": row(d.row)}
                           for d in self.indicators],
            "objective": [[self.variables[i].name, num(c)] for i, c in sorted(self.objective.items())],
            "catalog": {k: np.vectorize(lambda i: self.variables[i].name, otypes=[object])(v).tolist()
                        for k, v in sorted(self.catalog.items())},
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


class _Builder:
    def __init__(self, name: str):
        self.m = ModelIR(name)

    def var(self, name, lb=-INF, ub=INF, binary=False) -> int:
        self.m.variables.append(Variable(name, float(lb), float(ub), binary))
        return len(self.m.variables) - 1

    def vars(self, prefix, shape, lb=-INF, ub=INF, binary=False) -> np.ndarray:
        out = np.empty(shape, dtype=np.int64)
        for pos in np.ndindex(*shape):
            out[pos] = self.var("_".join([prefix, *(str(p + 1) for p in pos)]), lb, ub, binary)
        return out

    def row(self, name, terms, sense, rhs, family) -> None:
        idx, coef = [], []
        for i, c in terms:
            if c != 0.0:
                idx.append(int(i))
                coef.append(float(c))
        self.m.rows.append(Row(name, tuple(idx), tuple(coef), sense, float(rhs), family))

    def bound(self, i: int, lb: float, ub: float, strategy: str) -> None:
        v = self.m.variables[i]
        v.lb, v.ub = max(v.lb, float(lb)), min(v.ub, float(ub))
        if v.lb > v.ub:
            raise ModelBuildError(f"empty bound interval for {v.name}: [{v.lb}, {v.ub}]")
        self.m.bound_records.append((strategy, v.name))


def _affine_terms(a_idx: np.ndarray, b_idx: int, x: np.ndarray, sign: float = 1.0):
    return [(a_idx[r], sign * x[r]) for r in range(len(x))] + [(b_idx, sign)]


def build(
    S: DataSet,
    params: FitParams,
    obj: Objective = Objective(),
    cfg: TighteningConfig = TighteningConfig(),
    bounds: BoundsBundle | None = None,
    supports_indicators: bool = True,
    bigM_override: float | None = None,
    simplex_budget: int = 50_000,
    perf_cap: int = 2_000_000,
) -> ModelIR:
    """Assemble the MILP. ``bounds`` is required for Tight/Default big-M (unless
    ``bigM_override`` is given), for variable bounds and for monotonicity cuts."""
    N, d = S.N, S.dim
    Pp, Pm, eps = params.Pp, params.Pm, params.eps
    P = {"p": Pp, "m": Pm}
    X, z = S.X, S.z
    if N < d + 1:
        raise ModelBuildError(f"need at least d+1={d + 1} points")
    if cfg.bigM_mode == "Indicator" and not supports_indicators:
        raise ModelBuildError("indicator constraints requested but the target backend does not support them")
    needs_bounds = (cfg.bigM_mode == "Tight" or cfg.bound_variables or cfg.monotonicity_cuts
                    or (cfg.bigM_mode == "Default" and bigM_override is None))
    if needs_bounds and bounds is None:
        raise ModelBuildError("this configuration needs preprocessed bounds (BoundsBundle)")
    if bounds is not None and (bounds.Pp, bounds.Pm) != (Pp, Pm):
        raise ModelBuildError(f"bounds computed for P=({bounds.Pp},{bounds.Pm}), model uses ({Pp},{Pm})")
    if bounds is not None and bounds.gmin.shape[0] != N:
        raise ModelBuildError("bounds were computed for a different data set")
    if obj.kind == "Hierarchical" and eps <= 0:
        raise ModelBuildError("hierarchical objective needs eps > 0 (weight 1/(2 eps))")
    need_pairs = cfg.points_per_piece == "PerF" or obj.kind in ("PieceCountF", "PieceCountFplus", "PieceCountFminus") or obj.kind1 is not None
    if need_pairs and N * Pp * Pm > perf_cap:
        raise ModelBuildError(f"N*Pp*Pm = {N * Pp * Pm} exceeds the cap {perf_cap}; use PerConvexPart instead")

    B = _Builder(f"cpwl_{S.name}_N{N}_d{d}_P{Pp}_{Pm}")
    cat = B.m.catalog
    cat["f"] = B.vars("f", (N,))
    cat["fp"] = B.vars("fp", (N,))
    cat["fm"] = B.vars("fm", (N,))
    cat["ap"] = B.vars("ap", (Pp, d))
    cat["bp"] = B.vars("bp", (Pp,))
    cat["am"] = B.vars("am", (Pm, d))
    cat["bm"] = B.vars("bm", (Pm,))
    cat["e"] = B.vars("e", (N,), 0.0, eps)
    cat["del_p"] = B.vars("del_p", (N, Pp), 0, 1, binary=True)
    cat["del_m"] = B.vars("del_m", (N, Pm), 0, 1, binary=True)
    fc = {"p": cat["fp"], "m": cat["fm"]}
    A = {"p": cat["ap"], "m": cat["am"]}
    Bv = {"p": cat["bp"], "m": cat["bm"]}
    D = {"p": cat["del_p"], "m": cat["del_m"]}

    if cfg.bigM_mode == "Tight":
        Mi = {"p": bounds.M_plus, "m": bounds.M_minus}
    elif cfg.bigM_mode == "Default":
        Mdef = bigM_override if bigM_override is not None else default_bigM(bounds.M_plus, bounds.M_minus)
        Mi = {c: np.full(N, float(Mdef)) for c in SIGNS}
        B.m.meta["default_bigM"] = float(Mdef)

    for i in range(N):
        B.row(f"dc_{i + 1}", [(cat["f"][i], 1.0), (cat["fp"][i], -1.0), (cat["fm"][i], 1.0)], "=", 0.0, "dc")
    for c in SIGNS:
        for i in range(N):
            for j in range(P[c]):
                terms = [(fc[c][i], 1.0)] + _affine_terms(A[c][j], Bv[c][j], X[i], -1.0)
                B.row(f"cvx0_{c}_{i + 1}_{j + 1}", terms, ">=", 0.0, "cvx0")
                if cfg.bigM_mode == "Indicator":
                    r = Row(f"ind_{c}_{i + 1}_{j + 1}", tuple(t[0] for t in terms), tuple(float(t[1]) for t in terms), "<=", 0.0, "cvx")
                    B.m.indicators.append(IndicatorRow(r.name, int(D[c][i, j]), 1, r))
                else:
                    M = float(Mi[c][i])
                    B.row(f"cvx_{c}_{i + 1}_{j + 1}", terms + [(D[c][i, j], M)], "<=", M, "cvx")
    for c in SIGNS:
        for i in range(N):
            B.row(f"cover_{c}_{i + 1}", [(D[c][i, j], 1.0) for j in range(P[c])], ">=", 1.0, "cover")
    for i in range(N):
        B.row(f"fitlo_{i + 1}", [(cat["f"][i], 1.0), (cat["e"][i], 1.0)], ">=", z[i], "fit")
        B.row(f"fithi_{i + 1}", [(cat["f"][i], 1.0), (cat["e"][i], -1.0)], "<=", z[i], "fit")

    if need_pairs:
        cat["beta"] = B.vars("beta", (N, Pp, Pm), 0.0, 1.0)
        cat["gam"] = B.vars("gam", (Pp, Pm), 0.0, 1.0)
        beta, gam = cat["beta"], cat["gam"]
        for i in range(N):
            for j in range(Pp):
                for k in range(Pm):
                    b_, s = beta[i, j, k], f"{i + 1}_{j + 1}_{k + 1}"
                    B.row(f"bdp_{s}", [(b_, 1.0), (D["p"][i, j], -1.0)], "<=", 0.0, "perf")
                    B.row(f"bdm_{s}", [(b_, 1.0), (D["m"][i, k], -1.0)], "<=", 0.0, "perf")
                    B.row(f"bdd_{s}", [(b_, 1.0), (D["p"][i, j], -1.0), (D["m"][i, k], -1.0)], ">=", -1.0, "perf")
                    B.row(f"bg_{s}", [(b_, 1.0), (gam[j, k], -1.0)], "<=", 0.0, "perf")
        if cfg.points_per_piece == "PerF":
            for j in range(Pp):
                for k in range(Pm):
                    B.row(f"bsum_{j + 1}_{k + 1}", [(beta[i, j, k], 1.0) for i in range(N)] + [(gam[j, k], -(d + 1.0))],
                          ">=", 0.0, "perf")

    _objective(B, obj, params, N)
    B.m.meta["objective"] = str(obj)

    if cfg.fix_first_piece:
        for r in range(d):
            B.bound(cat["am"][0, r], 0.0, 0.0, "fix")
        B.bound(cat["bm"][0], 0.0, 0.0, "fix")
    if cfg.sort_pieces:
        for c in SIGNS:
            for j in range(P[c] - 1):
                B.row(f"sort_{c}_{j + 1}", [(A[c][j, 0], 1.0), (A[c][j + 1, 0], -1.0)], "<=", 0.0, "sort")
    if cfg.points_per_piece == "PerConvexPart":
        for c in SIGNS:
            for j in range(P[c]):
                B.row(f"ppp_{c}_{j + 1}", [(D[c][i, j], 1.0) for i in range(N)], ">=", d + 1.0, "ppp")
    if cfg.bound_variables:
        vb = bounds.variable_bounds(z, eps)
        for fam in ("f", "fm", "fp"):
            lo, hi = vb[fam]
            for i in range(N):
                B.bound(cat[fam][i], lo[i], hi[i], "bounds")
        for fam in ("am", "ap"):
            lo, hi = vb[fam]
            for pos in np.ndindex(*cat[fam].shape):
                B.bound(cat[fam][pos], lo[pos], hi[pos], "bounds")
        for fam in ("bm", "bp"):
            lo, hi = vb[fam]
            for j in range(cat[fam].shape[0]):
                B.bound(cat[fam][j], lo[j], hi[j], "bounds")
    if cfg.monotonicity_cuts:
        _monotonicity_cuts(B, X, {"p": bounds.M_plus, "m": bounds.M_minus}, A, D, P)
    if cfg.simplex_cuts is not None:
        _simplex_cuts(B, X, D, P, cfg.simplex_cuts == "Both", simplex_budget)
    return B.m


def _objective(B: _Builder, obj: Objective, params: FitParams, N: int) -> None:
    cat = B.m.catalog

    def error_term(kind: str, name: str) -> int:
        q = B.var(name, 0.0, INF)
        if kind == "MaxError":
            for i in range(N):
                B.row(f"qmax_{i + 1}", [(q, 1.0), (cat["e"][i], -1.0)], ">=", 0.0, "obj")
        else:
            B.row("qmean", [(q, float(N))] + [(cat["e"][i], -1.0) for i in range(N)], "=", 0.0, "obj")
        return q

    def piece_term(kind: str, name: str) -> int:
        q = B.var(name, 0.0, INF)
        gam = cat["gam"]
        Pp, Pm = gam.shape
        if kind == "PieceCountF":
            B.row("qpieces", [(q, 1.0)] + [(gam[j, k], -1.0) for j in range(Pp) for k in range(Pm)], "=", 0.0, "obj")
            return q
        c = "p" if kind == "PieceCountFplus" else "m"
        n = Pp if c == "p" else Pm
        alpha = B.vars(f"alp_{c}", (n,), 0.0, 1.0)
        cat[f"alp_{c}"] = alpha
        for j in range(Pp):
            for k in range(Pm):
                a_ = alpha[j] if c == "p" else alpha[k]
                B.row(f"alp_{c}_{j + 1}_{k + 1}", [(a_, 1.0), (gam[j, k], -1.0)], ">=", 0.0, "obj")
        B.row("qpieces", [(q, 1.0)] + [(alpha[j], -1.0) for j in range(n)], "=", 0.0, "obj")
        return q

    if obj.kind in ERROR_KINDS:
        q = error_term(obj.kind, "Q")
        cat["Q"] = np.array([q])
        B.m.objective = {q: 1.0}
    elif obj.kind in PIECE_KINDS:
        q = piece_term(obj.kind, "Q")
        cat["Q"] = np.array([q])
        B.m.objective = {q: 1.0}
    else:
        q1 = piece_term(obj.kind1, "Q1")
        q2 = error_term(obj.kind2, "Q2")
        cat["Q1"], cat["Q2"] = np.array([q1]), np.array([q2])
        B.m.objective = {q1: 1.0, q2: 1.0 / (2.0 * params.eps)}


def monotonicity_count(N: int, Pp: int, Pm: int) -> int:
    return N * (N - 1) * (Pp * (Pp - 1) // 2 + Pm * (Pm - 1) // 2)


def _monotonicity_cuts(B: _Builder, X, M, A, D, P) -> None:
    N = X.shape[0]
    for c in SIGNS:
        Mpq = pairwise_bigM(M[c])
        for p in range(N):
            for q in range(N):
                if p == q:
                    continue
                dx = X[p] - X[q]
                m = float(Mpq[p, q])
                for j, k in combinations(range(P[c]), 2):
                    terms = [(A[c][j, r], dx[r]) for r in range(len(dx))] + [(A[c][k, r], -dx[r]) for r in range(len(dx))]
                    terms += [(D[c][p, j], -m), (D[c][q, k], -m)]
                    B.row(f"mono_{c}_{p + 1}_{q + 1}_{j + 1}_{k + 1}", terms, ">=", -2.0 * m, "mono")


# Margin keeping numerically borderline configurations out of the cut set.
GEOM_MARGIN = 1e-9


def points_in_simplices(X: np.ndarray, margin: float = GEOM_MARGIN):
    """Yield (simplex, q) for every (d+1)-subset and every other point q lying in
    the simplex with all barycentric coordinates >= margin; lexicographic order."""
    N, d = X.shape
    L = lifted(X)
    for idx in subset_chunks(N, d + 1, 2048):
        lam = np.linalg.solve(np.swapaxes(L[idx], 1, 2), np.broadcast_to(L.T, (len(idx), d + 1, N)))
        inside = np.all(lam >= margin, axis=1)
        inside[np.arange(len(idx))[:, None], idx] = False
        for s, q in zip(*np.nonzero(inside)):
            yield tuple(int(v) for v in idx[s]), int(q)


def segments_crossing_facets(X: np.ndarray, margin: float = GEOM_MARGIN):
    """Yield (facet, q1, q2) for d-subsets and point pairs q1 < q2 off the facet whose
    segment crosses the facet's relative interior transversally; lexicographic."""
    N, d = X.shape
    L = lifted(X)
    for facet in combinations(range(N), d):
        V = X[list(facet)]
        # normal of the hyperplane through the facet
        if d == 1:
            nvec = np.ones(1)
        else:
            E = V[1:] - V[0]
            nvec = np.linalg.svd(E)[2][-1]
        s = (X - V[0]) @ nvec
        s[list(facet)] = 0.0
        tol = margin * max(1.0, np.abs(X).max())
        rest = [q for q in range(N) if q not in facet]
        # barycentric coordinates in the simplex facet + (v_1 + n)
        T = np.vstack([np.column_stack([V, np.ones(d)]), np.append(V[0] + nvec, 1.0)]).T
        for a_pos, q1 in enumerate(rest):
            if abs(s[q1]) <= tol:
                continue
            q2s = np.array([q for q in rest[a_pos + 1:] if s[q] * s[q1] < 0 and abs(s[q]) > tol], dtype=int)
            if q2s.size == 0:
                continue
            t = s[q1] / (s[q1] - s[q2s])
            Y = X[q1] + t[:, None] * (X[q2s] - X[q1])
            lam = np.linalg.solve(T, np.column_stack([Y, np.ones(len(q2s))]).T)
            ok = np.all(lam[:d] >= margin, axis=0) & (t > margin) & (t < 1 - margin)
            for q2 in q2s[ok]:
                yield facet, q1, int(q2)


def _simplex_cuts(B: _Builder, X, D, P, both: bool, budget: int) -> None:
    N, d = X.shape
    used = 0
    n13 = n14 = 0
    truncated = False
    per13 = P["p"] + P["m"]
    for simplex, q in points_in_simplices(X):
        if used + per13 > budget:
            truncated = True
            break
        tag = "_".join(str(v + 1) for v in simplex)
        for c in SIGNS:
            for j in range(P[c]):
                terms = [(D[c][p, j], 1.0) for p in simplex] + [(D[c][q, j], -1.0)]
                B.row(f"smp13_{c}_{tag}_{q + 1}_{j + 1}", terms, "<=", float(d), "simplex13")
        used += per13
        n13 += 1
    per14 = P["p"] * (P["p"] - 1) + P["m"] * (P["m"] - 1)
    if both and not truncated and per14 > 0:
        for facet, q1, q2 in segments_crossing_facets(X):
            if used + per14 > budget:
                truncated = True
                break
            tag = "_".join(str(v + 1) for v in facet)
            for c in SIGNS:
                for j in range(P[c]):
                    for k in range(P[c]):
                        if j == k:
                            continue
                        terms = [(D[c][p, j], 1.0) for p in facet] + [(D[c][q1, k], 1.0), (D[c][q2, k], 1.0)]
                        B.row(f"smp14_{c}_{tag}_{q1 + 1}_{q2 + 1}_{j + 1}_{k + 1}", terms, "<=", d + 1.0, "simplex14")
            used += per14
            n14 += 1
    B.m.meta.update(simplex13_configs=n13, simplex14_configs=n14, simplex_truncated=truncated)


def simplex_cut_limits(N: int, d: int, Pp: int, Pm: int) -> tuple[int, int]:
    """Upper bounds on the numbers of point-in-simplex and segment-crossing rows."""
    c = math.comb(N, d + 2)
    return c * (d + 2) * (Pp + Pm), c * (d + 1) * (d + 2) * (Pp * (Pp - 1) + Pm * (Pm - 1)) // 2


# ---------------------------------------------------------------------------
# solutions


@dataclass
class Solution:
    f: DCFunction
    delta_p: np.ndarray
    delta_m: np.ndarray
    values: dict[str, np.ndarray]
    worst_violation: float


def _gather(values: dict[str, float], m: ModelIR, key: str) -> np.ndarray:
    names = m.catalog[key]
    return np.vectorize(lambda i: float(values.get(m.variables[i].name, 0.0)), otypes=[float])(names)


def extract_solution(values: dict[str, float], m: ModelIR, S: DataSet, tol: float = 1e-6) -> Solution:
    """DC function from coefficient values, binaries rounded at 0.5, and a check
    that every rounded-active piece attains its part's value within ``tol``."""
    vals = {k: _gather(values, m, k) for k in m.catalog}
    f = DCFunction.from_arrays(vals["ap"], vals["bp"], vals["am"], vals["bm"])
    worst = 0.0
    where = None
    rounded = {}
    for c, part in (("p", f.plus), ("m", f.minus)):
        dl = (vals[f"del_{c}"] >= 0.5).astype(int)
        rounded[c] = dl
        fc = vals[f"f{c}"]
        gap = fc[:, None] - part.piece_values(S.X)
        # lower side holds for all pieces, upper side only for active ones
        low = np.maximum(-gap, 0.0)
        up = np.where(dl == 1, np.maximum(gap, 0.0), 0.0)
        for arr in (low, up):
            if arr.size and arr.max() > worst:
                worst = float(arr.max())
                where = (c, *np.unravel_index(int(arr.argmax()), arr.shape))
        if np.any(dl.sum(axis=1) < 1):
            i = int(np.argmin(dl.sum(axis=1)))
            raise InconsistentSolutionError(f"point {i + 1} has no active {c} piece after rounding", INF)
    if worst > tol:
        c, i, j = where
        raise InconsistentSolutionError(f"incumbent violates piece activity at point {i + 1}, {c} piece {j + 1} by {worst:.3g}", worst)
    return Solution(f, rounded["p"], rounded["m"], vals, worst)


def assignment_from_dc(f: DCFunction, S: DataSet, m: ModelIR, cfg: TighteningConfig, tol: float = 1e-9) -> dict[str, float]:
    """Natural variable values of a DC function for model ``m``.

    The function is first normalised (sorted pieces, first minus piece zero)
    when fix, sort or bound strategies are active."""
    if cfg.fix_first_piece or cfg.sort_pieces or cfg.bound_variables:
        f = normalize(f)
    act = activity_map(f, S, tol)
    N = S.N
    Pp, Pm = f.Pp, f.Pm
    dp = np.zeros((N, Pp))
    dm = np.zeros((N, Pm))
    for i in range(N):
        dp[i, list(act.J[i])] = 1
        dm[i, list(act.K[i])] = 1
    fp, fm = f.plus(S.X), f.minus(S.X)
    fx = fp - fm
    e = np.abs(fx - S.z)
    arrays = {"f": fx, "fp": fp, "fm": fm, "ap": f.plus.A, "bp": f.plus.b, "am": f.minus.A, "bm": f.minus.b,
              "e": e, "del_p": dp, "del_m": dm}
    if "beta" in m.catalog:
        beta = dp[:, :, None] * dm[:, None, :]
        arrays["beta"] = beta
        arrays["gam"] = beta.max(axis=0)
        if "alp_p" in m.catalog:
            arrays["alp_p"] = arrays["gam"].max(axis=1)
        if "alp_m" in m.catalog:
            arrays["alp_m"] = arrays["gam"].max(axis=0)
    out = {}
    for key, arr in arrays.items():
        for pos in np.ndindex(*m.catalog[key].shape):
            out[m.variables[m.catalog[key][pos]].name] = float(arr[pos])
    measure = {"MaxError": float(e.max()), "MeanError": float(e.mean()),
               "PieceCountF": float(arrays["gam"].sum()) if "gam" in arrays else 0.0,
               "PieceCountFplus": float(arrays["alp_p"].sum()) if "alp_p" in arrays else 0.0,
               "PieceCountFminus": float(arrays["alp_m"].sum()) if "alp_m" in arrays else 0.0}
    obj = Objective.parse(m.meta["objective"])
    if obj.kind == "Hierarchical":
        out["Q1"], out["Q2"] = measure[obj.kind1], measure[obj.kind2]
    else:
        out["Q"] = measure[obj.kind]
    return out


def check_feasible(m: ModelIR, values: dict[str, float], tol: float = 1e-7) -> list[tuple[str, float]]:
    """Violations (name, amount) of bounds, integrality, rows and indicators."""
    x = np.array([values.get(v.name, 0.0) for v in m.variables])
    out = []
    for v, xv in zip(m.variables, x):
        viol = max(v.lb - xv, xv - v.ub, 0.0)
        if v.binary:
            viol = max(viol, abs(xv - round(xv)))
        if viol > tol:
            out.append((v.name, float(viol)))

    def row_viol(r: Row) -> float:
        lhs = float(np.dot(x[list(r.idx)], r.coef)) if r.idx else 0.0
        if r.sense == "<=":
            return max(lhs - r.rhs, 0.0)
        if r.sense == ">=":
            return max(r.rhs - lhs, 0.0)
        return abs(lhs - r.rhs)

    for r in m.rows:
        v = row_viol(r)
        if v > tol:
            out.append((r.name, v))
    for ind in m.indicators:
        if round(x[ind.binvar]) == ind.value:
            v = row_viol(ind.row)
            if v > tol:
                out.append((ind.name, v))
    return out
