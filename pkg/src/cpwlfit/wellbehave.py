"""Turn a CPWL eps-approximation into an equivalent well-behaved one.

A piece f_{j,k} = f_j^+ - f_k^- of f is underdetermined when it passes through
fewer than d+1 of the targets t_i = f(x_i). Neighbouring data points bound
the piece on one side: where f_j^+ is not active but f_k^- is, f_{j,k}(x_i) <= t_i;
where f_k^- is not active but f_j^+ is, f_{j,k}(x_i) >= t_i. Tilting the piece
inside that polyhedron until more constraints are tight adds interpolated
points without moving f at any data point.

The global transform works on the full DC parameter vector so that the edit is
always expressible with the existing plus/minus pieces: every constraint that
is currently tight stays frozen, and one LP per step activates one more row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .cpwl import ACTIVITY_TOL, AffinePiece, DCFunction, activity_map, check_well_behaved, verify_eps_approx
from .dataset import DataSet, lifted
from .errors import TransformError

log = logging.getLogger(__name__)

LP_TOL = 1e-9


@dataclass
class PieceAssignment:
    """Pair graph of a DC function at the data points."""

    pairs: list[tuple[int, int]]
    pieces: dict[tuple[int, int], AffinePiece]
    interpolated: dict[tuple[int, int], tuple[int, ...]]
    # neighbour points of each pair with their sign c: c (f_{j,k}(x_i) - t_i) <= 0
    neighbors: dict[tuple[int, int], tuple[tuple[int, int], ...]]
    edges: list[tuple[tuple[int, int], tuple[int, int], int]]
    targets: np.ndarray
    X: np.ndarray


def derive_assignment(f: DCFunction, S: DataSet, tol: float = ACTIVITY_TOL) -> PieceAssignment:
    act = activity_map(f, S, tol)
    for i, (Ji, Ki) in enumerate(zip(act.J, act.K)):
        if not Ji or not Ki:
            raise TransformError(f"no active piece at point {i} (non-finite values?)")
    t = f(S.X)
    pairs = act.pairs()
    pieces = {p: f.pair(*p) for p in pairs}
    L = lifted(S.X)
    interp, neigh = {}, {}
    for j, k in pairs:
        v = L @ np.append(pieces[j, k].a, pieces[j, k].b)
        interp[j, k] = tuple(int(i) for i in np.flatnonzero(np.abs(v - t) <= tol))
        nb = []
        for i, (Ji, Ki) in enumerate(zip(act.J, act.K)):
            if k in Ki and j not in Ji:
                nb.append((i, 1))
            elif j in Ji and k not in Ki:
                nb.append((i, -1))
        neigh[j, k] = tuple(nb)
    edges = []
    for x, p in enumerate(pairs):
        for q in pairs[x + 1:]:
            if p[1] == q[1] and p[0] != q[0]:
                edges.append((p, q, 1))
            elif p[0] == q[0] and p[1] != q[1]:
                edges.append((p, q, -1))
    return PieceAssignment(pairs, pieces, interp, neigh, edges, t, S.X)


@dataclass
class TiltResult:
    piece: AffinePiece
    active_count: int
    new_points: tuple[int, ...]
    residual: float = 0.0


def _min_slack(A_eq, b_eq, A_ub, b_ub, c):
    n = len(c)
    res = linprog(c, A_ub=A_ub if len(A_ub) else None, b_ub=b_ub if len(b_ub) else None,
                  A_eq=A_eq if len(A_eq) else None, b_eq=b_eq if len(b_eq) else None,
                  bounds=[(None, None)] * n, method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    return res


def _project(theta, E, r):
    """Closest point to theta on {E theta = r}."""
    if len(E) == 0:
        return theta
    delta, *_ = np.linalg.lstsq(E, E @ theta - r, rcond=None)
    return theta - delta


def tilt_piece(assign: PieceAssignment, pair: tuple[int, int], targets=None, tol: float = 1e-9) -> TiltResult:
    """Tilt one piece inside its neighbour polyhedron U until min(d+1, n+m)
    constraints are active, keeping its n interpolated points."""
    t = assign.targets if targets is None else np.asarray(targets, float)
    L = lifted(assign.X)
    d = assign.X.shape[1]
    p0 = assign.pieces[pair]
    theta = np.append(p0.a, p0.b)
    active = list(assign.interpolated[pair])
    nb = list(assign.neighbors[pair])
    # rows of U as  c * (L_i theta - t_i) <= 0
    G = np.array([c * L[i] for i, c in nb]).reshape(-1, d + 1)
    h = np.array([c * t[i] for i, c in nb])
    tight = [q for q in range(len(nb)) if abs(G[q] @ theta - h[q]) <= tol]
    target = min(d + 1, len(active) + len(nb))

    def rank():
        rows = [L[i] for i in active] + [G[q] for q in tight]
        return np.linalg.matrix_rank(np.array(rows)) if rows else 0

    while rank() < target:
        E = np.array([L[i] for i in active] + [G[q] for q in tight]).reshape(-1, d + 1)
        r = np.array([t[i] for i in active] + [h[q] for q in tight])
        free = [q for q in range(len(nb)) if q not in tight]
        free.sort(key=lambda q: (h[q] - G[q] @ theta, nb[q][0]))
        moved = False
        for q in free:
            res = _min_slack(E, r, G, h, -G[q])
            if res.status != 0:
                continue
            if h[q] - G[q] @ res.x <= 1e-9:
                cand = res.x
                now = [s for s in range(len(nb)) if abs(G[s] @ cand - h[s]) <= 1e-9]
                E2 = np.array([L[i] for i in active] + [G[s] for s in now])
                r2 = np.array([t[i] for i in active] + [h[s] for s in now])
                theta = _project(cand, E2, r2)
                tight = sorted(set(tight) | set(now))
                moved = True
                break
        if not moved:
            break
    viol = float(np.max(G @ theta - h, initial=0.0))
    eq_res = float(np.max(np.abs(L[active] @ theta - t[active]), initial=0.0))
    new = tuple(sorted(nb[q][0] for q in tight if nb[q][0] not in assign.interpolated[pair]))
    return TiltResult(AffinePiece(theta[:-1], theta[-1]), int(rank()), new, max(viol, eq_res))


# ---------------------------------------------------------------------------
# global transform on the DC parameter vector


class _Params:
    """theta = [A^+ | b^+ rows, A^- | b^- rows] flattened; helpers build linear forms."""

    def __init__(self, f: DCFunction, X: np.ndarray):
        self.d = f.dim
        self.Pp, self.Pm = f.Pp, f.Pm
        self.L = lifted(X)
        self.theta = np.concatenate([np.column_stack([f.plus.A, f.plus.b]).ravel(),
                                     np.column_stack([f.minus.A, f.minus.b]).ravel()])

    @property
    def n(self):
        return (self.Pp + self.Pm) * (self.d + 1)

    def piece(self, c: str, j: int, i: int) -> np.ndarray:
        """Row r with r . theta = f_j^c(x_i)."""
        row = np.zeros(self.n)
        off = (j if c == "p" else self.Pp + j) * (self.d + 1)
        row[off:off + self.d + 1] = self.L[i]
        return row

    def function(self, theta) -> DCFunction:
        W = theta.reshape(-1, self.d + 1)
        P, M = W[: self.Pp], W[self.Pp:]
        return DCFunction.from_arrays(P[:, :-1], P[:, -1], M[:, :-1], M[:, -1])


@dataclass
class TransformReport:
    well_behaved: bool
    steps: int
    max_deviation: float
    underdetermined: list[tuple[int, int]] = field(default_factory=list)
    # pairs at which the tilt walk stalled (coupling through shared pieces)
    stuck_pairs: list[tuple[int, int]] = field(default_factory=list)
    method: str = "tilt"
    pieces: tuple[int, int] = (0, 0)


def _system(par: _Params, f: DCFunction, t: np.ndarray, tol: float):
    """Frozen equalities and the max-structure inequalities of the current function."""
    N = len(t)
    act = activity_map(f, _DS(par.L[:, :-1], t), tol)
    eq_rows, eq_rhs, ub_rows = [], [], []
    Vp, Vm = f.plus.piece_values(par.L[:, :-1]), f.minus.piece_values(par.L[:, :-1])
    pairs = act.pairs()
    for j, k in pairs:
        for i in np.flatnonzero(np.abs(Vp[:, j] - Vm[:, k] - t) <= tol):
            eq_rows.append(par.piece("p", j, i) - par.piece("m", k, i))
            eq_rhs.append(t[i])
    reps = []
    for i in range(N):
        jr, kr = min(act.J[i]), min(act.K[i])
        reps.append((jr, kr))
        for j in range(par.Pp):
            if j not in act.J[i]:
                ub_rows.append(("p", i, j, par.piece("p", j, i) - par.piece("p", jr, i)))
        for k in range(par.Pm):
            if k not in act.K[i]:
                ub_rows.append(("m", i, k, par.piece("m", k, i) - par.piece("m", kr, i)))
    # pin pieces that are active nowhere, and the first minus piece (common shift)
    used_p = set().union(*act.J)
    used_m = set().union(*act.K)
    pins = [("m", 0)] + [("p", j) for j in range(par.Pp) if j not in used_p] + [("m", k) for k in range(1, par.Pm) if k not in used_m]
    for c, j in pins:
        off = (j if c == "p" else par.Pp + j) * (par.d + 1)
        for r in range(par.d + 1):
            row = np.zeros(par.n)
            row[off + r] = 1.0
            eq_rows.append(row)
            eq_rhs.append(par.theta[off + r])
    return act, np.array(eq_rows), np.array(eq_rhs), ub_rows


@dataclass
class _DS:
    X: np.ndarray
    z: np.ndarray


def _snap(f: DCFunction, S: DataSet, t: np.ndarray, tol: float) -> DCFunction:
    """Make every near-tie and near-interpolation exact against targets t."""
    par = _Params(f, S.X)
    _, E, r, _ = _system(par, f, t, tol)
    return par.function(_project(par.theta, E, r))


def _walk(g: DCFunction, S: DataSet, t: np.ndarray, tol: float, max_steps: int):
    par = _Params(g, S.X)
    steps = 0
    stuck: set[tuple[int, int]] = set()
    while steps < max_steps:
        wb = check_well_behaved(g, S, tol)
        todo = [p for p in sorted(wb.underdetermined, key=lambda p: (wb.counts[p], p)) if p not in stuck]
        if not todo:
            break
        moved = _advance(par, g, t, tol, todo[0], S)
        if moved is None:
            stuck.add(todo[0])
            continue
        par.theta = moved
        g = par.function(par.theta)
        stuck.clear()
        steps += 1
    return g, steps, sorted(stuck)


def _repair(g: DCFunction, S: DataSet, t: np.ndarray, tol: float, spec, keep_activity: bool, Pp: int, Pm: int,
            margin: float = 1e-3):
    """Interpolation MILP on (x_i, t_i) with PerF rows and Pp/Pm pieces,
    optionally forcing every currently active DC piece to stay active.
    Unselected pieces are kept ``margin`` below the max so that geometric
    activity agrees with the binaries. None if infeasible."""
    from .model import FitParams, Objective, Row, TighteningConfig, build, extract_solution
    from .preprocess import compute_bounds
    from .solver import SolverSpec, solve

    T = DataSet(S.X, t, S.name)
    cfg = TighteningConfig(bigM_mode="Tight", points_per_piece="PerF")
    b = compute_bounds(T, 0.0, Pp, Pm)
    m = build(T, FitParams(0.0, Pp, Pm), Objective(), cfg, b)
    if keep_activity:
        act = activity_map(g, S, tol)
        for c, sets in (("p", act.J), ("m", act.K)):
            idx = m.catalog[f"del_{c}"]
            for i, Ji in enumerate(sets):
                for j in Ji:
                    m.variables[int(idx[i, j])].lb = 1.0
    X = S.X
    for c, P in (("p", Pp), ("m", Pm)):
        F, A, B, D = (m.catalog[k] for k in (f"f{c}", f"a{c}", f"b{c}", f"del_{c}"))
        for i in range(S.N):
            for j in range(P):
                idx = (int(F[i]), *(int(v) for v in A[j]), int(B[j]), int(D[i, j]))
                coef = (1.0, *(-float(v) for v in X[i]), -1.0, margin)
                m.rows.append(Row(f"gap_{c}_{i + 1}_{j + 1}", idx, coef, ">=", margin, "gap"))
    out = solve(m, spec or SolverSpec(time_limit=600))
    if not out.has_solution:
        return None
    return extract_solution(out.values, m, T).f


def transform_with_report(f: DCFunction, S: DataSet, eps: float, tol: float = ACTIVITY_TOL,
                          max_steps: int | None = None, repair: bool = True, solver=None,
                          max_extra: int = 2) -> tuple[DCFunction, TransformReport]:
    """Well-behaved version of ``f`` with the same numbers of plus and minus pieces.

    Tilting runs as a sequence of LPs that never release a frozen equality.
    When two underdetermined pairs are coupled through the shared DC pieces
    the walk can stall; with ``repair`` the pieces are then recomputed by an
    interpolation MILP through the same targets f(x_i), first with the same
    piece counts and then with up to ``max_extra`` more pieces per part.
    The report records the method used; the returned function may therefore
    have more pieces than ``f``."""
    rep0 = verify_eps_approx(f, S, eps)
    if not rep0.feasible:
        raise TransformError(f"input is not an eps-approximation (max error {rep0.max_error:.6g} > {eps})")
    t = f(S.X)
    max_steps = max_steps or 4 * S.N * f.Pp * f.Pm + 10
    g, steps, stuck = _walk(_snap(f, S, t, tol), S, t, tol, max_steps)
    method = "tilt"
    if stuck:
        log.info("pairs %s are coupled through shared DC pieces", stuck)
        # a DC form with the same piece counts need not exist; grow one part at a time
        sizes = [(f.Pp + a, f.Pm + b) for s in range(max_extra + 1) for a in range(s + 1) for b in (s - a,)
                 if a <= max_extra and b <= max_extra] if repair else []
        done = False
        for Pp, Pm in sizes:
            for keep, margin in ((True, 1e-3), (False, 1e-3), (False, 1e-5)):
                h = _repair(g, S, t, tol, solver, keep, Pp, Pm, margin)
                if h is None:
                    continue
                h, more, _ = _walk(_snap(h, S, t, tol), S, t, tol, max_steps)
                if check_well_behaved(h, S, tol).passed and np.max(np.abs(h(S.X) - t)) <= 1e-8:
                    g, steps, method = h, steps + more, "milp" if keep else "milp-free"
                    done = True
                    break
            if done:
                break
    wb = check_well_behaved(g, S, tol)
    dev = float(np.max(np.abs(g(S.X) - t)))
    report = TransformReport(wb.passed, steps, dev, wb.underdetermined, stuck, method, (g.Pp, g.Pm))
    if not wb.passed:
        log.warning("pairs %s could not be completed inside the existing DC structure", wb.underdetermined)
    return g, report


def _advance(par: _Params, g: DCFunction, t: np.ndarray, tol: float, pair, S: DataSet):
    """One activation step for an underdetermined pair, or None."""
    j, k = pair
    act, E, r, ub = _system(par, g, t, tol)
    if not ub:
        return None
    A_ub = np.array([row for *_, row in ub])
    b_ub = np.zeros(len(ub))
    # candidate rows in the order suggested by the pair-local tilt, then by slack
    assign = derive_assignment(g, S, tol)
    hint = tilt_piece(assign, pair).new_points if assign.neighbors.get(pair) else ()
    cands = []
    for q, (c, i, idx, row) in enumerate(ub):
        if (c == "p" and idx == j and k in act.K[i]) or (c == "m" and idx == k and j in act.J[i]):
            cands.append((0 if i in hint else 1, -float(row @ par.theta), q))
    cands.sort()
    for *_, q in cands:
        theta = _try(par, E, r, A_ub, b_ub, A_ub[q])
        if theta is not None:
            return theta
    # blocked by another row: taking that row still enlarges the frozen set
    for *_, q in cands:
        theta = _try(par, E, r, A_ub, b_ub, A_ub[q], need=())
        if theta is not None:
            return theta
    # both pieces activated together at a point where neither is active
    for i in range(len(t)):
        if j in act.J[i] or k in act.K[i]:
            continue
        qp = next((q for q, u in enumerate(ub) if u[:3] == ("p", i, j)), None)
        qm = next((q for q, u in enumerate(ub) if u[:3] == ("m", i, k)), None)
        if qp is None or qm is None:
            continue
        theta = _try(par, E, r, A_ub, b_ub, A_ub[qp] + A_ub[qm], need=(qp, qm))
        if theta is not None:
            return theta
    return None


def _try(par: _Params, E, r, A_ub, b_ub, direction, need=None):
    """Maximise ``direction . theta`` (drive rows to zero slack); accept when
    the targeted rows (any row if ``need`` is empty) become tight, then snap
    every tight row exactly."""
    res = _min_slack(E, r, A_ub, b_ub, -direction)
    if res.status != 0:
        return None
    x = res.x
    slack = -(A_ub @ x)
    if need is None:
        if -(direction @ x) > LP_TOL:
            return None
    elif any(slack[q] > LP_TOL for q in need):
        return None
    tight = np.flatnonzero(slack <= LP_TOL)
    if not len(tight):
        return None
    E2 = np.vstack([E, A_ub[tight]]) if len(tight) else E
    r2 = np.concatenate([r, np.zeros(len(tight))])
    theta = _project(x, E2, r2)
    if np.max(np.abs(E2 @ theta - r2), initial=0.0) > 1e-9 or np.max(A_ub @ theta, initial=0.0) > 1e-9:
        return None
    return theta


def transform(f: DCFunction, S: DataSet, eps: float, tol: float = ACTIVITY_TOL, **kw) -> DCFunction:
    """Equivalent well-behaved version of ``f`` (see :func:`transform_with_report`)."""
    g, report = transform_with_report(f, S, eps, tol, **kw)
    if not report.well_behaved:
        log.warning("transform left underdetermined pairs: %s", report.underdetermined)
    return g
