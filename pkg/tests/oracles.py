"""Reference computations that share no code with the package."""

from itertools import combinations, product

import numpy as np
from scipy.optimize import linprog


def subset_lp(Xs, zs, eps, x, sense):
    """max (sense=+1) or min (sense=-1) of a.x + b over affine functions
    within eps of every point of the subset."""
    Xs = np.asarray(Xs, float)
    n, d = Xs.shape
    L = np.hstack([Xs, np.ones((n, 1))])
    c = -sense * np.append(x, 1.0)
    A_ub = np.vstack([L, -L])
    b_ub = np.concatenate([zs + eps, -(zs - eps)])
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * (d + 1), method="highs")
    assert res.status == 0, res.message
    return sense * -res.fun


def extrema_by_lp(X, z, eps):
    """gmin, gmax at each data point over all (d+1)-subsets, one LP per
    (subset, point, direction). For eps = 0 the subset LP has a single
    feasible point, which linprog still handles as equality pairs."""
    N, d = X.shape
    gmin = np.full(N, np.inf)
    gmax = np.full(N, -np.inf)
    for s in combinations(range(N), d + 1):
        s = list(s)
        for i in range(N):
            gmax[i] = max(gmax[i], subset_lp(X[s], z[s], eps, X[i], 1))
            gmin[i] = min(gmin[i], subset_lp(X[s], z[s], eps, X[i], -1))
    return gmin, gmax


def extreme_functions_brute(X, z, eps):
    """Every vertex (a, b) of every subset polytope, one solve at a time, no dedup."""
    N, d = X.shape
    out = []
    for s in combinations(range(N), d + 1):
        L = np.hstack([X[list(s)], np.ones((d + 1, 1))])
        for signs in product((-1.0, 1.0), repeat=d + 1):
            out.append(np.linalg.solve(L, z[list(s)] + eps * np.array(signs)))
    return np.array(out)


def chebyshev_fit(X, z):
    """min_t, a, b  t  s.t. |a.x_i + b - z_i| <= t."""
    N, d = X.shape
    L = np.hstack([X, np.ones((N, 1))])
    c = np.zeros(d + 2)
    c[-1] = 1.0
    A_ub = np.vstack([np.hstack([L, -np.ones((N, 1))]), np.hstack([-L, -np.ones((N, 1))])])
    b_ub = np.concatenate([z, -z])
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * (d + 1) + [(0, None)], method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    assert res.status == 0
    return res.fun, res.x[:d], res.x[d]


def dc_value(plus, minus, x):
    """Plain-Python evaluation of max(plus) - max(minus) at one point."""
    def mx(pieces):
        return max(sum(ai * xi for ai, xi in zip(a, x)) + b for a, b in pieces)
    return mx(plus) - mx(minus)


def tight_bigM(gmin, gmax, Pp, Pm):
    """M_i^- and M_i^+ straight from the closed form."""
    w = gmax - gmin
    return min(Pm - 1, Pp) * w, min(Pp - 1, Pm) * w


def general_position_instance(rng, N, d, lo=0.0, hi=1.0):
    while True:
        X = rng.uniform(lo, hi, (N, d))
        ok = True
        for s in combinations(range(N), d + 1):
            L = np.hstack([X[list(s)], np.ones((d + 1, 1))])
            if abs(np.linalg.det(L)) < 1e-6:
                ok = False
                break
        if ok:
            return X
