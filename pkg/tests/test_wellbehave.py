import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpwlfit.cpwl import DCFunction, check_well_behaved, verify_eps_approx
from cpwlfit.dataset import DataSet, lifted, rescale
from cpwlfit.errors import TransformError
from cpwlfit.model import FitParams, Objective, build, extract_solution, preset
from cpwlfit.preprocess import compute_bounds
from cpwlfit.solver import SolverSpec, solve
from cpwlfit.wellbehave import derive_assignment, tilt_piece, transform, transform_with_report

from conftest import needs_highs


def hinge():
    # max(0, 2x - 5) on x = 0..3: the rising piece only touches x = 3
    S = DataSet(np.arange(4.0)[:, None], np.array([0.0, 0.0, 0.0, 1.0]))
    return DCFunction.from_arrays([[0.0], [2.0]], [0.0, -5.0], [[0.0]], [0.0]), S


def test_assignment_of_hinge():
    f, S = hinge()
    a = derive_assignment(f, S)
    assert a.pairs == [(0, 0), (1, 0)]
    assert a.interpolated[1, 0] == (3,)
    # the rising piece must stay below the data where the flat piece is the max
    assert a.neighbors[1, 0] == ((0, 1), (1, 1), (2, 1))
    assert a.neighbors[0, 0] == ((3, 1),)


def test_tilt_hinge_reaches_next_point():
    f, S = hinge()
    r = tilt_piece(derive_assignment(f, S), (1, 0))
    assert r.piece.a[0] == pytest.approx(1.0, abs=1e-9) and r.piece.b == pytest.approx(-2.0, abs=1e-9)
    assert r.new_points == (2,) and r.active_count == 2 and r.residual <= 1e-9


def test_transform_hinge_is_pure_lp():
    f, S = hinge()
    g, rep = transform_with_report(f, S, 0.0)
    assert rep.well_behaved and rep.method == "tilt" and rep.steps >= 1 and rep.pieces == (2, 1)
    assert np.abs(g(S.X) - f(S.X)).max() <= 1e-12
    assert check_well_behaved(g, S).passed


def test_transform_rejects_non_approximation():
    f, S = hinge()
    with pytest.raises(TransformError):
        transform(f, DataSet(S.X, S.z + 1.0), 0.5)


@st.composite
def convex_instances(draw):
    d = draw(st.integers(1, 2))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    P = draw(st.integers(2, 4))
    f = DCFunction.from_arrays(rng.normal(size=(P, d)), rng.normal(size=P), np.zeros((1, d)), np.zeros(1))
    X = rng.uniform(-1, 1, (draw(st.integers(6, 14)), d))
    return f, DataSet(X, f(X))


@settings(max_examples=40, deadline=None)
@given(convex_instances())
def test_tilt_keeps_polyhedron_and_points(inst):
    f, S = inst
    a = derive_assignment(f, S)
    L = lifted(S.X)
    d = S.X.shape[1]
    for pair in a.pairs:
        r = tilt_piece(a, pair)
        theta = np.append(r.piece.a, r.piece.b)
        for i in a.interpolated[pair]:
            assert abs(L[i] @ theta - a.targets[i]) <= 1e-8
        for i, c in a.neighbors[pair]:
            assert c * (L[i] @ theta - a.targets[i]) <= 1e-8
        need = min(d + 1, len(a.interpolated[pair]) + len(a.neighbors[pair]))
        assert r.active_count == need


def _solved(seed, eps, d=2, N=12, P=(2, 2)):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (N, d))
    z = np.sin(3 * X[:, 0]) + (X[:, 1] ** 2 if d > 1 else 0.0)
    S, _ = rescale(DataSet(X, z))
    m = build(S, FitParams(eps, *P), Objective(), preset("C3"), compute_bounds(S, eps, *P))
    out = solve(m, SolverSpec(time_limit=300))
    assert out.status == "Optimal"
    return extract_solution(out.values, m, S).f, S


@needs_highs
def test_tilt_repairs_solved_fit():
    f, S = _solved(1, 0.1)
    assert not check_well_behaved(f, S).passed
    g, rep = transform_with_report(f, S, 0.1)
    assert rep.well_behaved and rep.method == "tilt" and rep.pieces == (2, 2) and not rep.stuck_pairs
    assert rep.max_deviation <= 1e-8
    assert verify_eps_approx(g, S, 0.1).feasible


@needs_highs
def test_coupled_pairs_fall_back_to_milp():
    # the two underdetermined pairs share both pieces; no (2,2) version exists
    f, S = _solved(0, 0.05)
    assert not check_well_behaved(f, S).passed
    _, rep0 = transform_with_report(f, S, 0.05, repair=False)
    assert not rep0.well_behaved and rep0.stuck_pairs
    g, rep = transform_with_report(f, S, 0.05)
    assert rep.well_behaved and rep.method.startswith("milp")
    assert sum(rep.pieces) > 4 and rep.max_deviation <= 1e-8
    assert np.abs(g(S.X) - f(S.X)).max() <= 1e-8
