import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpwlfit.cpwl import (
    AffinePiece, ConvexPWL, DCFunction, activity_map, barycentric, check_well_behaved, eval_affine, eval_dc,
    interpolation_sets, normalize, point_in_simplex, segment_crosses_facet, verify_eps_approx,
)
from cpwlfit.dataset import DataSet
from cpwlfit.errors import ValidationError

from oracles import dc_value

finite = st.floats(-10, 10, allow_nan=False)


def abs_function():
    # |x| = max(x, -x) - 0
    return DCFunction.from_arrays([[1.0], [-1.0]], [0.0, 0.0], [[0.0]], [0.0])


def test_eval_abs():
    f = abs_function()
    assert f(np.array([[-2.0], [0.0], [3.0]])).tolist() == [2.0, 0.0, 3.0]
    v, J, K = eval_dc(f, [0.0])
    assert v == 0.0 and J == {0, 1} and K == {0}


def test_eval_affine_dimension_check():
    with pytest.raises(ValidationError):
        eval_affine(AffinePiece((1.0, 2.0), 0.0), [1.0])


def test_empty_parts_rejected():
    with pytest.raises(ValidationError):
        ConvexPWL(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValidationError):
        DCFunction(ConvexPWL([[1.0]], [0.0]), ConvexPWL([[1.0, 2.0]], [0.0]))


@st.composite
def dc_functions(draw, d=None):
    d = d or draw(st.integers(1, 3))
    Pp, Pm = draw(st.integers(1, 4)), draw(st.integers(1, 4))
    Ap = draw(st.lists(st.lists(finite, min_size=d, max_size=d), min_size=Pp, max_size=Pp))
    Am = draw(st.lists(st.lists(finite, min_size=d, max_size=d), min_size=Pm, max_size=Pm))
    bp = draw(st.lists(finite, min_size=Pp, max_size=Pp))
    bm = draw(st.lists(finite, min_size=Pm, max_size=Pm))
    return DCFunction.from_arrays(Ap, bp, Am, bm)


@settings(max_examples=80, deadline=None)
@given(dc_functions(), st.lists(finite, min_size=3, max_size=3))
def test_vectorised_and_scalar_evaluation_agree(f, x):
    x = x[: f.dim]
    ref = dc_value([(a, b) for a, b in zip(f.plus.A, f.plus.b)], [(a, b) for a, b in zip(f.minus.A, f.minus.b)], x)
    assert f(np.array([x]))[0] == pytest.approx(ref, abs=1e-9)
    assert eval_dc(f, x)[0] == pytest.approx(ref, abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(dc_functions(), st.lists(st.lists(finite, min_size=3, max_size=3), min_size=1, max_size=6))
def test_normalize_preserves_values(f, pts):
    X = np.array(pts)[:, : f.dim]
    g = normalize(f)
    assert np.allclose(g(X), f(X), atol=1e-9)
    assert np.all(np.diff(g.plus.A[:, 0]) >= 0) and np.all(np.diff(g.minus.A[:, 0]) >= 0)
    assert np.all(g.minus.A[0] == 0) and g.minus.b[0] == 0


@settings(max_examples=40, deadline=None)
@given(dc_functions())
def test_json_round_trip(f):
    g = DCFunction.from_json(json.loads(json.dumps(f.to_json())))
    assert g == f


def test_save_load(tmp_path):
    f = abs_function()
    f.save(tmp_path / "f.json")
    assert DCFunction.load(tmp_path / "f.json") == f


def test_verify_eps_approx_reports_violations(line_data):
    f = DCFunction.from_arrays([[1.0]], [0.0], [[0.0]], [0.0])
    rep = verify_eps_approx(f, line_data, 0.1)
    assert rep.feasible and rep.max_error == pytest.approx(0.1)
    rep = verify_eps_approx(f, line_data, 0.05)
    assert not rep.feasible and rep.violations == [1, 2]
    assert rep.errors.tolist() == pytest.approx([0.0, -0.1, 0.1, 0.0])


def test_verify_dimension_mismatch(line_data):
    f = DCFunction.from_arrays([[1.0, 0.0]], [0.0], [[0.0, 0.0]], [0.0])
    with pytest.raises(ValidationError):
        verify_eps_approx(f, line_data, 0.1)


def test_activity_and_well_behaved_on_abs():
    # |x| through five points: both pieces interpolate 3 points (x=0 is shared)
    X = np.array([[-2.0], [-1.0], [0.0], [1.0], [2.0]])
    S = DataSet(X, np.abs(X[:, 0]))
    f = abs_function()
    act = activity_map(f, S)
    assert act.J[2] == {0, 1} and act.pairs() == [(0, 0), (1, 0)]
    rep = check_well_behaved(f, S)
    assert rep.passed and rep.counts == {(0, 0): 3, (1, 0): 3}


def test_underdetermined_piece_is_reported():
    # max(0, 2x - 5) on x = 0..3: the steep piece meets only x = 3
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    S = DataSet(X, np.array([0.0, 0.0, 0.0, 1.0]))
    f = DCFunction.from_arrays([[0.0], [2.0]], [0.0, -5.0], [[0.0]], [0.0])
    rep = check_well_behaved(f, S)
    assert not rep.passed
    assert rep.underdetermined == [(1, 0)]
    assert rep.interpolated == {(0, 0): (0, 1, 2), (1, 0): (3,)}


def test_barycentric_and_point_in_simplex():
    V = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert barycentric([0.25, 0.25], V) == pytest.approx([0.5, 0.25, 0.25])
    assert point_in_simplex([0.25, 0.25], V)
    assert point_in_simplex([0.5, 0.5], V)  # boundary counts
    assert not point_in_simplex([0.6, 0.6], V)
    with pytest.raises(ValidationError):
        barycentric([0.1, 0.1], np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3))
def test_convex_combinations_are_inside(w):
    V = np.array([[0.0, 0.0], [2.0, 0.5], [0.3, 1.7]])
    lam = np.array(w) / sum(w)
    assert point_in_simplex(lam @ V, V)
    assert barycentric(lam @ V, V) == pytest.approx(lam)


def test_segment_crosses_facet():
    V = np.array([[0.0, -1.0], [0.0, 1.0]])
    assert segment_crosses_facet([-1.0, 0.0], [1.0, 0.0], V)
    assert not segment_crosses_facet([-1.0, 0.0], [-0.5, 0.0], V)  # stops short
    assert not segment_crosses_facet([-1.0, 2.0], [1.0, 2.0], V)  # misses the facet
    assert not segment_crosses_facet([0.0, -3.0], [0.0, 3.0], V)  # coplanar
    # d = 1: the facet is a single point
    assert segment_crosses_facet([0.0], [1.0], np.array([[0.5]]))
    assert not segment_crosses_facet([0.0], [1.0], np.array([[1.5]]))


def test_segment_crosses_facet_3d():
    V = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert segment_crosses_facet([0.2, 0.2, -1.0], [0.2, 0.2, 1.0], V)
    assert not segment_crosses_facet([0.8, 0.8, -1.0], [0.8, 0.8, 1.0], V)
