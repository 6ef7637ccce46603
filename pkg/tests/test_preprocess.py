import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpwlfit.dataset import DataSet
from cpwlfit.errors import ValidationError
from cpwlfit.preprocess import (
    BoundsBundle, cache_key, coefficient_extrema, compute_bigM, compute_bounds, compute_extrema,
    enumerate_extreme_affine, expected_function_count, extrema_from_json, extrema_to_json, pairwise_bigM,
    pointwise_extrema, sign_patterns,
)

from oracles import extrema_by_lp, extreme_functions_brute, general_position_instance, tight_bigM


def two_points():
    return DataSet(np.array([[0.0], [1.0]]), np.array([0.0, 1.0]))


def test_two_point_example_by_hand():
    # a*0 + b = +-0.1, a + b = 1 +- 0.1
    A = enumerate_extreme_affine(two_points(), 0.1)
    got = sorted(map(tuple, np.round(A.coeffs, 12)))
    assert got == sorted([(1.0, -0.1), (1.2, -0.1), (0.8, 0.1), (1.0, 0.1)])
    gmin, gmax = pointwise_extrema(A, two_points())
    assert gmin.tolist() == pytest.approx([-0.1, 0.9]) and gmax.tolist() == pytest.approx([0.1, 1.1])
    a_lo, a_hi, b_lo, b_hi = coefficient_extrema(A)
    assert (a_lo[0], a_hi[0], b_lo, b_hi) == pytest.approx((0.8, 1.2, -0.1, 0.1))


def test_sign_patterns_order():
    assert sign_patterns(1).tolist() == [[-1, -1], [-1, 1], [1, -1], [1, 1]]


@pytest.mark.parametrize("d, N", [(1, 6), (2, 7), (3, 7)])
def test_matches_brute_force_vertices(rng, d, N):
    X = general_position_instance(rng, N, d)
    z = rng.normal(size=N)
    A = enumerate_extreme_affine(DataSet(X, z), 0.05, dedup=False)
    ref = extreme_functions_brute(X, z, 0.05)
    assert A.n_raw == len(ref) == math.comb(N, d + 1) * 2 ** (d + 1)
    assert np.allclose(A.coeffs, ref, atol=1e-9)


@pytest.mark.parametrize("d", [1, 2])
def test_pointwise_extrema_match_lp_oracle(rng, d):
    X = general_position_instance(rng, 6, d)
    z = rng.normal(size=6)
    S = DataSet(X, z)
    for eps in (0.0, 0.1):
        gmin, gmax = pointwise_extrema(enumerate_extreme_affine(S, eps), S)
        lo, hi = extrema_by_lp(X, z, eps)
        assert np.allclose(gmin, lo, atol=1e-8) and np.allclose(gmax, hi, atol=1e-8)


def test_streaming_extrema_equal_materialised(rng):
    S = DataSet(general_position_instance(rng, 9, 2), rng.normal(size=9))
    A = enumerate_extreme_affine(S, 0.07)
    ext = compute_extrema(S, 0.07, chunk=5)
    gmin, gmax = pointwise_extrema(A, S)
    a_lo, a_hi, b_lo, b_hi = coefficient_extrema(A)
    assert np.array_equal(ext.gmin, gmin) and np.array_equal(ext.gmax, gmax)
    assert np.array_equal(ext.a_lo, a_lo) and np.array_equal(ext.a_hi, a_hi)
    assert (ext.b_lo, ext.b_hi) == (b_lo, b_hi)
    assert ext.n_functions == A.n_raw
    par = compute_extrema(S, 0.07, chunk=7, workers=3)
    assert np.array_equal(par.gmin, gmin) and np.array_equal(par.gmax, gmax)


def test_eps_zero_deduplicates_to_one_function_per_subset(rng):
    S = DataSet(general_position_instance(rng, 6, 2), rng.normal(size=6))
    A = enumerate_extreme_affine(S, 0.0)
    assert A.n_raw == math.comb(6, 3) * 8 and len(A) == math.comb(6, 3)


def test_collinear_points_are_rejected():
    S = DataSet(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 1.0]]), np.zeros(4))
    with pytest.raises(ValidationError, match="affinely dependent"):
        enumerate_extreme_affine(S, 0.1)


def test_sources_are_kept(rng):
    S = DataSet(general_position_instance(rng, 4, 1), rng.normal(size=4))
    A = enumerate_extreme_affine(S, 0.1, dedup=False, keep_sources=True)
    subset, signs = A.sources[5]
    L = np.column_stack([S.X[list(subset)], np.ones(2)])
    assert np.allclose(L @ A.coeffs[5], S.z[list(subset)] + 0.1 * np.array(signs))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.lists(st.floats(0, 5), min_size=1, max_size=6))
def test_bigM_closed_form(Pp, Pm, w):
    gmin = np.zeros(len(w))
    gmax = np.array(w)
    Mm, Mp = compute_bigM(gmin, gmax, Pp, Pm)
    rm, rp = tight_bigM(gmin, gmax, Pp, Pm)
    assert np.array_equal(Mm, rm) and np.array_equal(Mp, rp)
    T = pairwise_bigM(Mm)
    assert np.all(np.diag(T) == 0) and np.allclose(T, T.T)


def test_single_piece_needs_no_bigM():
    Mm, Mp = compute_bigM(np.zeros(3), np.ones(3), 1, 1)
    assert not Mm.any() and not Mp.any()


def test_variable_bounds_formulas():
    S = two_points()
    b = compute_bounds(S, 0.1, 3, 2)
    assert b.a_prime == pytest.approx([min(1, 3) * 0.4])
    assert b.b_prime == pytest.approx(min(1, 3) * 0.2)
    vb = b.variable_bounds(S.z)
    lo, hi = vb["am"]
    assert lo[:, 0].tolist() == [0.0, 0.0] and hi[:, 0] == pytest.approx([0.4, 0.4])
    lo, hi = vb["ap"]
    assert lo[:, 0] == pytest.approx([0.8] * 3) and hi[:, 0] == pytest.approx([1.6] * 3)
    lo, hi = vb["fp"]
    assert hi == pytest.approx(S.z + 0.1 + b.M_minus)
    lo, hi = vb["bp"]
    assert lo == pytest.approx([-0.3] * 3) and hi == pytest.approx([0.3] * 3)


def test_bundle_json_round_trip_is_exact(rng):
    S = DataSet(general_position_instance(rng, 6, 2), rng.normal(size=6))
    b = compute_bounds(S, 0.1, 2, 3)
    c = BoundsBundle.from_json(json.loads(json.dumps(b.to_json())))
    for k in BoundsBundle.KEYS:
        assert np.array_equal(getattr(b, k), getattr(c, k))


def test_cache_reuses_extrema(tmp_path, rng):
    S = DataSet(general_position_instance(rng, 6, 2), rng.normal(size=6))
    b1 = compute_bounds(S, 0.1, 2, 2, cache_dir=tmp_path)
    files = list(tmp_path.iterdir())
    assert [f.name for f in files] == [f"extrema-{cache_key(S, 0.1)}.json"]
    b2 = compute_bounds(S, 0.1, 3, 2, cache_dir=tmp_path)
    assert np.array_equal(b1.gmin, b2.gmin) and b2.Pp == 3
    assert cache_key(S, 0.1) != cache_key(S, 0.2)
    ext = compute_extrema(S, 0.1)
    back = extrema_from_json(json.loads(json.dumps(extrema_to_json(ext))))
    assert np.array_equal(back.gmax, ext.gmax)


def test_expected_count():
    assert expected_function_count(10, 2) == 120 * 8


def test_bad_inputs():
    with pytest.raises(ValidationError):
        enumerate_extreme_affine(two_points(), -1.0)
    with pytest.raises(ValidationError):
        compute_extrema(DataSet(np.array([[0.0, 1.0]]), [1.0]), 0.1)
    with pytest.raises(ValidationError):
        compute_bigM(np.zeros(2), np.ones(2), 0, 1)
