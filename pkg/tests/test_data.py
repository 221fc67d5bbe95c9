import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from breakdown.data import (
    ConvergenceError,
    DataError,
    Sample,
    SupportError,
    check_support,
    hellinger_from_joint,
    hellinger_lower_bound,
    load_csv,
    mcar_estimate,
    one_group_cells,
    write_csv,
    x_marginals,
)
from breakdown.harness import draw
from breakdown.moments import builtin_linear_iv, builtin_logit, builtin_mean


def small_sample():
    d = [1, 1, 0, 1, 0]
    y = [[0.5, 1.0], [0.25, 2.0], [np.nan, np.nan], [1.5, -1.0], [np.nan, np.nan]]
    x = [[0, 1], [1, 1], [0, 1], [1, 1], [1, 1]]
    return Sample(d, y, x)


def test_sample_basics():
    s = small_sample()
    assert (s.n, s.n1, s.d_y, s.d_x) == (5, 3, 2, 2)
    assert s.p_hat == pytest.approx(0.6)
    np.testing.assert_array_equal(s.support, [[0, 1], [1, 1]])
    np.testing.assert_array_equal(s.cell_index(np.array([[1.0, 1.0], [2.0, 2.0]])), [1, -1])


@pytest.mark.parametrize(
    "d, y, x",
    [
        ([1, 1], [[1.0], [2.0]], np.zeros((2, 0))),
        ([1, 0], [[np.nan], [np.nan]], np.zeros((2, 0))),
        ([1, 0], [[1.0], [2.0]], np.zeros((2, 0))),
        ([1, 0], [[1.0], [np.nan]], [[np.nan], [1.0]]),
    ],
)
def test_sample_rejects_inconsistent_rows(d, y, x):
    with pytest.raises(DataError):
        Sample(d, y, x)


def test_csv_round_trip_is_bit_identical(tmp_path):
    s = draw("linear", 300, 4)
    path = tmp_path / "s.csv"
    write_csv(s, path)
    assert load_csv(path).same(s)


def test_csv_categorical_levels(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("d,y1,x1\n1,0.5,red\n0,,blue\n1,0.25,blue\n0,,red\n")
    s = load_csv(path)
    assert s.x_levels == (("blue", "red"),)
    np.testing.assert_array_equal(s.x[:, 0], [1, 0, 0, 1])
    write_csv(s, tmp_path / "c2.csv")
    assert load_csv(tmp_path / "c2.csv").same(s)


@pytest.mark.parametrize(
    "text, msg",
    [
        ("y1,x1\n1,0\n", "missing column 'd'"),
        ("d,y1\n2,0.5\n0,\n", "d must be 0 or 1"),
        ("d,y1\n1,\n0,\n", "complete row with missing"),
        ("d,y1\n1,abc\n0,\n", "unparseable"),
        ("d,y1\n1,0.5\n0,0.3\n", "incomplete row"),
        ("d,y1\n1,inf\n0,\n", "non-finite"),
        ("d,y1,x1\n1,0.5,\n0,,1\n", "x cells are always required"),
        ("d,y1,x1\n1,0.5,0.5\n0,,0.5\n", "non-integer"),
        ("d,y1,x1\n1,0.5,0\n0,,1\n", "only one D group"),
        ("d,y2\n1,0.5\n0,\n", "contiguous"),
        ("d,y1\n1,0.5,1\n0,\n", "expected 2 cells"),
    ],
)
def test_csv_errors(tmp_path, text, msg):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DataError, match=msg):
        load_csv(path)


def test_support_check_only_in_full_mode(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("d,y1,x1\n1,0.5,0\n0,,1\n1,0.7,1\n")
    with pytest.raises(SupportError):
        load_csv(path)
    assert load_csv(path, mode="x-empty").n == 3


def test_mcar_mean_is_complete_case_average(uniform_4000):
    b = mcar_estimate(uniform_4000, builtin_mean())
    assert b[0] == pytest.approx(uniform_4000.y1[:, 0].mean(), abs=1e-12)


def test_mcar_linear_is_ols():
    s = draw("linear", 2000, 1)
    b = mcar_estimate(s, builtin_linear_iv("y1", ["1", "x1", "y2", "x2"]))
    X = np.column_stack([np.ones(s.n1), s.x1[:, 0], s.y1[:, 1], s.x1[:, 1]])
    ols, *_ = np.linalg.lstsq(X, s.y1[:, 0], rcond=None)
    np.testing.assert_allclose(b, ols, atol=1e-9)


def test_mcar_logit_solves_score(logit_4000):
    model = builtin_logit("x1", ["y1", "y2", "y3"])
    b = mcar_estimate(logit_4000, model)
    score = model.g(logit_4000.y1, logit_4000.x1, b).mean(axis=0)
    assert np.linalg.norm(score) <= 1e-10


def test_mcar_singular_design_fails_loudly():
    # y2 collinear with the constant on the complete cases
    y = np.array([[0.1, 1.0], [0.4, 1.0], [0.3, 1.0], [0.2, 1.0], [np.nan, np.nan]])
    s = Sample([1, 1, 1, 1, 0], y, np.zeros((5, 0)))
    with pytest.raises(ConvergenceError):
        mcar_estimate(s, builtin_linear_iv("y1", ["1", "y2"]))


def test_hellinger_lower_bound_and_marginals():
    s = small_sample()
    p0, p1 = x_marginals(s)
    np.testing.assert_allclose(p0, [0.5, 0.5])
    np.testing.assert_allclose(p1, [1 / 3, 2 / 3])
    expected = 1 - (math.sqrt(0.5 / 3) + math.sqrt(1 / 3))
    assert hellinger_lower_bound(s) == pytest.approx(expected, abs=1e-15)
    assert hellinger_lower_bound(draw("uniform-mean", 100, 0)) is None
    assert one_group_cells(s) == 0


def test_cell_empty_in_one_group_contributes_zero():
    # X = 2 appears only among complete rows
    x = np.array([[0.0], [1.0], [2.0], [0.0], [1.0]])
    s = Sample([1, 1, 1, 0, 0], np.array([0.1, 0.2, 0.3, np.nan, np.nan]), x)
    assert one_group_cells(s) == 1
    expected = 1 - 2 * math.sqrt(0.5 / 3)
    assert hellinger_lower_bound(s) == pytest.approx(expected, abs=1e-15)


def test_hellinger_identity_known_value():
    # Z independent of D: both sides are zero
    joint = np.outer([0.2, 0.3, 0.5], [0.4, 0.6])
    a, b = hellinger_from_joint(joint)
    assert a == pytest.approx(0.0, abs=1e-15) and b == pytest.approx(0.0, abs=1e-15)
    # disjoint supports: both sides are one
    a, b = hellinger_from_joint([[0.3, 0.0], [0.0, 0.7]])
    assert a == pytest.approx(1.0) and b == pytest.approx(1.0)


joints = st.integers(2, 12).flatmap(
    lambda k: arrays(np.float64, (k, 2), elements=st.floats(0.01, 1.0))
)


@given(joints)
def test_hellinger_identity_property(raw):
    joint = raw / raw.sum()
    a, b = hellinger_from_joint(joint)
    assert abs(a - b) <= 1e-12
    assert -1e-15 <= a <= 1.0


@given(st.integers(2, 5), st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_marginalisation_lowers_hellinger(ky, kx, seed):
    rng = np.random.default_rng(seed)
    joint = rng.dirichlet(np.ones(ky * kx * 2)).reshape(ky, kx, 2)
    full, _ = hellinger_from_joint(joint.reshape(-1, 2))
    marg, _ = hellinger_from_joint(joint.sum(axis=0))
    assert full >= marg - 1e-15
