import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from egokit import rotmath
from egokit.errors import DegenerateInput, InvalidRotation, RankDeficient


def gram_schmidt_loop(a):
    c1 = np.array(a[:3], dtype=float)
    c2 = np.array(a[3:], dtype=float)
    e1 = c1 / np.sqrt(sum(x * x for x in c1))
    d = sum(x * y for x, y in zip(e1, c2))
    u = c2 - d * e1
    e2 = u / np.sqrt(sum(x * x for x in u))
    e3 = np.array([
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ])
    return np.column_stack([e1, e2, e3])


def rot_z(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]])


def test_rot6d_canonical_and_scaled():
    np.testing.assert_array_equal(rotmath.rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))
    np.testing.assert_allclose(rotmath.rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3), atol=1e-15)


def test_rot6d_matches_explicit_gram_schmidt():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((200, 6))
    m = rotmath.rot6d_to_matrix(a)
    for ai, mi in zip(a, m):
        np.testing.assert_allclose(mi, gram_schmidt_loop(ai), atol=1e-12)
    err = np.linalg.norm(np.swapaxes(m, -1, -2) @ m - np.eye(3), axis=(1, 2))
    assert err.max() < 1e-6
    assert np.abs(np.linalg.det(m) - 1).max() < 1e-6


@pytest.mark.parametrize("a", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [1, 2, 3, -2, -4, -6], [1e-10, 0, 0, 0, 1, 0]])
def test_rot6d_degenerate(a):
    with pytest.raises(DegenerateInput):
        rotmath.rot6d_to_matrix(a)


def test_matrix_to_rot6d_examples():
    np.testing.assert_array_equal(rotmath.matrix_to_rot6d(np.eye(3)), [1, 0, 0, 0, 1, 0])
    np.testing.assert_allclose(rotmath.matrix_to_rot6d(rot_z(90)), [0, 1, 0, -1, 0, 0], atol=1e-15)
    with pytest.raises(InvalidRotation):
        rotmath.matrix_to_rot6d(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(InvalidRotation):
        rotmath.matrix_to_rot6d(2 * np.eye(3))


def test_rot6d_round_trip_1000():
    rng = np.random.default_rng(1)
    m = rotmath.axis_angle_to_matrix(rng.standard_normal((1000, 3)), rng.uniform(0, np.pi, 1000))
    back = rotmath.rot6d_to_matrix(rotmath.matrix_to_rot6d(m))
    assert np.abs(back - m).max() < 1e-6


def test_axis_angle_matches_scipy():
    rng = np.random.default_rng(2)
    rv = rng.standard_normal((50, 3))
    np.testing.assert_allclose(rotmath.axis_angle_to_matrix(rv), Rotation.from_rotvec(rv).as_matrix(), atol=1e-12)


def test_geodesic_examples():
    rng = np.random.default_rng(3)
    r = rotmath.random_rotation(rng)
    assert rotmath.geodesic_distance(r, r) == pytest.approx(0.0, abs=1e-7)
    for alpha in np.linspace(0.05, np.pi - 0.05, 25):
        axis = rng.standard_normal(3)
        assert rotmath.geodesic_distance(np.eye(3), rotmath.axis_angle_to_matrix(axis, alpha)) == pytest.approx(alpha, abs=1e-7)
    flip = rotmath.axis_angle_to_matrix([1.0, 0, 0], np.pi)
    assert rotmath.geodesic_distance(np.eye(3), flip) == pytest.approx(np.pi, abs=1e-6)


def test_geodesic_triangle_and_symmetry():
    rng = np.random.default_rng(4)
    a, b, c = (rotmath.random_rotation(rng, 500) for _ in range(3))
    dab = rotmath.geodesic_distance(a, b)
    np.testing.assert_allclose(dab, rotmath.geodesic_distance(b, a), atol=1e-12)
    assert np.all(rotmath.geodesic_distance(a, c) <= dab + rotmath.geodesic_distance(b, c) + 1e-6)
    assert np.all((dab >= 0) & (dab <= np.pi))


def test_project_fixed_point_and_scale():
    rng = np.random.default_rng(5)
    r = rotmath.random_rotation(rng, 100)
    np.testing.assert_allclose(rotmath.project_to_so3(r), r, atol=1e-6)
    np.testing.assert_allclose(rotmath.project_to_so3(0.5 * r), r, atol=1e-6)
    for c in (1e-3, 3.0, 250.0):
        np.testing.assert_allclose(rotmath.project_to_so3(c * r), r, atol=1e-6)


def test_project_symmetric_pair_over_grid():
    for alpha in np.linspace(0.5, 89.0, 60):
        mean = 0.5 * (rot_z(alpha) + rot_z(-alpha))
        np.testing.assert_allclose(rotmath.project_to_so3(mean), np.eye(3), atol=1e-6)


def test_project_negative_determinant_correction():
    reflection = np.diag([1.0, 1.0, -1.0]) @ rot_z(30)
    out = rotmath.project_to_so3(reflection)
    assert rotmath.is_rotation(out)


def nearest_rotation_search(m):
    best = None
    for start in np.random.default_rng(0).standard_normal((8, 3)):
        res = minimize(
            lambda rv: np.sum((Rotation.from_rotvec(rv).as_matrix() - m) ** 2),
            start, method="BFGS", options={"gtol": 1e-12},
        )
        if best is None or res.fun < best.fun:
            best = res
    return Rotation.from_rotvec(best.x).as_matrix()


def test_project_matches_numerical_search():
    rng = np.random.default_rng(6)
    for _ in range(10):
        m = rng.standard_normal((3, 3))
        np.testing.assert_allclose(rotmath.project_to_so3(m), nearest_rotation_search(m), atol=1e-5)


def test_project_rank_deficient():
    with pytest.raises(RankDeficient):
        rotmath.project_to_so3(np.outer([1.0, 2, 3], [0.5, 0, 1]))
    with pytest.raises(RankDeficient):
        rotmath.project_to_so3(np.zeros((3, 3)))
    # rank 2 is still projectable
    assert rotmath.is_rotation(rotmath.project_to_so3(np.diag([1.0, 2.0, 0.0])))


def test_average_rotations():
    rng = np.random.default_rng(7)
    r = rotmath.random_rotation(rng)
    np.testing.assert_allclose(rotmath.average_rotations([r, r, r]), r, atol=1e-12)
    np.testing.assert_allclose(rotmath.average_rotations([r] * 16), r, atol=1e-12)
    np.testing.assert_allclose(rotmath.average_rotations([rot_z(10), rot_z(-10)]), np.eye(3), atol=1e-6)
    with pytest.raises(ValueError):
        rotmath.average_rotations(np.zeros((0, 3, 3)))


finite6 = arrays(np.float64, 6, elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(finite6)
def test_rot6d_outputs_are_rotations(a):
    try:
        m = rotmath.rot6d_to_matrix(a)
    except DegenerateInput:
        return
    assert rotmath.is_rotation(m)
    # second application is the identity on normalized input
    np.testing.assert_allclose(rotmath.rot6d_to_matrix(rotmath.matrix_to_rot6d(m)), m, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-3, 3)), st.floats(1e-3, 1e3))
def test_project_scale_invariance_property(rv, c):
    r = rotmath.axis_angle_to_matrix(rv)
    np.testing.assert_allclose(rotmath.project_to_so3(c * r), r, atol=1e-6)
