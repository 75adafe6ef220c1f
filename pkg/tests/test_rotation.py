import numpy as np
import pytest
from hypothesis import given, strategies as st

from rotcal import rotation as rot


def test_quat_matrix_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(100):
        q = rot.random_quat(rng)
        m = rot.quat_to_matrix(q)
        assert np.allclose(m @ m.T, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(m), 1.0)
        q2 = rot.matrix_to_quat(m)
        # same rotation up to sign
        assert min(np.linalg.norm(q - q2), np.linalg.norm(q + q2)) < 1e-12


def test_multiply_matches_matrix_product():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = rot.random_quat(rng), rot.random_quat(rng)
        lhs = rot.quat_to_matrix(rot.quat_multiply(a, b))
        rhs = rot.quat_to_matrix(a) @ rot.quat_to_matrix(b)
        assert np.allclose(lhs, rhs, atol=1e-12)


def test_rotate_vector():
    q = rot.quat_from_axis_angle([0, 0, 1], np.pi / 2)
    v = rot.quat_rotate(q, np.array([1.0, 0.0, 0.0]))
    assert np.allclose(v, [0, 1, 0], atol=1e-12)
    batch = rot.quat_rotate(q, np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    assert np.allclose(batch, [[0, 1, 0], [-1, 0, 0]], atol=1e-12)


def test_exp_small_angle_smooth():
    q = rot.quat_exp(np.zeros(3))
    assert np.allclose(q, [1, 0, 0, 0])
    q = rot.quat_exp(np.array([1e-14, 0, 0]))
    assert abs(np.linalg.norm(q) - 1) < 1e-15


@given(st.floats(1e-8, np.pi - 1e-6))
def test_exp_angle_roundtrip(angle):
    q = rot.quat_exp(np.array([0.0, angle, 0.0]))
    assert np.isclose(rot.quat_angle(q), angle, rtol=1e-9)


def test_geodesic_angle_conjugation_invariant():
    rng = np.random.default_rng(2)
    qa, qb, g = (rot.random_quat(rng) for _ in range(3))
    before = rot.geodesic_angle(qa, qb)
    after = rot.geodesic_angle(rot.quat_multiply(g, qa), rot.quat_multiply(g, qb))
    assert np.isclose(before, after, atol=1e-12)


def test_apply_tangent_renormalizes():
    rng = np.random.default_rng(3)
    q = rot.random_quat(rng)
    for _ in range(1000):
        q = rot.quat_apply_tangent(q, rng.normal(scale=0.1, size=3))
    assert abs(np.linalg.norm(q) - 1.0) < 1e-12


def test_nearest_rotation_recovers_scaled_rotation():
    rng = np.random.default_rng(4)
    for _ in range(20):
        r_true = rot.quat_to_matrix(rot.random_quat(rng))
        m = 3.7 * r_true
        assert np.allclose(rot.nearest_rotation(m), r_true, atol=1e-12)


def test_nearest_rotation_fixes_reflection():
    r = rot.nearest_rotation(np.diag([1.0, 1.0, -1.0]))
    assert np.isclose(np.linalg.det(r), 1.0)


def test_skew_matches_cross():
    rng = np.random.default_rng(5)
    v, u = rng.normal(size=3), rng.normal(size=3)
    assert np.allclose(rot.skew(v) @ u, np.cross(v, u))
    batch = rot.skew(np.stack([v, u]))
    assert batch.shape == (2, 3, 3)
    assert np.allclose(batch[1] @ v, np.cross(u, v))


def test_average_quats_close_cluster():
    rng = np.random.default_rng(6)
    base = rot.random_quat(rng)
    cluster = [rot.quat_apply_tangent(base, rng.normal(scale=0.01, size=3)) for _ in range(5)]
    # throw in a sign flip: averaging must be sign-invariant
    cluster[2] = -cluster[2]
    avg = rot.average_quats(cluster)
    assert rot.geodesic_angle(avg, base) < 0.02


def test_normalize_rejects_zero():
    with pytest.raises(ValueError):
        rot.quat_normalize(np.zeros(4))
