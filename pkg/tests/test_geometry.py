import numpy as np
import pytest

from consensusfusion.geometry import (
    RigidTransform,
    UnitQuaternion,
    boxminus,
    boxplus,
    compose,
    so3_right_jacobian,
    so3_right_jacobian_inv,
    vec3,
)


def random_quat(rng):
    return UnitQuaternion.from_wxyz(rng.normal(size=4))


def random_transform(rng):
    return RigidTransform(random_quat(rng), rng.normal(size=3))


class TestUnitQuaternion:
    def test_constructor_normalizes(self):
        q = UnitQuaternion(2.0, 0.0, 0.0, 0.0)
        assert abs(np.linalg.norm(q.wxyz) - 1.0) < 1e-9

    def test_double_cover_equality(self):
        rng = np.random.default_rng(0)
        q = random_quat(rng)
        neg = UnitQuaternion.from_wxyz(-q.wxyz)
        assert q.approx_equal(neg)

    def test_rotate_matches_matrix(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            q = random_quat(rng)
            v = rng.normal(size=3)
            assert np.allclose(q.rotate(v), q.rotation_matrix() @ v, atol=1e-12)

    def test_rz_90_composition(self):
        # Rz(90) ∘ Rz(90) applied to (1,0,0) -> (-1,0,0)
        rz = UnitQuaternion.from_axis_angle(vec3(0, 0, 1), np.pi / 2)
        out = (rz * rz).rotate(vec3(1, 0, 0))
        assert np.allclose(out, [-1, 0, 0], atol=1e-12)


class TestBoxOps:
    def test_boxminus_zero(self):
        rng = np.random.default_rng(2)
        q = random_quat(rng)
        assert np.allclose(boxminus(q, q), 0.0, atol=1e-12)

    def test_boxminus_small_angle(self):
        q = UnitQuaternion.from_axis_angle(vec3(0, 0, 1), 0.1)
        assert np.allclose(boxminus(q, UnitQuaternion.identity()),
                           [0, 0, 0.1], atol=1e-12)

    def test_boxplus_identity_delta(self):
        rng = np.random.default_rng(3)
        q = random_quat(rng)
        assert boxplus(q, np.zeros(3)).approx_equal(q)

    def test_boxplus_exp_map(self):
        q = boxplus(UnitQuaternion.identity(), vec3(0, 0, np.pi / 2))
        expected = UnitQuaternion.from_axis_angle(vec3(0, 0, 1), np.pi / 2)
        assert q.approx_equal(expected, tol=1e-12)

    def test_roundtrip_random_pairs(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(1000):
            a, b = random_quat(rng), random_quat(rng)
            back = boxplus(b, boxminus(a, b))
            worst = max(worst, back.angle_to(a))
        assert worst < 1e-9

    def test_boxplus_preserves_norm(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            q = boxplus(random_quat(rng), rng.normal(size=3))
            assert abs(np.linalg.norm(q.wxyz) - 1.0) < 1e-12

    def test_log_exp_inverse_over_angle_range(self):
        rng = np.random.default_rng(6)
        for _ in range(500):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(1e-6, np.pi - 1e-3)
            phi = axis * angle
            assert np.allclose(UnitQuaternion.exp(phi).log(), phi, atol=1e-9)

    def test_log_near_pi(self):
        q = UnitQuaternion.from_axis_angle(vec3(1, 0, 0), np.pi - 1e-7)
        assert abs(np.linalg.norm(q.log()) - (np.pi - 1e-7)) < 1e-9


class TestRigidTransform:
    def test_identity_compose(self):
        rng = np.random.default_rng(7)
        t = random_transform(rng)
        assert compose(RigidTransform.identity(), t).approx_equal(t)

    def test_inverse_compose(self):
        rng = np.random.default_rng(8)
        t = random_transform(rng)
        assert compose(t, t.inverse()).approx_equal(RigidTransform.identity())

    def test_compose_matches_apply(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            a, b = random_transform(rng), random_transform(rng)
            x = rng.normal(size=3)
            assert np.allclose(compose(a, b).apply(x), a.apply(b.apply(x)),
                               atol=1e-9)


class TestJacobians:
    @pytest.mark.parametrize("seed", range(5))
    def test_right_jacobian_inverse_pair(self, seed):
        rng = np.random.default_rng(seed)
        phi = rng.normal(size=3)
        J = so3_right_jacobian(phi)
        Jinv = so3_right_jacobian_inv(phi)
        assert np.allclose(J @ Jinv, np.eye(3), atol=1e-9)

    def test_right_jacobian_definition(self):
        # exp(phi + d) ~ exp(phi) * exp(Jr(phi) d) for small d
        rng = np.random.default_rng(11)
        phi = rng.normal(size=3)
        d = rng.normal(size=3) * 1e-6
        lhs = UnitQuaternion.exp(phi + d)
        rhs = UnitQuaternion.exp(phi).boxplus(so3_right_jacobian(phi) @ d)
        assert lhs.angle_to(rhs) < 1e-10
