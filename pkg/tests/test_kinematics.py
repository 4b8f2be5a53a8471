"""Rigid body algebra, quadrature and integrators."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rigidflow.kinematics import (Ball, BodyState, Isometry, Trajectory,
                                  conjugate_inertia, integrate_rotation,
                                  mass_properties, orthogonality_defect,
                                  polar_rotation, rigid_velocity, rotation_angle,
                                  skew, solve_o_delta, step_body, uniform_ball_body)

vec = st.lists(st.floats(-2, 2, allow_nan=False), min_size=3, max_size=3).map(np.array)


def _rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TestAlgebra:
    @given(a=vec, b=vec)
    @settings(max_examples=50, deadline=None)
    def test_skew_is_cross_product(self, a, b):
        assert np.allclose(skew(a) @ b, np.cross(a, b), atol=1e-12)
        assert np.allclose(skew(a).T, -skew(a))

    def test_rotation_commutes_with_cross(self):
        # R a x R b = R (a x b) over many random rotations
        rng = np.random.default_rng(7)
        for _ in range(1000):
            o = polar_rotation(np.eye(3) + 0.4 * rng.standard_normal((3, 3)))
            a, b = rng.standard_normal(3), rng.standard_normal(3)
            lhs = np.cross(o @ a, o @ b)
            rhs = o @ np.cross(a, b)
            assert np.abs(lhs - rhs).max() < 1e-10

    def test_polar_rotation_projects(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            m = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
            o = polar_rotation(m)
            assert orthogonality_defect(o) < 1e-12
            assert np.linalg.det(o) > 0.0
            # already-orthogonal input is a fixed point
            assert np.abs(polar_rotation(o) - o).max() < 1e-12

    def test_rotation_angle(self):
        assert abs(rotation_angle(_rot_z(0.7)) - 0.7) < 1e-12
        assert rotation_angle(np.eye(3)) == 0.0

    def test_isometry_compose_inverse(self):
        iso = Isometry(_rot_z(0.4), np.array([0.1, -0.2, 0.3]))
        x = np.array([[0.2, 0.5, 0.7]])
        back = iso.inverse().apply(iso.apply(x))
        assert np.abs(back - x).max() < 1e-14
        both = iso.compose(iso.inverse())
        assert np.abs(both.apply(x) - x).max() < 1e-14


class TestBall:
    def test_signed_distance_and_gap(self):
        ball = Ball(np.array([0.3, 0.5, 0.5]), 0.1)
        assert abs(ball.wall_gap() - 0.2) < 1e-14
        sd = ball.signed_distance(np.array([[0.5, 0.5, 0.5], [0.3, 0.5, 0.5]]))
        assert abs(sd[0] - 0.1) < 1e-14
        assert abs(sd[1] + 0.1) < 1e-14
        inside = ball.contains(np.array([[0.31, 0.5, 0.5], [0.5, 0.5, 0.5]]))
        assert inside.tolist() == [True, False]

    def test_volume(self):
        ball = Ball(np.array([0.5, 0.5, 0.5]), 0.15)
        assert abs(ball.volume - 4.0 / 3.0 * math.pi * 0.15 ** 3) < 1e-15


class TestBodyState:
    def _body(self):
        return uniform_ball_body((0.5, 0.5, 0.5), 0.15, 2.0,
                                 velocity=(0.1, 0.0, -0.2), spin=(0.0, 0.3, 0.0))

    def test_uniform_ball_quadrature(self):
        body = self._body()
        m_exact = 2.0 * 4.0 / 3.0 * math.pi * 0.15 ** 3
        j_exact = 0.4 * m_exact * 0.15 ** 2
        assert abs(body.m - m_exact) / m_exact < 0.01
        assert np.abs(body.J0 - j_exact * np.eye(3)).max() / j_exact < 0.01

    def test_kinetic_energy_closed_form(self):
        body = self._body()
        ke = 0.5 * body.m * 0.05 + 0.5 * 0.3 ** 2 * body.J0[1, 1]
        assert abs(body.kinetic_energy() - ke) < 1e-12

    def test_rigid_velocity_formula(self):
        body = self._body()
        x = np.array([[0.6, 0.5, 0.5]])
        expected = body.V + np.cross(body.w, x[0] - body.X)
        assert np.abs(rigid_velocity(body, x)[0] - expected).max() < 1e-14

    def test_world_inertia_conjugation(self):
        body = self._body()
        o = _rot_z(0.9)
        rotated = BodyState(m=body.m, J0=body.J0, X=body.X, V=body.V, O=o, w=body.w)
        assert np.allclose(rotated.world_inertia(), o @ body.J0 @ o.T, atol=1e-14)
        assert np.allclose(conjugate_inertia(o @ body.J0 @ o.T, o), body.J0, atol=1e-13)

    def test_mass_properties_offcenter(self):
        ball = Ball(np.array([0.4, 0.6, 0.5]), 0.1)
        m, xc, j = mass_properties(lambda pts: np.full(pts.shape[:-1], 3.0), ball)
        assert abs(m - 3.0 * ball.volume) / (3.0 * ball.volume) < 0.01
        assert np.abs(xc - ball.center).max() < 1e-3
        assert np.abs(j - 0.4 * m * 0.1 ** 2 * np.eye(3)).max() < 0.01 * 0.4 * m * 0.01


class TestIntegrators:
    def test_integrate_rotation_constant_spin(self):
        w = np.array([0.0, 0.0, 1.3])
        o = np.eye(3)
        dt = 1e-3
        for _ in range(500):
            o = integrate_rotation(o, w, dt)
        assert np.abs(o - _rot_z(1.3 * 0.5)).max() < 1e-6
        assert orthogonality_defect(o) < 1e-12

    def test_step_body_constant_force_exact(self):
        body = uniform_ball_body((0.5, 0.5, 0.5), 0.1, 2.0)
        f = np.array([0.02, 0.0, -0.01])
        dt, steps = 1e-3, 200
        b = body
        for _ in range(steps):
            b = step_body(b, f, np.zeros(3), dt)
        t = dt * steps
        assert np.abs(b.V - f / body.m * t).max() < 1e-12
        assert np.abs(b.X - (body.X + 0.5 * f / body.m * t ** 2)).max() < 1e-12

    def test_step_body_ball_spin_constant(self):
        # spherical inertia: zero torque keeps the spin fixed
        body = uniform_ball_body((0.5, 0.5, 0.5), 0.1, 2.0, spin=(0.2, -0.1, 0.4))
        b = body
        for _ in range(100):
            b = step_body(b, np.zeros(3), np.zeros(3), 1e-3)
        assert np.abs(b.w - body.w).max() < 1e-12
        assert orthogonality_defect(b.O) < 1e-12

    def test_step_body_torque_spinup(self):
        body = uniform_ball_body((0.5, 0.5, 0.5), 0.1, 2.0)
        tq = np.array([0.0, 0.0, 1e-3])
        b = body
        for _ in range(100):
            b = step_body(b, np.zeros(3), tq, 1e-3)
        expected = np.linalg.solve(body.J0, tq) * 0.1
        assert np.abs(b.w - expected).max() < 1e-10


class TestODelta:
    def test_zero_start_stays_zero(self):
        rng = np.random.default_rng(11)
        ws = rng.standard_normal((50, 3))
        samples = np.array([skew(w) for w in ws])
        sup, final = solve_o_delta(samples, 1e-3)
        assert sup == 0.0
        assert np.abs(final).max() == 0.0

    def test_perturbed_start_respects_growth_bound(self):
        rng = np.random.default_rng(4)
        ws = 0.5 * rng.standard_normal((200, 3))
        samples = np.array([skew(w) for w in ws])
        dt, eps = 1e-3, 1e-6
        sup, _ = solve_o_delta(samples, dt, o0=eps * np.eye(3))
        norms = np.array([np.linalg.norm(s, 2) for s in samples])
        budget = eps * math.exp(np.trapezoid(norms, dx=dt)) * math.sqrt(3.0)
        assert sup <= budget * (1.0 + 1e-6)


class TestTrajectory:
    def test_append_and_lookup(self):
        body = uniform_ball_body((0.5, 0.5, 0.5), 0.1, 2.0)
        traj = Trajectory()
        for k in range(5):
            traj.append(0.1 * k, body)
        assert len(traj) == 5
        assert traj.index_at(0.21) == 2
        assert traj.at(0.4) is traj.states[4]
        with pytest.raises(ValueError):
            traj.append(0.1, body)
