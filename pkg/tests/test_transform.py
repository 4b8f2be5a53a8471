"""Change-of-frame machinery: cutoffs, flow maps, composition, sources."""

import dataclasses

import numpy as np
import pytest

from rigidflow import (
    Ball,
    BodyState,
    CutoffSpec,
    FlowMap,
    FluidParams,
    FluidState,
    TransformError,
    UniformGrid,
    assemble_tensors,
    blend_mollified,
    blended_velocity,
    check_margins,
    compose_maps,
    cutoff_value,
    identity_residual,
    lemma31_ratios,
    map_deviation_norms,
    padded_labels,
    pull_back,
    round_trip_error,
    source_f,
    source_g,
)
from rigidflow.transform import PulledBack


def _rz(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _body(center, velocity=(0.0, 0.0, 0.0), spin=(0.0, 0.0, 0.0), orientation=None):
    return BodyState(m=1.0, J0=0.01 * np.eye(3), X=np.asarray(center, float),
                     V=np.asarray(velocity, float),
                     O=np.eye(3) if orientation is None else orientation,
                     w=np.asarray(spin, float))


# narrow cutoff so the machinery fits on a 16-cell grid; the grid-tied
# default needs 10h of wall gap, which only exists from n = 32 up
SPEC16 = CutoffSpec(0.06, 0.12, 0.05)
RADIUS = 0.12


class TestCutoff:
    def test_for_grid_defaults(self):
        grid = UniformGrid(32)
        spec = CutoffSpec.for_grid(grid)
        h = grid.h
        assert spec.eps_in == 2.0 * h and spec.width == 6.0 * h and spec.eps_out == 2.0 * h
        assert spec.reach == 8.0 * h

    def test_rejects_nonpositive_margins(self):
        with pytest.raises(ValueError):
            CutoffSpec(0.0, 0.1, 0.1)
        with pytest.raises(ValueError):
            CutoffSpec(0.1, -0.1, 0.1)

    def test_check_margins(self):
        check_margins(SPEC16, Ball(np.array([0.5, 0.5, 0.5]), RADIUS))
        with pytest.raises(TransformError):
            check_margins(SPEC16, Ball(np.array([0.3, 0.5, 0.5]), 0.15))

    def test_cutoff_profile(self):
        ball = Ball(np.array([0.5, 0.5, 0.5]), RADIUS)
        rr = np.linspace(0.0, 0.38, 80)
        pts = np.array([0.5, 0.5, 0.5]) + rr[:, None] * np.array([1.0, 0.0, 0.0])
        zeta = cutoff_value(SPEC16, ball, pts)
        inside = rr <= RADIUS + SPEC16.eps_in
        outside = rr >= RADIUS + SPEC16.reach
        assert np.abs(zeta[inside] - 1.0).max() < 1e-14
        assert np.abs(zeta[outside]).max() < 1e-14
        assert (np.diff(zeta) <= 1e-14).all()

    def test_blended_velocity_limits(self):
        center = np.array([0.5, 0.5, 0.5])
        v, w = np.array([0.3, -0.1, 0.2]), np.array([0.0, 0.0, 2.0])
        rng = np.random.default_rng(7)
        dirs = rng.standard_normal((200, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = center + rng.uniform(0.0, RADIUS + SPEC16.eps_in, (200, 1)) * dirs
        got = blended_velocity(center, v, w, RADIUS, SPEC16, pts)
        rigid = v + np.cross(w, pts - center)
        assert np.abs(got - rigid).max() < 1e-14
        far = center + np.array([[0.45, 0.0, 0.0], [0.0, -0.45, 0.1]])
        assert np.abs(blended_velocity(center, v, w, RADIUS, SPEC16, far)).max() == 0.0


class TestFlowMap:
    def test_rest_body_is_exact_identity(self):
        grid = UniformGrid(16)
        fm = FlowMap(grid, _body((0.5, 0.5, 0.5)), RADIUS, SPEC16)
        for _ in range(5):
            fm.advance(_body((0.5, 0.5, 0.5)), 0.01)
        assert np.array_equal(fm.z, fm.labels)
        pts = np.random.default_rng(0).uniform(0.2, 0.8, (50, 3))
        assert np.abs(fm.value(pts) - pts).max() < 1e-14
        assert np.abs(fm.gradient(pts) - np.eye(3)).max() < 1e-12

    def _advanced_map(self, steps=8, dt=0.01):
        grid = UniformGrid(16)
        v = np.array([0.5, 0.2, 0.0])
        wz = 1.5
        x0 = np.array([0.45, 0.5, 0.5])
        fm = FlowMap(grid, _body(x0, v, (0.0, 0.0, wz)), RADIUS, SPEC16)
        for k in range(1, steps + 1):
            t = k * dt
            fm.advance(_body(x0 + t * v, v, (0.0, 0.0, wz), _rz(wz * t)), dt)
        return fm, x0, v, wz, steps * dt

    def test_rigid_zone_moves_rigidly(self):
        fm, x0, v, wz, t = self._advanced_map()
        # trilinear of the exact rigid lattice data is exact on affine maps
        assert np.abs(fm.value(x0) - (x0 + t * v)).max() < 1e-13
        probe = x0 + np.array([0.5 * RADIUS, 0.0, 0.0])
        target = x0 + t * v + _rz(wz * t) @ np.array([0.5 * RADIUS, 0.0, 0.0])
        assert np.abs(fm.value(probe) - target).max() < 1e-13
        # label set of the rigid zone is invariant: distances preserved
        sd0 = Ball(x0, RADIUS).signed_distance(fm.labels[fm.rigid])
        sd1 = fm.body.ball(RADIUS).signed_distance(fm.z[fm.rigid])
        assert np.abs(sd0 - sd1).max() < 1e-12

    def test_far_nodes_never_move(self):
        fm, x0, v, wz, t = self._advanced_map()
        sd = Ball(x0, RADIUS).signed_distance(fm.labels.reshape(-1, 3))
        far = (sd > SPEC16.reach + 0.75 * t).reshape(fm.labels.shape[:3])
        assert np.array_equal(fm.z[far], fm.labels[far])

    def test_invert_round_trip(self):
        fm, _, _, _, _ = self._advanced_map()
        rng = np.random.default_rng(3)
        pts = rng.uniform(0.15, 0.85, (400, 3))
        y = fm.invert(pts)
        assert np.abs(fm.value(y) - pts).max() < 1e-11
        # and the other way, through lattice images of interior labels
        interior = fm.labels[4:-4, 4:-4, 4:-4].reshape(-1, 3)
        images = fm.value(interior)
        assert np.abs(fm.invert(images) - interior).max() < 1e-9

    def test_margin_violation_raises(self):
        grid = UniformGrid(16)
        fm = FlowMap(grid, _body((0.5, 0.5, 0.5), (2.0, 0.0, 0.0)), RADIUS, SPEC16)
        with pytest.raises(TransformError):
            fm.advance(_body((0.9, 0.5, 0.5), (2.0, 0.0, 0.0)), 0.2)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_trajectory_raises(self):
        grid = UniformGrid(16)
        fm = FlowMap(grid, _body((0.5, 0.5, 0.5)), RADIUS, SPEC16)
        with pytest.raises(TransformError):
            fm.advance(_body((0.5, 0.5, 0.5), (np.inf, 0.0, 0.0)), 0.01)


def _twin_maps(delta_v=0.0, steps=6, dt=0.01):
    """Two maps from the same start, trajectories differing by delta_v in V_x."""
    grid = UniformGrid(16)
    x0 = np.array([0.5, 0.5, 0.5])
    v1 = np.array([0.4, 0.0, 0.1])
    v2 = v1 + np.array([delta_v, 0.0, 0.0])
    w1, w2 = 1.2, 1.2 + 5.0 * delta_v
    m1 = FlowMap(grid, _body(x0, v1, (0.0, 0.0, w1)), RADIUS, SPEC16)
    m2 = FlowMap(grid, _body(x0, v2, (0.0, 0.0, w2)), RADIUS, SPEC16)
    for k in range(1, steps + 1):
        t = k * dt
        m1.advance(_body(x0 + t * v1, v1, (0.0, 0.0, w1), _rz(w1 * t)), dt)
        m2.advance(_body(x0 + t * v2, v2, (0.0, 0.0, w2), _rz(w2 * t)), dt)
    return m1, m2


class TestCompose:
    def test_rejects_mismatched_lattices_and_times(self):
        b = _body((0.5, 0.5, 0.5))
        m1 = FlowMap(UniformGrid(16), b, RADIUS, SPEC16)
        m2 = FlowMap(UniformGrid(8), b, RADIUS, SPEC16)
        with pytest.raises(ValueError):
            compose_maps(m1, m2)
        m3 = FlowMap(UniformGrid(16), b, RADIUS, SPEC16)
        m3.advance(b, 0.01)
        with pytest.raises(ValueError):
            compose_maps(m1, m3)

    def test_identical_trajectories_compose_to_identity(self):
        m1, m2 = _twin_maps(0.0)
        cm = compose_maps(m1, m2)
        assert np.abs(cm.zt2 - m1.labels).max() < 1e-10
        assert np.abs(cm.zt1 - m1.labels).max() < 1e-10
        assert np.abs(cm.o_tilde - np.eye(3)).max() < 1e-13
        assert np.abs(cm.dtz).max() < 1e-9
        assert np.abs(cm.v_s - m2.body.V).max() < 1e-13
        assert np.abs(cm.w_s - m2.body.w).max() < 1e-13

    def test_round_trip_on_diverged_pair(self):
        m1, m2 = _twin_maps(0.05)
        pts = np.random.default_rng(11).uniform(0.2, 0.8, (300, 3))
        assert round_trip_error(m1, m2, pts) < 1e-9

    def test_rigid_zone_composition_is_exact_isometry(self):
        m1, m2 = _twin_maps(0.05)
        cm = compose_maps(m1, m2)
        rel = m1.labels[cm.rigid1] - cm.body1.X
        exact = cm.body2.X + rel @ cm.o_tilde.T
        assert np.abs(cm.zt2[cm.rigid1] - exact).max() < 1e-13


class TestTensors:
    def test_identity_degeneracy(self):
        m1, m2 = _twin_maps(0.0)
        cm = compose_maps(m1, m2)
        tens = assemble_tensors(cm)
        assert np.abs(tens.hmat - np.eye(3)).max() < 1e-8
        assert np.abs(tens.gmat - np.eye(3)).max() < 1e-8
        assert np.abs(tens.det - 1.0).max() < 1e-8
        assert np.abs(tens.gamma).max() < 1e-6
        assert np.abs(tens.dtgradz).max() < 1e-7

    def test_rigid_zone_values_exact(self):
        m1, m2 = _twin_maps(0.05)
        cm = compose_maps(m1, m2)
        tens = assemble_tensors(cm)
        m = cm.rigid1
        assert np.abs(tens.det[m] - 1.0).max() == 0.0
        assert np.abs(tens.hmat[m] - cm.o_tilde.T).max() == 0.0
        assert np.abs(tens.gamma[m]).max() == 0.0

    def test_determinant_floor(self):
        m1, m2 = _twin_maps(0.0)
        cm = compose_maps(m1, m2)
        crushed = dataclasses.replace(cm, jac=1e-3 * cm.jac)
        with pytest.raises(TransformError):
            assemble_tensors(crushed)

    def test_sources_vanish_at_identity(self):
        m1, m2 = _twin_maps(0.0)
        cm = compose_maps(m1, m2)
        tens = assemble_tensors(cm)
        grid, h = cm.grid, cm.grid.h
        lab = padded_labels(grid)
        r = 1.0 + 0.01 * np.sin(2 * np.pi * lab[..., 0]) * np.sin(2 * np.pi * lab[..., 1])
        u = 0.05 * np.stack([np.sin(2 * np.pi * lab[..., 1]),
                             np.cos(2 * np.pi * lab[..., 2]),
                             np.sin(2 * np.pi * lab[..., 0])], axis=-1)
        g = source_g(tens, r, h)
        f, terms = source_f(tens, r, u, FluidParams(), h)
        assert np.abs(g).max() < 1e-8
        assert np.abs(f).max() < 1e-5
        assert terms.shape[0] == 11

    def test_flip_term_changes_total(self):
        m1, m2 = _twin_maps(0.05)
        cm = compose_maps(m1, m2)
        tens = assemble_tensors(cm)
        lab = padded_labels(cm.grid)
        r = 1.0 + 0.05 * np.cos(2 * np.pi * lab[..., 2])
        u = 0.1 * np.stack([lab[..., 1] * (1 - lab[..., 1]),
                            np.sin(np.pi * lab[..., 0]),
                            np.cos(np.pi * lab[..., 1])], axis=-1)
        total, terms = source_f(tens, r, u, FluidParams(), cm.grid.h)
        flipped, _ = source_f(tens, r, u, FluidParams(), cm.grid.h, flip_term=5)
        assert np.abs(flipped - (total - 2.0 * terms[4])).max() < 1e-13
        with pytest.raises(ValueError):
            source_f(tens, r, u, FluidParams(), cm.grid.h, flip_term=12)


class TestPullBack:
    def test_constant_state_passes_through(self):
        m1, m2 = _twin_maps(0.05)
        cm = compose_maps(m1, m2)
        tens = assemble_tensors(cm)
        state2 = FluidState.quiescent(cm.grid, rho0=1.3)
        pulled = pull_back(cm, tens, state2, m2.body)
        assert np.abs(pulled.r - 1.3).max() < 1e-12
        assert np.abs(pulled.u).max() == 0.0
        assert np.abs(pulled.v_s - cm.o_tilde.T @ m2.body.V).max() < 1e-14

    def test_rigid_interior_maps_to_reference_rigid_field(self):
        m1, m2 = _twin_maps(0.05)
        cm = compose_maps(m1, m2)
        tens = assemble_tensors(cm)
        b2 = m2.body

        def u_fn(pts):
            return b2.V + np.cross(b2.w, pts - b2.X)

        state2 = FluidState.from_functions(cm.grid, lambda p: np.ones(p.shape[:-1]), u_fn)
        pulled = pull_back(cm, tens, state2, b2)
        m = cm.rigid1
        rigid_ref = pulled.v_s + np.cross(pulled.w_s, m1.labels[m] - cm.body1.X)
        assert np.abs(pulled.u[m] - rigid_ref).max() < 1e-11

    def test_blend_mollified_bands(self):
        grid = UniformGrid(16)
        lab = padded_labels(grid)
        body1 = _body((0.5, 0.5, 0.5))
        v_s, w_s = np.array([0.2, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
        u = np.tile(np.array([0.0, 0.7, 0.0]), lab.shape[:3] + (1,))
        pulled = PulledBack(r=np.ones(lab.shape[:3]), u=u, v_s=v_s, w_s=w_s,
                            o_tilde=np.eye(3), j1=0.01 * np.eye(3))
        eps = 0.08
        blended = blend_mollified(pulled, body1, RADIUS, eps, lab)
        sd = Ball(body1.X, RADIUS).signed_distance(lab.reshape(-1, 3)).reshape(lab.shape[:3])
        rigid = v_s + np.cross(w_s, lab - body1.X)
        near = sd <= eps
        far = sd >= 2.0 * eps
        assert np.abs(blended[near] - rigid[near]).max() < 1e-14
        assert np.abs(blended[far] - u[far]).max() == 0.0


class TestDeviationsAndRatios:
    def test_identity_norms_collapse(self):
        m1, m2 = _twin_maps(0.0)
        cm = compose_maps(m1, m2)
        norms = map_deviation_norms(cm)
        assert norms["z2_dev"] < 1e-11 and norms["z1_dev"] < 1e-11
        assert norms["z2_grad_dev"] < 1e-9
        assert norms["dtz2"] < 1e-9

    def test_identity_ratios_degenerate_to_zero(self):
        m1, m2 = _twin_maps(0.0)
        cm = compose_maps(m1, m2)
        ratios = lemma31_ratios(cm, 0.0)
        assert ratios.finite()
        assert ratios.r_surface_dev == 0.0
        assert ratios.r_w3inf == 0.0 and ratios.r_w3inf_inv == 0.0
        assert ratios.identity_residual < 1e-13

    def test_moved_pair_with_zero_rates_is_flagged_infinite(self):
        # genuinely separated trajectories with a claimed-zero rate history
        # must produce an honest inf, not a silent zero
        m1, m2 = _twin_maps(0.05)
        cm = compose_maps(m1, m2)
        ratios = lemma31_ratios(cm, 0.0)
        assert not ratios.finite()
        assert ratios.r_surface_dev == float("inf")

    def test_ratios_finite_on_perturbed_pair(self):
        m1, m2 = _twin_maps(0.05, steps=6, dt=0.01)
        cm = compose_maps(m1, m2)
        # crude but honest l2 accumulation for the prescribed trajectories
        dv = np.linalg.norm(m2.body.V - m1.body.V)
        dw = np.linalg.norm(m2.body.w - m1.body.w)
        l2 = np.sqrt((dv ** 2 + dw ** 2) * 0.06)
        ratios = lemma31_ratios(cm, float(l2))
        assert ratios.finite()
        assert ratios.r_surface_dev > 0.0
        assert ratios.r_dt_w1inf > 0.0

    def test_identity_residual_closed_form(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            o1 = _rz(rng.uniform(0, 2 * np.pi)) @ _rot_x(rng.uniform(0, np.pi))
            o2 = _rz(rng.uniform(0, 2 * np.pi)) @ _rot_x(rng.uniform(0, np.pi))
            b1 = _body((0.5, 0.5, 0.5), spin=rng.standard_normal(3), orientation=o1)
            b2 = _body((0.5, 0.5, 0.5), spin=rng.standard_normal(3), orientation=o2)
            assert identity_residual(b1, b2) < 1e-13

    def test_identity_residual_finite_difference(self):
        # forward-difference o_tilde in time along exact spinning motions and
        # compare with the algebraic form: discrepancy must shrink like dt
        w1, w2 = np.array([0.0, 0.0, 1.1]), np.array([0.0, 0.0, -0.7])
        errs = []
        for dt in (1e-3, 5e-4):
            t = 0.3
            o1a, o1b = _rz(w1[2] * t), _rz(w1[2] * (t + dt))
            o2a, o2b = _rz(w2[2] * t), _rz(w2[2] * (t + dt))
            ot_a, ot_b = o2a @ o1a.T, o2b @ o1b.T
            dot_fd = (ot_b - ot_a) / dt
            dw = ot_a.T @ w2 - w1
            from rigidflow.kinematics import skew
            errs.append(np.abs(ot_a.T @ dot_fd - skew(dw)).max())
        assert errs[0] < 5e-3
        assert errs[1] < 0.6 * errs[0]


def _rot_x(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
