"""Relative energy, remainder terms, regime bookkeeping, stability audit."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigidflow import BodyState, FluidParams, FluidState, NumericError, UniformGrid
from rigidflow.energy import (
    EnergyReport,
    RegimeBounds,
    RemainderTerms,
    _cumtrapz,
    body_relative_energy,
    budget_violation,
    fluid_cell_mask,
    i1_body,
    interior,
    pressure_distance,
    relative_dissipation_rate,
    relative_energy,
    remainder,
    stability_monitor,
)
from rigidflow.grids import pad_noslip, pad_scalar
from rigidflow.transform import PulledBack


def _body(center=(0.5, 0.5, 0.5), velocity=(0.0, 0.0, 0.0), spin=(0.0, 0.0, 0.0),
          m=1.0, j=None):
    return BodyState(m=m, J0=0.01 * np.eye(3) if j is None else j,
                     X=np.asarray(center, float), V=np.asarray(velocity, float),
                     O=np.eye(3), w=np.asarray(spin, float))


def _pulled_from(state: FluidState, body: BodyState, j1=None) -> PulledBack:
    """Pulled-back pair that is identically the given state and body."""
    return PulledBack(r=pad_scalar(state.rho), u=pad_noslip(state.u),
                      v_s=body.V.copy(), w_s=body.w.copy(), o_tilde=np.eye(3),
                      j1=body.world_inertia() if j1 is None else j1)


def _smooth_state(grid: UniformGrid, amp=0.05) -> FluidState:
    c = grid.centers()
    x, y, z = c[..., 0], c[..., 1], c[..., 2]
    rho = 1.0 + amp * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y) * np.sin(2 * np.pi * z)
    env = (np.sin(np.pi * x) * np.sin(np.pi * y) * np.sin(np.pi * z)) ** 2
    u = amp * env[..., None] * np.stack(
        [np.sin(2 * np.pi * y), np.cos(2 * np.pi * z), np.sin(2 * np.pi * x)], axis=-1)
    return FluidState(grid, rho, u)


class TestPressureDistance:
    @given(st.floats(0.2, 5.0), st.floats(0.2, 5.0))
    @settings(max_examples=60, deadline=None)
    def test_nonnegative(self, rho, r):
        d = pressure_distance(FluidParams(), np.array([rho]), np.array([r]))
        assert d[0] >= 0.0

    def test_zero_on_diagonal(self):
        r = np.linspace(0.3, 3.0, 17)
        assert np.abs(pressure_distance(FluidParams(), r, r)).max() == 0.0

    def test_quadratic_expansion(self):
        params = FluidParams()
        r = np.array([1.3])
        delta = 1e-4
        d = pressure_distance(params, r + delta, r)[0]
        curvature = params.d2_pressure_potential(r)[0]
        assert abs(d / (0.5 * curvature * delta ** 2) - 1.0) < 1e-2

    def test_rejects_nonpositive_reference(self):
        with pytest.raises(ValueError):
            pressure_distance(FluidParams(), np.array([1.0]), np.array([0.0]))


class TestRelativeEnergy:
    def test_self_distance_is_zero(self):
        grid = UniformGrid(16)
        state = _smooth_state(grid)
        body = _body(velocity=(0.1, 0.0, 0.2), spin=(0.0, 1.0, 0.0))
        rel = relative_energy(state, body, _pulled_from(state, body), FluidParams(), 0.12)
        assert rel.kinetic == 0.0 and rel.pressure == 0.0 and rel.body == 0.0
        assert rel.total == 0.0

    def test_kinetic_and_body_closed_form(self):
        grid = UniformGrid(16)
        rho0, a, b = 1.2, np.array([0.3, 0.0, -0.1]), np.array([0.1, 0.2, 0.0])
        state = FluidState(grid, np.full((16,) * 3, rho0),
                           np.tile(a, (16, 16, 16, 1)))
        body = _body(velocity=(0.5, 0.0, 0.0), spin=(0.0, 0.0, 2.0))
        j1 = 0.004 * np.eye(3)
        pulled = PulledBack(r=np.full((18,) * 3, rho0),
                            u=np.tile(b, (18, 18, 18, 1)),
                            v_s=np.array([0.1, 0.0, 0.0]),
                            w_s=np.array([0.0, 0.0, 1.0]),
                            o_tilde=np.eye(3), j1=j1)
        radius = 0.12
        rel = relative_energy(state, body, pulled, FluidParams(), radius)
        mask = fluid_cell_mask(grid, body, radius)
        vol_fluid = mask.sum() * grid.cell_volume
        ke = 0.5 * rho0 * np.sum((a - b) ** 2) * vol_fluid
        dv, dw = body.V - pulled.v_s, body.w - pulled.w_s
        body_e = 0.5 * body.m * dv @ dv + 0.5 * dw @ j1 @ dw
        assert abs(rel.kinetic - ke) < 1e-13
        assert rel.pressure == 0.0
        assert abs(rel.body - body_e) < 1e-15
        assert abs(body_relative_energy(body, pulled) - body_e) < 1e-15

    def test_uniform_pressure_distance(self):
        grid = UniformGrid(16)
        params = FluidParams()
        rho0, r0 = 1.4, 1.0
        state = FluidState(grid, np.full((16,) * 3, rho0), np.zeros((16, 16, 16, 3)))
        body = _body()
        pulled = PulledBack(r=np.full((18,) * 3, r0), u=np.zeros((18, 18, 18, 3)),
                            v_s=np.zeros(3), w_s=np.zeros(3), o_tilde=np.eye(3),
                            j1=0.01 * np.eye(3))
        rel = relative_energy(state, body, pulled, params, 0.12)
        mask = fluid_cell_mask(grid, body, 0.12)
        per_cell = (params.pressure_potential(np.array([rho0]))
                    - params.pressure_potential(np.array([r0]))
                    - params.d_pressure_potential(np.array([r0])) * (rho0 - r0))[0]
        assert abs(rel.pressure - per_cell * mask.sum() * grid.cell_volume) < 1e-12

    def test_rejects_nonpositive_pulled_density(self):
        grid = UniformGrid(16)
        state = FluidState.quiescent(grid)
        body = _body()
        pulled = PulledBack(r=np.full((18,) * 3, -1.0), u=np.zeros((18, 18, 18, 3)),
                            v_s=np.zeros(3), w_s=np.zeros(3), o_tilde=np.eye(3),
                            j1=0.01 * np.eye(3))
        with pytest.raises(NumericError):
            relative_energy(state, body, pulled, FluidParams(), 0.12)


def _i1_quadrature(body: BodyState, pulled: PulledBack, a, b, radius, res=64):
    """Lattice quadrature of rho_b (dtU + u . grad U) . (U - u) over the ball.

    U is the rigid comparison field carried by the moving reference body, so
    its Eulerian time derivative picks up -w_s x V1 from the center motion;
    that term cancels against the advection of the body velocity field.
    """
    xs = (np.arange(res) + 0.5) / res * (2 * radius) - radius
    g = np.stack(np.meshgrid(xs, xs, xs, indexing="ij"), axis=-1).reshape(-1, 3)
    r = g[(g ** 2).sum(axis=1) <= radius ** 2]
    volel = (2.0 * radius / res) ** 3
    rho_b = body.m / (4.0 / 3.0 * np.pi * radius ** 3)
    dt_u = a + np.cross(b, r) - np.cross(pulled.w_s, body.V)
    u1 = body.V + np.cross(body.w, r)
    adv = np.cross(pulled.w_s, u1)
    dv = pulled.v_s - body.V
    diff = dv + np.cross(pulled.w_s - body.w, r)
    return rho_b * float(np.einsum("pi,pi->p", dt_u + adv, diff).sum()) * volel


class TestBodyRemainderTerm:
    def test_closed_form_matches_ball_quadrature(self):
        radius = 0.15
        m = 2.0 * (4.0 / 3.0) * np.pi * radius ** 3
        j = (2.0 / 5.0) * m * radius ** 2 * np.eye(3)
        body = _body(velocity=(0.4, -0.2, 0.1), spin=(0.3, 1.1, -0.5), m=m, j=j)
        pulled = PulledBack(r=np.ones((4, 4, 4)), u=np.zeros((4, 4, 4, 3)),
                            v_s=np.array([0.55, -0.1, 0.2]),
                            w_s=np.array([0.1, 0.8, -0.9]),
                            o_tilde=np.eye(3), j1=j)
        a = np.array([0.7, 0.2, -0.3])
        b = np.array([-0.4, 0.9, 0.6])
        closed = i1_body(body, pulled, a, b)
        quad = _i1_quadrature(body, pulled, a, b, radius)
        assert abs(closed - quad) < 0.02 * max(abs(closed), abs(quad))

    def test_vanishes_for_matched_rates(self):
        body = _body(velocity=(0.3, 0.0, 0.0), spin=(0.0, 0.0, 1.0))
        pulled = PulledBack(r=np.ones((4, 4, 4)), u=np.zeros((4, 4, 4, 3)),
                            v_s=body.V.copy(), w_s=body.w.copy(),
                            o_tilde=np.eye(3), j1=body.world_inertia())
        assert i1_body(body, pulled, np.zeros(3), np.zeros(3)) == 0.0


class TestRemainder:
    def test_degenerate_twin_has_zero_remainder(self):
        grid = UniformGrid(16)
        state = _smooth_state(grid)
        body = _body(velocity=(0.1, 0.0, 0.0), spin=(0.0, 0.0, 0.5))
        pulled = _pulled_from(state, body)
        zero_s = np.zeros((18, 18, 18))
        zero_v = np.zeros((18, 18, 18, 3))
        terms = remainder(state, body, pulled, FluidParams(), 0.12,
                          dt_u_s=zero_v, dt_pprime=zero_s,
                          dvs_dt=np.zeros(3), dws_dt=np.zeros(3))
        assert terms.total == 0.0
        assert terms.as_tuple() == (0.0,) * 7

    def test_i4_linear_in_rate(self):
        grid = UniformGrid(16)
        state = _smooth_state(grid)
        body = _body()
        pulled = _pulled_from(state, body)
        rate = np.ones((18, 18, 18))
        base = remainder(state, body, pulled, FluidParams(), 0.12,
                         dt_u_s=np.zeros((18, 18, 18, 3)), dt_pprime=rate,
                         dvs_dt=np.zeros(3), dws_dt=np.zeros(3))
        double = remainder(state, body, pulled, FluidParams(), 0.12,
                           dt_u_s=np.zeros((18, 18, 18, 3)), dt_pprime=2.0 * rate,
                           dvs_dt=np.zeros(3), dws_dt=np.zeros(3))
        # r == rho here, so i4 = int (r - rho) dt_pprime = 0 regardless
        assert base.i4 == 0.0 and double.i4 == 0.0
        shifted = PulledBack(r=pulled.r + 0.1, u=pulled.u, v_s=pulled.v_s,
                             w_s=pulled.w_s, o_tilde=pulled.o_tilde, j1=pulled.j1)
        one = remainder(state, body, shifted, FluidParams(), 0.12,
                        dt_u_s=np.zeros((18, 18, 18, 3)), dt_pprime=rate,
                        dvs_dt=np.zeros(3), dws_dt=np.zeros(3))
        two = remainder(state, body, shifted, FluidParams(), 0.12,
                        dt_u_s=np.zeros((18, 18, 18, 3)), dt_pprime=2.0 * rate,
                        dvs_dt=np.zeros(3), dws_dt=np.zeros(3))
        assert abs(two.i4 - 2.0 * one.i4) < 1e-12 * max(1.0, abs(one.i4))
        mask = fluid_cell_mask(grid, body, 0.12)
        assert abs(one.i4 - 0.1 * mask.sum() * grid.cell_volume) < 1e-12


class TestRelativeDissipation:
    def test_zero_for_identical_fields(self):
        grid = UniformGrid(16)
        state = _smooth_state(grid)
        body = _body()
        assert relative_dissipation_rate(state, _pulled_from(state, body), body,
                                         FluidParams(), 0.12) == 0.0

    def test_compact_bump_matches_analytic_integral(self):
        # U = 0, u a compactly supported bump: the rate must reproduce the
        # analytic 2 mu |D|^2 + lam (div)^2 quadrature at second order
        grid = UniformGrid(32)
        c = grid.centers()
        x, y, z = c[..., 0], c[..., 1], c[..., 2]
        sx, sy, sz = (np.sin(np.pi * x), np.sin(np.pi * y), np.sin(np.pi * z))
        phi = (sx * sy * sz) ** 4
        u = np.zeros(c.shape)
        u[..., 0] = 0.1 * phi
        state = FluidState(grid, np.ones((32,) * 3), u)
        body = _body()
        params = FluidParams(mu=0.1, lam=0.05)
        pulled = PulledBack(r=np.ones((34,) * 3), u=np.zeros((34, 34, 34, 3)),
                            v_s=np.zeros(3), w_s=np.zeros(3), o_tilde=np.eye(3),
                            j1=0.01 * np.eye(3))
        got = relative_dissipation_rate(state, pulled, body, params, 0.12)

        dphi = 4.0 * (sx * sy * sz) ** 3
        gx = 0.1 * dphi * np.pi * np.cos(np.pi * x) * sy * sz
        gy = 0.1 * dphi * np.pi * sx * np.cos(np.pi * y) * sz
        gz = 0.1 * dphi * np.pi * sx * sy * np.cos(np.pi * z)
        # D(u) for u = (f, 0, 0): Dxx = fx, Dxy = fy/2, Dxz = fz/2
        dsq = gx ** 2 + 0.5 * gy ** 2 + 0.5 * gz ** 2
        dens = 2.0 * params.mu * dsq + params.lam * gx ** 2
        mask = fluid_cell_mask(grid, body, 0.12)
        want = float(dens[mask].sum() * grid.cell_volume)
        assert abs(got - want) < 0.02 * want

    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=15, deadline=None)
    def test_nonnegative_and_symmetric(self, seed):
        grid = UniformGrid(8)
        rng = np.random.default_rng(seed)
        state = FluidState(grid, np.ones((8,) * 3), 0.1 * rng.standard_normal((8, 8, 8, 3)))
        body = _body(center=(0.5, 0.5, 0.5))
        pulled = PulledBack(r=np.ones((10,) * 3),
                            u=0.1 * rng.standard_normal((10, 10, 10, 3)),
                            v_s=np.zeros(3), w_s=np.zeros(3), o_tilde=np.eye(3),
                            j1=0.01 * np.eye(3))
        rate = relative_dissipation_rate(state, pulled, body, FluidParams(), 0.12)
        assert rate >= 0.0
        # swap: quadratic form in the difference of gradients. The padding
        # routes differ (no-slip for the state, raw ghosts for the pulled
        # field), so swap only after moving both into the same route.
        state2 = FluidState(grid, np.ones((8,) * 3), interior(pulled.u).copy())
        pulled2 = PulledBack(r=pulled.r, u=pad_noslip(state.u), v_s=pulled.v_s,
                             w_s=pulled.w_s, o_tilde=pulled.o_tilde, j1=pulled.j1)
        rate2 = relative_dissipation_rate(state2, pulled2, body, FluidParams(), 0.12)
        # not exactly equal: state2 goes through no-slip padding while the
        # original pulled.u carried its own ghosts
        assert rate2 >= 0.0


class TestRegimeBounds:
    def test_envelope_and_fractions(self):
        reg = RegimeBounds()
        mask = np.ones((4, 4, 4), dtype=bool)
        reg.update(np.full((4, 4, 4), 2.0), mask)
        reg.update(np.full((4, 4, 4), 1.0), mask)
        assert reg.r_minus == 1.0 and reg.r_plus == 2.0
        rho = np.full((4, 4, 4), 1.5)
        rho[0, 0, 0] = 0.4    # below r_minus / 2
        rho[0, 0, 1] = 5.0    # above 2 r_plus
        rho[0, 0, 2] = 0.5    # exactly the lower cut: counted small
        s1, s2, s3 = reg.fractions(rho, mask)
        total = rho.size
        assert s2 == 2.0 / total and s3 == 1.0 / total
        assert abs(s1 + s2 + s3 - 1.0) < 1e-15

    def test_mask_excludes_cells(self):
        reg = RegimeBounds()
        mask = np.zeros((4, 4, 4), dtype=bool)
        mask[2:, :, :] = True
        reg.update(np.full((4, 4, 4), 1.0), mask)
        s1, s2, s3 = reg.fractions(np.full((4, 4, 4), 1.0), mask)
        assert s1 == 0.5 and s2 == 0.0 and s3 == 0.0

    def test_guards(self):
        reg = RegimeBounds()
        with pytest.raises(ValueError):
            reg.fractions(np.ones((2, 2, 2)), np.ones((2, 2, 2), dtype=bool))
        with pytest.raises(NumericError):
            reg.update(np.zeros((2, 2, 2)), np.ones((2, 2, 2), dtype=bool))
        reg.update(np.ones((2, 2, 2)), np.zeros((2, 2, 2), dtype=bool))  # no-op
        with pytest.raises(ValueError):
            reg.fractions(np.ones((2, 2, 2)), np.ones((2, 2, 2), dtype=bool))


def _report(t, e_rel, rem_total, rdiss=0.0, e_total=1.0, diss=0.0):
    terms = RemainderTerms(i1f=rem_total, i1b=0.0, i2=0.0, i3=0.0, i4=0.0,
                           i5=0.0, i6=0.0)
    return EnergyReport(t=t, e_total=e_total, dissipation=diss, e_rel=e_rel,
                        e_rel_kinetic=e_rel, e_rel_pressure=0.0, e_rel_body=0.0,
                        terms=terms, rel_dissipation_rate=rdiss,
                        pressure_distance_integral=0.0,
                        regime_fractions=(1.0, 0.0, 0.0))


class TestStabilityMonitor:
    def test_exponential_growth_obeys_envelope(self):
        lam, e0 = 2.0, 1e-6
        ts = np.linspace(0.0, 0.5, 21)
        reports = [_report(t, e0 * np.exp(lam * t), 1.05 * lam * e0 * np.exp(lam * t))
                   for t in ts]
        rep = stability_monitor(reports, tol_abs=1e-9)
        assert rep.gronwall_ok
        assert rep.max_rei_residual <= 0.0
        assert np.abs(rep.h_fit - 1.05 * lam).max() < 1e-12

    def test_envelope_violation_flags(self):
        ts = np.linspace(0.0, 0.5, 11)
        reports = [_report(t, 1e-6 * (1.0 + 100.0 * t), 0.0) for t in ts]
        rep = stability_monitor(reports, tol_abs=1e-9)
        assert not rep.gronwall_ok
        assert rep.max_rei_residual > 0.0

    def test_requires_three_snapshots(self):
        with pytest.raises(ValueError):
            stability_monitor([_report(0.0, 1.0, 0.0), _report(0.1, 1.0, 0.0)], 1e-9)

    def test_cumtrapz_matches_trapezoid(self):
        t = np.linspace(0.0, 1.0, 33)
        y = np.sin(3.0 * t) + 0.2
        out = _cumtrapz(y, t)
        assert out[0] == 0.0
        assert abs(out[-1] - np.trapezoid(y, t)) < 1e-14


class TestBudget:
    def test_exact_budget_is_zero(self):
        reports = [_report(t, 0.0, 0.0, e_total=1.0 - 0.3 * t, diss=0.3 * t)
                   for t in np.linspace(0.0, 1.0, 5)]
        assert budget_violation(reports) == 0.0

    def test_undershoot_floors_overshoot_positive(self):
        # the t = 0 report contributes exactly zero, so a dissipative
        # undershoot cannot mask a later overshoot
        under = [_report(0.0, 0.0, 0.0, e_total=1.0, diss=0.0),
                 _report(1.0, 0.0, 0.0, e_total=0.5, diss=0.3)]
        over = [_report(0.0, 0.0, 0.0, e_total=1.0, diss=0.0),
                _report(0.5, 0.0, 0.0, e_total=0.6, diss=0.2),
                _report(1.0, 0.0, 0.0, e_total=0.9, diss=0.2)]
        assert budget_violation(under) == 0.0
        assert budget_violation(over) == pytest.approx(0.1)

    def test_rejects_nonpositive_initial_energy(self):
        with pytest.raises(ValueError):
            budget_violation([_report(0.0, 0.0, 0.0, e_total=0.0)])
