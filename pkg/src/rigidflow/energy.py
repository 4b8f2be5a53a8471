"""Relative energy between a run and a pulled-back comparison solution.

Everything here is a pure reduction over one time level: the Bregman
pressure distance, the relative energy split into fluid kinetic, pressure
and body parts, the seven-term remainder driving its growth, the running
density-regime bounds, and the post-run stability monitor that audits the
relative energy inequality and fits the Gronwall rate.

Weak-run fields arrive as cell arrays and are padded onto the same ghost
lattice the pulled-back fields live on, so that identical inputs cancel
bitwise in every difference the functionals take.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coupling import SurfaceMesh, icosphere
from .errors import NumericError
from .fluid import FluidParams, FluidState
from .grids import UniformGrid, d1, pad_noslip, pad_scalar, trilinear
from .kinematics import BodyState
from .transform import PulledBack, padded_labels

Array = np.ndarray

H_FIT_FLOOR = 1e-14


def interior(f: Array) -> Array:
    """Strip the ghost shell of a padded lattice field."""
    return f[1:-1, 1:-1, 1:-1]


def pressure_distance(params: FluidParams, rho: Array, r: Array) -> Array:
    """Bregman distance of the pressure potential, pointwise >= 0."""
    rho = np.asarray(rho, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise ValueError("comparison density must be positive")
    return (params.pressure_potential(rho) - params.pressure_potential(r)
            - params.d_pressure_potential(r) * (rho - r))


def fluid_cell_mask(grid: UniformGrid, body: BodyState, radius: float) -> Array:
    """True on cell centers strictly outside the ball."""
    pts = grid.centers().reshape(-1, 3)
    return (body.ball(radius).signed_distance(pts) > 0.0).reshape((grid.n,) * 3)


def _padded_velocity_gradient(u_pad: Array, h: float) -> Array:
    # [..., a, i] = d_a u_i on the padded lattice
    return np.stack([d1(u_pad, h, a) for a in range(3)], axis=-2)


@dataclass(frozen=True)
class RelativeEnergy:
    kinetic: float
    pressure: float
    body: float

    @property
    def total(self) -> float:
        return self.kinetic + self.pressure + self.body


def body_relative_energy(body1: BodyState, pulled: PulledBack) -> float:
    """m/2 |V1 - v_s|^2 + (1/2) (w1 - w_s) . J1 (w1 - w_s)."""
    dv = body1.V - pulled.v_s
    dw = body1.w - pulled.w_s
    return float(0.5 * body1.m * dv @ dv + 0.5 * dw @ (pulled.j1 @ dw))


def relative_energy(state: FluidState, body1: BodyState, pulled: PulledBack,
                    params: FluidParams, radius: float) -> RelativeEnergy:
    """Relative energy of (state, body1) against the pulled-back pair.

    The kinetic and pressure integrals run over the fluid cells of frame 1.
    The body share of the kinetic integral is taken in its exact rigid form
    with the body mass and inertia rather than quadratured over the
    fictitious in-body grid density.
    """
    grid = state.grid
    mask = fluid_cell_mask(grid, body1, radius)
    r = interior(pulled.r)
    if np.any(r[mask] <= 0.0):
        raise NumericError("pulled-back density nonpositive on the fluid region")
    u_diff = state.u - interior(pulled.u)
    ke_density = 0.5 * state.rho * np.einsum("...i,...i->...", u_diff, u_diff)
    vol = grid.cell_volume
    return RelativeEnergy(
        kinetic=float(ke_density[mask].sum() * vol),
        pressure=float(pressure_distance(params, state.rho, r)[mask].sum() * vol),
        body=body_relative_energy(body1, pulled),
    )


@dataclass(frozen=True)
class RemainderTerms:
    i1f: float
    i1b: float
    i2: float
    i3: float
    i4: float
    i5: float
    i6: float

    @property
    def total(self) -> float:
        return self.i1f + self.i1b + self.i2 + self.i3 + self.i4 + self.i5 + self.i6

    def as_tuple(self) -> tuple[float, ...]:
        return (self.i1f, self.i1b, self.i2, self.i3, self.i4, self.i5, self.i6)


def i1_body(body1: BodyState, pulled: PulledBack, dvs_dt: Array, dws_dt: Array) -> float:
    """Body share of the acceleration remainder term, in closed form.

    Integrating rho (dU/dt + u . grad U) . (U - u) over the rigid ball with
    U, u the two rigid fields gives, after the odd moments drop out,

        m a.dv + b . J1 dw + w_s . K (w1 x dw),   K = tr(J1)/2 I - J1,

    with a = dV_s/dt, b = dw_s/dt, dv = V_s - V1, dw = w_s - w1. The lattice
    quadrature route lives in the tests and must agree at O(h^2).
    """
    dv = pulled.v_s - body1.V
    dw = pulled.w_s - body1.w
    j1 = pulled.j1
    kmat = 0.5 * np.trace(j1) * np.eye(3) - j1
    return float(body1.m * (np.asarray(dvs_dt) @ dv)
                 + np.asarray(dws_dt) @ (j1 @ dw)
                 + pulled.w_s @ (kmat @ np.cross(body1.w, dw)))


def remainder(state: FluidState, body1: BodyState, pulled: PulledBack,
              params: FluidParams, radius: float,
              dt_u_s: Array, dt_pprime: Array,
              dvs_dt: Array, dws_dt: Array,
              mesh: SurfaceMesh | None = None) -> RemainderTerms:
    """The seven remainder integrals at one time level.

    dt_u_s and dt_pprime are the caller's time derivatives of the pulled
    velocity and of P'(r) (finite differences across stored snapshots);
    dvs_dt, dws_dt the matching rates of the pulled body velocities. The
    surface term quadratures p(r)(u - U) . n over the body surface with the
    into-body normal convention shared with the coupling loads.
    """
    grid = state.grid
    h = grid.h
    vol = grid.cell_volume
    mask = fluid_cell_mask(grid, body1, radius)

    rho_pad = pad_scalar(state.rho)
    u_pad = pad_noslip(state.u)
    grad_u = _padded_velocity_gradient(u_pad, h)
    grad_us = _padded_velocity_gradient(pulled.u, h)

    rho = state.rho
    u = state.u
    r = interior(pulled.r)
    u_s = interior(pulled.u)
    du_si = interior(np.asarray(dt_u_s))
    gu = interior(grad_u)
    gus = interior(grad_us)

    def cell_sum(f: Array) -> float:
        return float(f[mask].sum() * vol)

    # rho (dtU + u . grad U) . (U - u) over the fluid cells
    adv = np.einsum("...a,...ai->...i", u, gus)
    i1f = cell_sum(rho * np.einsum("...i,...i->...", du_si + adv, u_s - u))

    i1b = i1_body(body1, pulled, dvs_dt, dws_dt)

    # S(grad U) : (grad U - grad u)
    tr_us = np.einsum("...aa->...", gus)
    s_us = params.mu * (gus + np.swapaxes(gus, -1, -2)) \
        + params.lam * tr_us[..., None, None] * np.eye(3)
    i2 = cell_sum(np.einsum("...ai,...ai->...", s_us, gus - gu))

    i3 = cell_sum(tr_us * (params.pressure(r) - params.pressure(rho)))

    i4 = cell_sum((r - rho) * interior(np.asarray(dt_pprime)))

    grad_pp = np.stack([d1(params.d_pressure_potential(pulled.r), h, a)
                        for a in range(3)], axis=-1)
    flux_diff = r[..., None] * u_s - rho[..., None] * u
    i5 = cell_sum(np.einsum("...i,...i->...", flux_diff, interior(grad_pp)))

    if mesh is None:
        mesh = icosphere(3)
    pts, normals, areas = mesh.placed(body1.X, radius)
    origin = -0.5 * h * np.ones(3)
    p_surf = params.pressure(trilinear(pulled.r, origin, h, pts))
    u_surf = trilinear(u_pad, origin, h, pts)
    us_surf = trilinear(pulled.u, origin, h, pts)
    i6 = float((areas * p_surf
                * np.einsum("fi,fi->f", u_surf - us_surf, normals)).sum())

    return RemainderTerms(i1f=i1f, i1b=i1b, i2=i2, i3=i3, i4=i4, i5=i5, i6=i6)


def relative_dissipation_rate(state: FluidState, pulled: PulledBack,
                              body1: BodyState, params: FluidParams,
                              radius: float) -> float:
    """int over fluid cells of (S(grad u) - S(grad U)) : (grad u - grad U).

    The stress is linear in the gradient, so this is the nonnegative
    quadratic form 2 mu |D(v)|^2 + lam (div v)^2 of v = u - U.
    """
    grid = state.grid
    mask = fluid_cell_mask(grid, body1, radius)
    diff = interior(_padded_velocity_gradient(pad_noslip(state.u), grid.h)
                    - _padded_velocity_gradient(pulled.u, grid.h))
    dsym = 0.5 * (diff + np.swapaxes(diff, -1, -2))
    tr = np.einsum("...aa->...", diff)
    dens = 2.0 * params.mu * np.einsum("...ai,...ai->...", dsym, dsym) \
        + params.lam * tr * tr
    return float(dens[mask].sum() * grid.cell_volume)


# ---------------------------------------------------------------------------
# density regime bookkeeping

class RegimeBounds:
    """Running envelope of the comparison density over the space-time fluid set."""

    def __init__(self) -> None:
        self.r_minus = math.inf
        self.r_plus = 0.0

    def update(self, r: Array, mask: Array) -> None:
        vals = r[mask]
        if vals.size == 0:
            return
        lo = float(vals.min())
        hi = float(vals.max())
        if lo <= 0.0:
            raise NumericError("comparison density nonpositive in regime update")
        self.r_minus = min(self.r_minus, lo)
        self.r_plus = max(self.r_plus, hi)

    def fractions(self, rho: Array, mask: Array) -> tuple[float, float, float]:
        """Volume fractions of the moderate / vacuum-side / dense-side sets.

        Relative to the whole box, so the three add up to the fluid volume
        fraction.
        """
        if not math.isfinite(self.r_minus):
            raise ValueError("regime bounds were never updated")
        total = rho.size
        vals = rho[mask]
        s2 = float((vals <= 0.5 * self.r_minus).sum()) / total
        s3 = float((vals >= 2.0 * self.r_plus).sum()) / total
        s1 = vals.size / total - s2 - s3
        return (s1, s2, s3)


# ---------------------------------------------------------------------------
# per-time report and post-run monitor

@dataclass(frozen=True)
class EnergyReport:
    """One cadence time of the twin diagnostics (CSV columns + extras)."""

    t: float
    e_total: float
    dissipation: float          # cumulative, weak run
    e_rel: float
    e_rel_kinetic: float
    e_rel_pressure: float
    e_rel_body: float
    terms: RemainderTerms
    rel_dissipation_rate: float
    pressure_distance_integral: float
    regime_fractions: tuple[float, float, float]


@dataclass(frozen=True)
class StabilityReport:
    """Relative-energy-inequality audit along a twin run."""

    times: Array
    e_rel: Array
    rei_residual: Array
    h_fit: Array
    envelope: Array
    gronwall_ok: bool
    max_rei_residual: float


def _cumtrapz(y: Array, t: Array) -> Array:
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))
    return out


def stability_monitor(reports: list[EnergyReport], tol_abs: float) -> StabilityReport:
    """Audit the relative energy inequality and the Gronwall envelope.

    residual(tau) = [E_rel(tau) + int relative dissipation]
                  - [E_rel(0) + int remainder]; the inequality direction
    requires residual <= tolerance, never >=. h is the reported ratio
    remainder / E_rel with a floor, and the envelope check is
    E_rel(tau) <= E_rel(0) exp(int h) + tol_abs.
    """
    if len(reports) < 3:
        raise ValueError("stability monitor needs at least 3 snapshots")
    t = np.array([rep.t for rep in reports])
    e_rel = np.array([rep.e_rel for rep in reports])
    rem = np.array([rep.terms.total for rep in reports])
    rdiss = np.array([rep.rel_dissipation_rate for rep in reports])

    residual = (e_rel + _cumtrapz(rdiss, t)) - (e_rel[0] + _cumtrapz(rem, t))
    h_fit = rem / np.maximum(e_rel, H_FIT_FLOOR)
    envelope = e_rel[0] * np.exp(_cumtrapz(h_fit, t)) + tol_abs
    ok = bool(np.all(e_rel <= envelope))
    return StabilityReport(times=t, e_rel=e_rel, rei_residual=residual,
                           h_fit=h_fit, envelope=envelope, gronwall_ok=ok,
                           max_rei_residual=float(residual.max()))


def budget_violation(reports: list[EnergyReport]) -> float:
    """max over tau of (E(tau) + dissipation(tau))/E(0) - 1 (<= 0 ideally)."""
    e0 = reports[0].e_total
    if e0 <= 0.0:
        raise ValueError("initial energy must be positive")
    worst = max((rep.e_total + rep.dissipation) / e0 for rep in reports)
    return worst - 1.0
