"""Two-way fluid-body coupling.

The rigid velocity constraint is imposed by volume penalization inside the
ball; surface stress loads come from midpoint quadrature over an icosphere
whose stress values are probed a couple of cells into the fluid and linearly
extrapolated onto the surface. Mesh normals point INTO the body (out of the
fluid), the convention the load formulas

    force  = -oint (S - p I) n dS
    torque = -oint (x - X) x (S - p I) n dS

assume. A coupled step runs: fluid step, load evaluation, body step, velocity
enforcement. The enforcement increment is computed once against the pre-step
body and handed to both sides, so the momentum exchange cancels exactly in
the audit.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import NumericError
from .fluid import FluidParams, FluidState, step_fluid, viscous_stress
from .grids import sample_cell_field
from .kinematics import Ball, BodyState, rigid_velocity, step_body

Array = np.ndarray


# ---------------------------------------------------------------------------
# icosphere mesh

@dataclass(frozen=True)
class SurfaceMesh:
    """Triangulated unit sphere; normals stored pointing into the ball."""

    vertices: Array
    faces: Array
    face_centers: Array
    face_normals: Array
    face_areas: Array

    @property
    def total_area(self) -> float:
        return float(self.face_areas.sum())

    def normal_closure(self) -> float:
        """|sum A_f n_f|, exactly zero for a closed polyhedron."""
        return float(np.linalg.norm((self.face_areas[:, None] * self.face_normals).sum(axis=0)))

    def moment_closure(self) -> float:
        """|sum A_f c_f x n_f|, exactly zero for a closed polyhedron."""
        m = np.cross(self.face_centers, self.face_normals) * self.face_areas[:, None]
        return float(np.linalg.norm(m.sum(axis=0)))

    def placed(self, center: Array, radius: float):
        """World-space (points, into-body normals, areas) for a placed ball."""
        return (np.asarray(center) + radius * self.face_centers,
                self.face_normals,
                radius * radius * self.face_areas)


def _mesh_from_triangles(vertices: Array, faces: Array) -> SurfaceMesh:
    va, vb, vc = (vertices[faces[:, k]] for k in range(3))
    cr = np.cross(vb - va, vc - va)
    areas = 0.5 * np.linalg.norm(cr, axis=1)
    n_out = cr / (2.0 * areas[:, None])
    centers = (va + vb + vc) / 3.0
    # enforce outward winding, then store the into-body orientation
    flip = np.einsum("fi,fi->f", n_out, centers) < 0.0
    n_out[flip] *= -1.0
    return SurfaceMesh(vertices=vertices, faces=faces, face_centers=centers,
                       face_normals=-n_out, face_areas=areas)


@lru_cache(maxsize=8)
def icosphere(subdivisions: int = 3) -> SurfaceMesh:
    """Unit icosphere; 3 subdivisions give 1280 faces."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1.0, phi, 0.0), (1.0, phi, 0.0), (-1.0, -phi, 0.0), (1.0, -phi, 0.0),
        (0.0, -1.0, phi), (0.0, 1.0, phi), (0.0, -1.0, -phi), (0.0, 1.0, -phi),
        (phi, 0.0, -1.0), (phi, 0.0, 1.0), (-phi, 0.0, -1.0), (-phi, 0.0, 1.0),
    ])
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = np.array(verts[i]) + np.array(verts[j])
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(tuple(m))
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return _mesh_from_triangles(np.array(verts, dtype=float), np.array(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# epsilon bands around the body

@dataclass(frozen=True)
class EpsilonBands:
    """Region split at distance eps from the ball.

    near(pts) is the closed eps-neighborhood [B]_eps, collar(pts) the shell
    [B]_{2eps} minus B, far(pts) the rest of the cube. collar + far + B
    partition the cube.
    """

    ball: Ball
    eps: float

    def __post_init__(self) -> None:
        if self.eps <= 0.0:
            raise ValueError("band width must be positive")

    def near(self, pts: Array) -> Array:
        return self.ball.signed_distance(pts) <= self.eps

    def collar(self, pts: Array) -> Array:
        d = self.ball.signed_distance(pts)
        return (d > 0.0) & (d <= 2.0 * self.eps)

    def far(self, pts: Array) -> Array:
        return self.ball.signed_distance(pts) > 2.0 * self.eps


# ---------------------------------------------------------------------------
# surface loads

def surface_loads(state: FluidState, body: BodyState, mesh: SurfaceMesh,
                  params: FluidParams, radius: float,
                  probe_offsets: tuple[float, float] = (2.0, 4.0),
                  strict: bool = True):
    """Stress loads by per-face midpoint quadrature.

    The deviatoric stress and pressure are sampled at two probe points pushed
    off each face along the fluid-side normal (probe_offsets are in units of
    h) and extrapolated linearly back onto the surface. With strict=False a
    probe that would leave the box is clamped to it instead of aborting; the
    loads degrade there, which is acceptable only when they are a diagnostic
    and something else (the gap monitor) owns the near-wall safety.
    """
    h = state.grid.h
    pts, n_in, areas = mesh.placed(body.X, radius)
    n_fluid = -n_in
    d1, d2 = (probe_offsets[0] * h, probe_offsets[1] * h)
    q1 = pts + d1 * n_fluid
    q2 = pts + d2 * n_fluid
    if strict:
        for q in (q1, q2):
            if q.min() < 0.0 or q.max() > 1.0:
                raise NumericError("surface probe left the domain; body too close to the wall")
    else:
        q1 = np.clip(q1, 0.0, 1.0)
        q2 = np.clip(q2, 0.0, 1.0)
    stress = viscous_stress(state.u, params, h)
    pres = params.pressure(state.rho)
    s0 = 2.0 * sample_cell_field(stress, state.grid, q1) - sample_cell_field(stress, state.grid, q2)
    p0 = 2.0 * sample_cell_field(pres, state.grid, q1) - sample_cell_field(pres, state.grid, q2)
    traction = np.einsum("fij,fj->fi", s0, n_in) - p0[:, None] * n_in
    force = -(areas[:, None] * traction).sum(axis=0)
    torque = -(areas[:, None] * np.cross(pts - body.X, traction)).sum(axis=0)
    return force, torque


# ---------------------------------------------------------------------------
# penalization

def penalization_increment(state: FluidState, body: BodyState, radius: float,
                           eta_p: float, dt: float):
    """Velocity increment of u <- (u + (dt/eta) u_B) / (1 + dt/eta) in the ball.

    Returns (du, momentum gained by the fluid, torque about X gained by the
    fluid); rho is untouched.
    """
    if eta_p <= 0.0:
        raise ValueError("penalization parameter must be positive")
    centers = state.grid.centers()
    inside = Ball(body.X, radius).contains(centers)
    beta = dt / eta_p
    du = np.zeros_like(state.u)
    ub = rigid_velocity(body, centers)
    du[inside] = (beta / (1.0 + beta)) * (ub - state.u)[inside]
    vol = state.grid.cell_volume
    dp = (state.rho[..., None] * du).sum(axis=(0, 1, 2)) * vol
    dtau = (state.rho[..., None] * np.cross(centers - body.X, du)).sum(axis=(0, 1, 2)) * vol
    return du, dp, dtau


def enforce_body_velocity(state: FluidState, body: BodyState, radius: float,
                          eta_p: float, dt: float) -> FluidState:
    du, _, _ = penalization_increment(state, body, radius, eta_p, dt)
    return state.with_fields(state.rho, state.u + du)


# ---------------------------------------------------------------------------
# gap monitor and the coupled step

def gap_monitor(body: BodyState, radius: float, kappa: float):
    """Distance of the ball to the cube walls; stop once it falls to kappa/2."""
    if kappa <= 0.0:
        raise ValueError("gap threshold must be positive")
    gap = Ball(body.X, radius).wall_gap()
    return gap, gap <= 0.5 * kappa


@dataclass(frozen=True)
class CouplingConfig:
    """Geometry and policy of the coupling: ball radius, gap threshold,
    penalization strength (as the ratio dt/eta), load pathway and mesh."""

    radius: float
    kappa: float = 0.1
    dt_over_eta: float = 1e4
    load_pathway: str = "penalization"
    probe_offsets: tuple[float, float] = (2.0, 4.0)
    mesh_subdivisions: int = 3

    def __post_init__(self) -> None:
        if self.radius <= 0.0:
            raise ValueError("ball radius must be positive")
        if self.kappa <= 0.0:
            raise ValueError("gap threshold must be positive")
        if self.load_pathway not in ("penalization", "surface"):
            raise ValueError(f"unknown load pathway {self.load_pathway!r}")
        if self.dt_over_eta <= 0.0:
            raise ValueError("dt/eta must be positive")

    def mesh(self) -> SurfaceMesh:
        return icosphere(self.mesh_subdivisions)


@dataclass(frozen=True)
class CoupledDiagnostics:
    """Per-step coupling record: the loads that drove the body, the surface
    quadrature diagnostic, the fluid-side penalization exchange, and the gap."""

    force: Array
    torque: Array
    surface_force: Array
    surface_torque: Array
    fluid_momentum_gain: Array
    fluid_torque_gain: Array
    gap: float
    stop: bool


def coupled_step(state: FluidState, body: BodyState, params: FluidParams,
                 dt: float, config: CouplingConfig):
    """Advance fluid and body by dt.

    Sequence: fluid step; load evaluation (pathway per config, the surface
    quadrature always computed as a diagnostic); body step; penalization of
    the fluid velocity. The penalization increment is evaluated once against
    the pre-step body so the momentum handed to the fluid is exactly the
    negative of the impulse fed to the body.
    """
    s1 = step_fluid(state, params, dt)
    eta_p = dt / config.dt_over_eta
    du, dp, dtau = penalization_increment(s1, body, config.radius, eta_p, dt)
    sforce, storque = surface_loads(s1, body, config.mesh(), params,
                                    config.radius, config.probe_offsets,
                                    strict=config.load_pathway == "surface")
    if config.load_pathway == "penalization":
        force, torque = -dp / dt, -dtau / dt
    else:
        force, torque = sforce, storque
    body1 = step_body(body, force, torque, dt)
    s2 = s1.with_fields(s1.rho, s1.u + du)
    gap, stop = gap_monitor(body1, config.radius, config.kappa)
    return s2, body1, CoupledDiagnostics(
        force=force, torque=torque, surface_force=sforce, surface_torque=storque,
        fluid_momentum_gain=dp, fluid_torque_gain=dtau, gap=gap, stop=stop)
