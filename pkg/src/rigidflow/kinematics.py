"""Rigid-body kinematics and dynamics.

States carry mass, body-frame inertia, center, velocity, orientation and
angular velocity. Orientation integrates on the matrix group with explicit
midpoint steps re-orthonormalized by polar projection; the world inertia is
J(t) = O J0 O^T.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

Array = np.ndarray

ORTHO_TOL = 1e-8


def skew(w: Array) -> Array:
    """Cross-product matrix: skew(w) @ x == w x x. Works on (...,3)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def polar_rotation(m: Array) -> Array:
    """Nearest rotation matrix (polar factor, det forced positive)."""
    u, _, vt = np.linalg.svd(m)
    if np.linalg.det(u @ vt) < 0.0:
        u = u.copy()
        u[:, -1] *= -1.0
    return u @ vt


def orthogonality_defect(o: Array) -> float:
    return float(np.abs(o @ o.T - np.eye(3)).max())


def rotation_angle(o: Array) -> float:
    c = (np.trace(o) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class Ball:
    """Ball region, the only body geometry used here."""

    center: Array
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0.0:
            raise ValueError("ball radius must be positive")

    def signed_distance(self, pts: Array) -> Array:
        """Distance to the sphere, negative inside."""
        pts = np.asarray(pts, dtype=float)
        return np.linalg.norm(pts - self.center, axis=-1) - self.radius

    def contains(self, pts: Array) -> Array:
        return self.signed_distance(pts) <= 0.0

    def wall_gap(self) -> float:
        """Distance from the ball to the boundary of the unit cube."""
        c = self.center
        return float(min(min(c[i], 1.0 - c[i]) for i in range(3)) - self.radius)

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radius ** 3


@dataclass(frozen=True)
class Isometry:
    """Orientation-preserving rigid placement x -> rotation @ x + translation."""

    rotation: Array
    translation: Array

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        if orthogonality_defect(self.rotation) > ORTHO_TOL or np.linalg.det(self.rotation) < 0.0:
            raise ValueError("rotation factor is not a rotation matrix")

    @classmethod
    def identity(cls) -> "Isometry":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        return x @ self.rotation.T + self.translation

    def compose(self, other: "Isometry") -> "Isometry":
        """self after other: (self.compose(other)).apply(x) == self.apply(other.apply(x))."""
        return Isometry(self.rotation @ other.rotation,
                        self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Isometry":
        rt = self.rotation.T
        return Isometry(rt, -rt @ self.translation)


@dataclass(frozen=True)
class BodyState:
    """Rigid body snapshot: mass, body-frame inertia, placement and rates."""

    m: float
    J0: Array
    X: Array
    V: Array
    O: Array
    w: Array

    def __post_init__(self) -> None:
        for name in ("J0", "X", "V", "O", "w"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.m <= 0.0:
            raise ValueError("body mass must be positive")
        if np.abs(self.J0 - self.J0.T).max() > 1e-12:
            raise ValueError("body inertia must be symmetric")
        try:
            np.linalg.cholesky(self.J0)
        except np.linalg.LinAlgError as exc:
            raise ValueError("body inertia must be positive definite") from exc
        if orthogonality_defect(self.O) > ORTHO_TOL:
            raise ValueError(f"orientation defect {orthogonality_defect(self.O):.3e} exceeds {ORTHO_TOL}")

    def world_inertia(self) -> Array:
        return self.O @ self.J0 @ self.O.T

    def velocity_at(self, x: Array) -> Array:
        return rigid_velocity(self, x)

    def kinetic_energy(self) -> float:
        return float(0.5 * self.m * self.V @ self.V + 0.5 * self.w @ self.world_inertia() @ self.w)

    def ball(self, radius: float) -> Ball:
        return Ball(self.X, radius)


def rigid_velocity(body: BodyState, x: Array) -> Array:
    """V + w x (x - X), vectorized over trailing point axes (...,3)."""
    x = np.asarray(x, dtype=float)
    return body.V + np.cross(body.w, x - body.X)


def rigid_material_derivative(body: BodyState, dvdt: Array, dwdt: Array, x: Array) -> Array:
    """Acceleration of the material point at x: dV/dt + dw/dt x r + w x (w x r)."""
    r = np.asarray(x, dtype=float) - body.X
    return dvdt + np.cross(dwdt, r) + np.cross(body.w, np.cross(body.w, r))


def integrate_rotation(o: Array, w: Array, dt: float, w_mid: Array | None = None) -> Array:
    """One explicit-midpoint step of dO/dt = skew(w) O, then polar projection.

    w is the angular velocity at the step start; w_mid, if given, the value at
    t + dt/2 (defaults to w, which is exact for steady spin).
    """
    if orthogonality_defect(o) > ORTHO_TOL:
        raise ValueError("input orientation is not orthogonal to tolerance")
    wm = w if w_mid is None else w_mid
    o_half = o + 0.5 * dt * skew(w) @ o
    return polar_rotation(o + dt * skew(wm) @ o_half)


def conjugate_inertia(j2: Array, o_tilde: Array) -> Array:
    """Inertia seen through a relative rotation: O~^T J2 O~."""
    o_tilde = np.asarray(o_tilde, dtype=float)
    if orthogonality_defect(o_tilde) > ORTHO_TOL:
        raise ValueError("relative orientation is not orthogonal to tolerance")
    return o_tilde.T @ np.asarray(j2, dtype=float) @ o_tilde


def mass_properties(density, ball: Ball, resolution: int = 64):
    """Mass, center of mass and world inertia of a ball by midpoint quadrature.

    density(pts) is sampled at resolution^3 lattice midpoints of the bounding
    box; points outside the ball contribute nothing.
    """
    if resolution < 4:
        raise ValueError("quadrature resolution too small")
    c, r = ball.center, ball.radius
    ax = c[:, None] - r + (np.arange(resolution)[None, :] + 0.5) * (2.0 * r / resolution)
    x, y, z = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")
    pts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    inside = ball.contains(pts)
    pts = pts[inside]
    rho = np.broadcast_to(np.asarray(density(pts), dtype=float), (pts.shape[0],))
    dv = (2.0 * r / resolution) ** 3
    m = float(rho.sum() * dv)
    if m <= 0.0:
        raise ValueError("body mass vanishes on the quadrature lattice")
    xc = (rho[:, None] * pts).sum(axis=0) * dv / m
    rel = pts - xc
    r2 = np.einsum("pi,pi->p", rel, rel)
    j = (rho[:, None, None] * (r2[:, None, None] * np.eye(3) - rel[:, :, None] * rel[:, None, :])).sum(axis=0) * dv
    return m, xc, 0.5 * (j + j.T)


def uniform_ball_body(center, radius: float, density_value: float,
                      velocity=(0.0, 0.0, 0.0), spin=(0.0, 0.0, 0.0),
                      resolution: int = 64) -> BodyState:
    """BodyState for a uniform ball; inertia from quadrature, not the closed form."""
    ball = Ball(np.asarray(center, dtype=float), radius)
    m, xc, j = mass_properties(lambda pts: np.full(pts.shape[0], density_value), ball, resolution)
    return BodyState(m=m, J0=j, X=ball.center, V=np.asarray(velocity, dtype=float),
                     O=np.eye(3), w=np.asarray(spin, dtype=float))


def _body_rates(m: float, j: Array, w: Array, force: Array, torque: Array):
    dv = force / m
    dw = np.linalg.solve(j, np.cross(j @ w, w) + torque)
    return dv, dw


def step_body(body: BodyState, force: Array, torque: Array, dt: float) -> BodyState:
    """Explicit-midpoint step of the momentum balance with frozen loads.

    m dV/dt = force, J(t) dw/dt = (J w) x w + torque, dX/dt = V,
    dO/dt = skew(w) O; the new orientation is polar-projected.
    """
    force = np.asarray(force, dtype=float)
    torque = np.asarray(torque, dtype=float)
    if not (np.all(np.isfinite(force)) and np.all(np.isfinite(torque))):
        raise ValueError("non-finite body loads")
    dv0, dw0 = _body_rates(body.m, body.world_inertia(), body.w, force, torque)
    x_h = body.X + 0.5 * dt * body.V
    v_h = body.V + 0.5 * dt * dv0
    w_h = body.w + 0.5 * dt * dw0
    o_h = body.O + 0.5 * dt * skew(body.w) @ body.O
    j_h = o_h @ body.J0 @ o_h.T
    dv_h, dw_h = _body_rates(body.m, j_h, w_h, force, torque)
    return replace(
        body,
        X=body.X + dt * v_h,
        V=body.V + dt * dv_h,
        O=polar_rotation(body.O + dt * skew(w_h) @ o_h),
        w=body.w + dt * dw_h,
    )


def solve_o_delta(w_samples: Array, dt: float, o0: Array | None = None):
    """Integrate dO/dt = O W(t) from O(0) with explicit midpoint steps.

    w_samples: (k, 3, 3) values of W at uniform times j*dt. Returns
    (sup over steps of max-abs entry, final O).
    """
    w_samples = np.asarray(w_samples, dtype=float)
    o = np.zeros((3, 3)) if o0 is None else np.asarray(o0, dtype=float).copy()
    sup = float(np.abs(o).max())
    for j in range(w_samples.shape[0] - 1):
        wm = 0.5 * (w_samples[j] + w_samples[j + 1])
        o_half = o + 0.5 * dt * o @ w_samples[j]
        o = o + dt * o_half @ wm
        sup = max(sup, float(np.abs(o).max()))
    return sup, o


@dataclass
class Trajectory:
    """Time-stamped body states, appended as a run advances."""

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def append(self, t: float, state: BodyState) -> None:
        if self.times and t <= self.times[-1]:
            raise ValueError("trajectory times must increase")
        self.times.append(float(t))
        self.states.append(state)

    def __len__(self) -> int:
        return len(self.times)

    def index_at(self, t: float) -> int:
        i = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        return i

    def at(self, t: float) -> BodyState:
        return self.states[self.index_at(t)]
