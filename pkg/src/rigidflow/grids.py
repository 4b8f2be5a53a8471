"""Uniform cell-centered grids plus the stencil and interpolation helpers.

Fields live at cell centers of an n^3 grid over the unit cube, stored in C
order with any trailing component axes. Derivative stencils are 2nd order
everywhere: central in the interior, dedicated one-sided variants at lattice
edges (exact on cubics for d1/d2 and on quartics for d3).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class UniformGrid:
    """n^3 cell-centered grid on [0,1]^3 with spacing h = 1/n."""

    n: int

    def __post_init__(self) -> None:
        if self.n < 4:
            raise ValueError(f"grid needs n >= 4, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def axis_coords(self) -> Array:
        return (np.arange(self.n) + 0.5) * self.h

    def centers(self) -> Array:
        """Cell center coordinates, shape (n, n, n, 3)."""
        return cell_centers(self.n)

    @property
    def cell_volume(self) -> float:
        return self.h ** 3


@lru_cache(maxsize=16)
def cell_centers(n: int) -> Array:
    c = (np.arange(n) + 0.5) / n
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    out = np.stack([x, y, z], axis=-1)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# lattice derivative stencils (no ghost data; one-sided at the edges)

def d1(f: Array, h: float, axis: int) -> Array:
    """First derivative along axis, 2nd order.

    The one-sided edge closure is chosen so its leading truncation term
    equals the centered stencil's (+h^2/6 f'''). The error field is then
    smooth across the closure seam, and stencil compositions (mixed
    partials, divergence of a stencil-built stress) stay uniformly 2nd
    order instead of losing a power of h at the outermost planes.
    """
    g = np.moveaxis(f, axis, -1)
    out = np.empty_like(g)
    out[..., 1:-1] = (g[..., 2:] - g[..., :-2]) / (2.0 * h)
    if g.shape[-1] >= 4:
        c0, c1, c2, c3 = -2.0, 3.5, -2.0, 0.5
        out[..., 0] = (c0 * g[..., 0] + c1 * g[..., 1]
                       + c2 * g[..., 2] + c3 * g[..., 3]) / h
        out[..., -1] = -(c0 * g[..., -1] + c1 * g[..., -2]
                         + c2 * g[..., -3] + c3 * g[..., -4]) / h
    else:
        out[..., 0] = (-3.0 * g[..., 0] + 4.0 * g[..., 1] - g[..., 2]) / (2.0 * h)
        out[..., -1] = (3.0 * g[..., -1] - 4.0 * g[..., -2] + g[..., -3]) / (2.0 * h)
    return np.moveaxis(out, -1, axis)


def d2(f: Array, h: float, axis: int) -> Array:
    """Second derivative along axis, 2nd order centered.

    Edge closures are one-sided 3rd order when possible, for the same
    composition reason as in d1.
    """
    g = np.moveaxis(f, axis, -1)
    out = np.empty_like(g)
    h2 = h * h
    out[..., 1:-1] = (g[..., 2:] - 2.0 * g[..., 1:-1] + g[..., :-2]) / h2
    if g.shape[-1] >= 5:
        out[..., 0] = (35.0 * g[..., 0] - 104.0 * g[..., 1] + 114.0 * g[..., 2]
                       - 56.0 * g[..., 3] + 11.0 * g[..., 4]) / (12.0 * h2)
        out[..., -1] = (35.0 * g[..., -1] - 104.0 * g[..., -2] + 114.0 * g[..., -3]
                        - 56.0 * g[..., -4] + 11.0 * g[..., -5]) / (12.0 * h2)
    else:
        out[..., 0] = (2.0 * g[..., 0] - 5.0 * g[..., 1] + 4.0 * g[..., 2] - g[..., 3]) / h2
        out[..., -1] = (2.0 * g[..., -1] - 5.0 * g[..., -2] + 4.0 * g[..., -3] - g[..., -4]) / h2
    return np.moveaxis(out, -1, axis)


def d3(f: Array, h: float, axis: int) -> Array:
    """Third derivative along axis, 2nd order (5-point skewed stencils at edges)."""
    g = np.moveaxis(f, axis, -1)
    out = np.empty_like(g)
    h3 = h ** 3
    out[..., 2:-2] = (g[..., 4:] - 2.0 * g[..., 3:-1] + 2.0 * g[..., 1:-3] - g[..., :-4]) / (2.0 * h3)
    out[..., 0] = (-2.5 * g[..., 0] + 9.0 * g[..., 1] - 12.0 * g[..., 2]
                   + 7.0 * g[..., 3] - 1.5 * g[..., 4]) / h3
    out[..., 1] = (-1.5 * g[..., 0] + 5.0 * g[..., 1] - 6.0 * g[..., 2]
                   + 3.0 * g[..., 3] - 0.5 * g[..., 4]) / h3
    out[..., -1] = (2.5 * g[..., -1] - 9.0 * g[..., -2] + 12.0 * g[..., -3]
                    - 7.0 * g[..., -4] + 1.5 * g[..., -5]) / h3
    out[..., -2] = (1.5 * g[..., -1] - 5.0 * g[..., -2] + 6.0 * g[..., -3]
                    - 3.0 * g[..., -4] + 0.5 * g[..., -5]) / h3
    return np.moveaxis(out, -1, axis)


def dmulti(f: Array, h: float, axes: tuple[int, ...]) -> Array:
    """Mixed partial with the given axis multiset, e.g. (0,0,2) -> d2_x d1_z.

    Equal axes are taken with the dedicated d2/d3 stencils; distinct axes
    compose, which keeps every pattern uniformly 2nd order.
    """
    counts: dict[int, int] = {}
    for a in axes:
        counts[a] = counts.get(a, 0) + 1
    out = f
    for a, m in sorted(counts.items()):
        if m == 1:
            out = d1(out, h, a)
        elif m == 2:
            out = d2(out, h, a)
        elif m == 3:
            out = d3(out, h, a)
        else:
            raise ValueError(f"unsupported derivative order {m} along axis {a}")
    return out


# ---------------------------------------------------------------------------
# ghost padding for fields with wall boundary conditions

_EXTRAP = (3.0, -3.0, 1.0)          # quadratic extrapolation through 3 cells
_ODD0 = (-3.0, 1.0, -0.2)           # cubic through (wall value 0, 3 cells)


def _pad_axis(f: Array, axis: int, coef: tuple[float, float, float]) -> Array:
    g = np.moveaxis(f, axis, 0)
    shape = (g.shape[0] + 2,) + g.shape[1:]
    out = np.empty(shape, dtype=f.dtype)
    out[1:-1] = g
    c0, c1, c2 = coef
    out[0] = c0 * g[0] + c1 * g[1] + c2 * g[2]
    out[-1] = c0 * g[-1] + c1 * g[-2] + c2 * g[-3]
    return np.moveaxis(out, 0, axis)


def pad_scalar(f: Array) -> Array:
    """One ghost layer per side by quadratic extrapolation (no wall condition)."""
    out = f
    for ax in range(3):
        out = _pad_axis(out, ax, _EXTRAP)
    return out


def pad_noslip(u: Array) -> Array:
    """One ghost layer per side honoring u = 0 on the wall (cubic fit)."""
    out = u
    for ax in range(3):
        out = _pad_axis(out, ax, _ODD0)
    return out


# ---------------------------------------------------------------------------
# trilinear interpolation

def trilinear(values: Array, origin: Array, h: float, pts: Array) -> Array:
    """Trilinear sample of a lattice field at arbitrary points.

    values: (nx, ny, nz, ...) lattice samples with spacing h, first node at
    origin. pts: (..., 3). Points must lie inside the lattice hull.
    """
    rel = (np.asarray(pts, dtype=float) - np.asarray(origin, dtype=float)) / h
    nmax = np.array(values.shape[:3]) - 1
    if np.any(rel < -1e-9) or np.any(rel > nmax + 1e-9):
        bad = np.asarray(pts).reshape(-1, 3)[
            np.argmax(np.max(np.maximum(-rel, rel - nmax).reshape(-1, 3), axis=1))]
        raise ValueError(f"interpolation point {bad} outside lattice hull")
    i0 = np.clip(np.floor(rel).astype(np.int64), 0, nmax - 1)
    w = rel - i0
    trail = values.shape[3:]
    wshape = w.shape[:-1] + (1,) * len(trail)
    out = np.zeros(w.shape[:-1] + trail, dtype=values.dtype)
    for dx in (0, 1):
        wx = (w[..., 0] if dx else 1.0 - w[..., 0]).reshape(wshape)
        for dy in (0, 1):
            wy = (w[..., 1] if dy else 1.0 - w[..., 1]).reshape(wshape)
            for dz in (0, 1):
                wz = (w[..., 2] if dz else 1.0 - w[..., 2]).reshape(wshape)
                out += wx * wy * wz * values[i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz]
    return out


def sample_cell_field(field: Array, grid: UniformGrid, pts: Array, mode: str = "scalar") -> Array:
    """Sample a cell-centered field anywhere in [0,1]^3 using ghost padding.

    mode "scalar" extrapolates at walls, "velocity" honors no-slip.
    """
    pad = pad_scalar(field) if mode == "scalar" else pad_noslip(field)
    origin = np.array([-0.5 * grid.h] * 3)
    return trilinear(pad, origin, grid.h, pts)


def quintic_step(s: Array) -> Array:
    """C^2 smoothstep: 0 for s<=0, 1 for s>=1, 6s^5-15s^4+10s^3 between."""
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (s * (6.0 * s - 15.0) + 10.0)
