"""Forward Eulerian smoke solver on a MAC grid.

The pressure projection solves the Poisson problem exactly with a separable
eigen-decomposition: x/z sides and the top are open (ghost pressure 0), the
bottom of the pressure domain is a Neumann boundary whose face velocities
are held fixed.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .grid import GridDims, StaggeredField, apply_laplacian, divergence, face_average

log = logging.getLogger(__name__)

__all__ = [
    "SimParams",
    "PressureSolveError",
    "StabilityError",
    "backtrace",
    "sample_velocity",
    "advect",
    "advect_scalar",
    "advect_velocity",
    "pressure_project",
    "max_divergence",
    "add_viscosity",
    "add_buoyancy",
    "source_mask",
    "inject_source",
    "SmokeState",
    "step_forward",
]


class PressureSolveError(RuntimeError):
    """Projection failed to reach the requested divergence tolerance."""

    def __init__(self, residual: float, tol: float):
        super().__init__(f"pressure solve residual {residual:.3e} exceeds tolerance {tol:.3e}")
        self.residual = residual
        self.tol = tol


class StabilityError(ValueError):
    pass


@dataclass
class SimParams:
    dt: float = 1.0 / 60.0
    viscosity: float = 1.516e-5
    buoyancy: float = 1.0
    noise_seed: int = 0
    noise_amp: float = 0.3
    source_center: tuple[float, float] | None = None  # (x, z) in cells
    source_radius: float = 4.0
    source_y: tuple[int, int] = (1, 3)  # cell layers [y0, y1)
    source_density: float = 1.0
    pressure_tol: float = 1e-4

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.viscosity < 0:
            raise ValueError("viscosity must be non-negative")
        if self.buoyancy < 0:
            raise ValueError("buoyancy must be non-negative")


# ---------------------------------------------------------------- advection

@functools.lru_cache(maxsize=32)
def _sample_points(shape: tuple[int, int, int], axis: int | None) -> np.ndarray:
    """Index-space positions of cell centres (``axis=None``) or faces."""
    pts = np.indices(shape, dtype=float).reshape(3, -1)
    if axis is not None:
        pts[axis] -= 0.5
    pts.setflags(write=False)
    return pts


def sample_velocity(vel: StaggeredField, pts: np.ndarray) -> np.ndarray:
    """Trilinear velocity at index-space points, clamped to the boundary."""
    out = np.empty_like(pts)
    for axis, comp in enumerate(vel.components):
        q = pts.copy()
        q[axis] += 0.5
        out[axis] = map_coordinates(comp, q, order=1, mode="nearest")
    return out


def backtrace(vel: StaggeredField, pts: np.ndarray, dt: float) -> np.ndarray:
    """Second-order (midpoint) back-trace of index-space points."""
    scale = dt / vel.dims.h
    v1 = sample_velocity(vel, pts)
    mid = pts - 0.5 * scale * v1
    v2 = sample_velocity(vel, mid)
    return pts - scale * v2


def cell_backtrace(vel: StaggeredField, dt: float) -> np.ndarray:
    return backtrace(vel, _sample_points(vel.dims.shape, None), dt)


def advect_scalar(q: np.ndarray, vel: StaggeredField, dt: float, back=None) -> np.ndarray:
    """Semi-Lagrangian transport of a cell-centred scalar; zero outside the domain."""
    if back is None:
        back = cell_backtrace(vel, dt)
    out = map_coordinates(q, back, order=1, mode="grid-constant", cval=0.0)
    return out.reshape(q.shape)


def advect_velocity(u: StaggeredField, vel: StaggeredField, dt: float) -> StaggeredField:
    """Transport each face component of ``u`` by ``vel``; clamped at boundaries."""
    comps = []
    for axis, comp in enumerate(u.components):
        pts = _sample_points(comp.shape, axis)
        back = backtrace(vel, pts, dt)
        back[axis] += 0.5
        comps.append(map_coordinates(comp, back, order=1, mode="nearest").reshape(comp.shape))
    return StaggeredField(u.dims, *comps)


def advect(q, vel: StaggeredField, dt: float):
    """Advect a scalar array or a staggered field."""
    if isinstance(q, StaggeredField):
        return advect_velocity(q, vel, dt)
    return advect_scalar(q, vel, dt)


# --------------------------------------------------------------- projection

def _tridiag(n: int, neumann_lo: bool) -> np.ndarray:
    t = 2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    if neumann_lo:
        t[0, 0] = 1.0
    return t


@functools.lru_cache(maxsize=16)
def _poisson_basis(shape: tuple[int, int, int], h: float):
    bases = []
    for axis, n in enumerate(shape):
        lam, q = np.linalg.eigh(_tridiag(n, neumann_lo=(axis == 1)))
        bases.append((lam, q))
    lx, ly, lz = (b[0] for b in bases)
    denom = (lx[:, None, None] + ly[None, :, None] + lz[None, None, :]) / h**2
    return [b[1] for b in bases], denom


def _mode_product(m: np.ndarray, a: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(m, a, axes=(1, axis)), 0, axis)


def _solve_poisson(rhs: np.ndarray, h: float) -> np.ndarray:
    """Solve ``-Δp = rhs`` with open sides/top and a Neumann floor."""
    qs, denom = _poisson_basis(rhs.shape, h)
    a = rhs
    for axis in range(3):
        a = _mode_product(qs[axis].T, a, axis)
    a = a / denom
    for axis in range(3):
        a = _mode_product(qs[axis], a, axis)
    return a


def max_divergence(vel: StaggeredField, bottom: int = 0) -> float:
    """Largest |div| over the cells above the ``bottom`` fixed layers."""
    return float(np.abs(divergence(vel)[:, bottom:, :]).max())


def pressure_project(vel: StaggeredField, tol: float = 1e-4, bottom: int = 0) -> StaggeredField:
    """Project onto divergence-free fields.

    The pressure domain is every cell with ``y >= bottom``.  Faces below it
    (and the y-faces at its lower boundary) are kept as given, acting as a
    wall or a prescribed inflow.  Sides and top are outflow boundaries.
    """
    dims = vel.dims
    h = dims.h
    div = divergence(vel)[:, bottom:, :]
    p = _solve_poisson(-div, h)
    out = vel.copy()
    # x faces: interior plus open side faces (ghost pressure 0)
    px = np.pad(p, ((1, 1), (0, 0), (0, 0)))
    out.x[:, bottom:, :] -= np.diff(px, axis=0) / h
    pz = np.pad(p, ((0, 0), (0, 0), (1, 1)))
    out.z[:, bottom:, :] -= np.diff(pz, axis=2) / h
    # y faces: interior of the pressure domain plus the open top
    out.y[:, bottom + 1:-1, :] -= np.diff(p, axis=1) / h
    out.y[:, -1, :] += p[:, -1, :] / h
    residual = max_divergence(out, bottom)
    if not residual <= tol:
        raise PressureSolveError(residual, tol)
    return out


# ------------------------------------------------------------------- forces

def add_viscosity(vel: StaggeredField, nu: float, dt: float) -> StaggeredField:
    """Explicit diffusion step ``vel + nu*dt*Δvel`` per component."""
    if nu == 0:
        return vel.copy()
    r = nu * dt / vel.dims.h**2
    if r >= 1.0 / 6.0:
        raise StabilityError(f"explicit viscosity unstable: nu*dt/h^2 = {r:.3g} >= 1/6")
    return vel.map(lambda c: c - nu * dt * apply_laplacian(c, vel.dims.h))


def add_buoyancy(vel: StaggeredField, density: np.ndarray, alpha: float, dt: float) -> StaggeredField:
    """Boussinesq force: upward acceleration proportional to density."""
    out = vel.copy()
    out.y = out.y + dt * alpha * face_average(density, axis=1)
    return out


def source_mask(dims: GridDims, params: SimParams) -> np.ndarray:
    cx, cz = params.source_center or ((dims.nx - 1) / 2, (dims.nz - 1) / 2)
    i, j, k = np.indices(dims.shape)
    disc = (i - cx) ** 2 + (k - cz) ** 2 <= params.source_radius**2
    y0, y1 = params.source_y
    return disc & (j >= y0) & (j < y1)


def inject_source(density: np.ndarray, mask: np.ndarray, params: SimParams, rng) -> tuple[np.ndarray, float]:
    """Raise source cells to a noisy target value; returns (field, injected mass)."""
    noise = rng.uniform(-1.0, 1.0, size=int(mask.sum()))
    value = params.source_density * (1.0 + params.noise_amp * noise)
    out = density.copy()
    before = out[mask]
    out[mask] = np.maximum(before, value)
    return out, float((out[mask] - before).sum())


@dataclass
class SmokeState:
    density: np.ndarray
    velocity: StaggeredField
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)
    last_divergence: float = 0.0
    injected: float = 0.0

    @classmethod
    def empty(cls, dims: GridDims, seed: int = 0) -> "SmokeState":
        return cls(dims.zeros(), StaggeredField.zeros(dims), rng=np.random.default_rng(seed))


def step_forward(state: SmokeState, params: SimParams, source: np.ndarray | None = None) -> SmokeState:
    """One simulator step.

    Order: advect velocity, project, viscosity, buoyancy, inject source,
    advect density.  The floor is a wall.  ``last_divergence`` records the
    post-projection divergence.
    """
    vel = state.velocity
    dims = vel.dims
    dt = params.dt
    u = advect_velocity(vel, vel, dt)
    u.y[:, 0, :] = 0.0
    u = pressure_project(u, params.pressure_tol)
    div_after = max_divergence(u)
    u = add_viscosity(u, params.viscosity, dt)
    u = add_buoyancy(u, state.density, params.buoyancy, dt)
    u.y[:, 0, :] = 0.0
    if source is None:
        source = source_mask(dims, params)
    density, injected = inject_source(state.density, source, params, state.rng)
    density = advect_scalar(density, u, dt)
    np.maximum(density, 0.0, out=density)
    return SmokeState(density, u, state.step + 1, state.rng, div_after, injected)
