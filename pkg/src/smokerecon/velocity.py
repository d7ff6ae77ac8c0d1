"""Residual velocity reconstruction.

The residual velocity ``u_u`` and the residual density ``Φ_u`` it induces
minimise the linearised transport residual ``||Φ_u + ∇Φ_p · u_u||²`` while
``u_u`` is divergence free with prescribed inflow, and ``Φ_u`` reproduces
the image residual with a non-negative total.  Internally velocities are
measured in cells per frame (``u * dt / h``) and gradients in density per
cell.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .fluid import (
    advect_scalar,
    advect_velocity,
    cell_backtrace,
    max_divergence,
    pressure_project,
)
from .grid import (
    DomainMasks,
    GridDims,
    StaggeredField,
    apply_laplacian,
    prolong_staggered,
    restrict,
    restrict_staggered,
)
from .imaging import ImageSet, ProjectionOperator, compute_visual_hull
from .inflow import constant_inflow, estimate_inflow
from .optim import (
    DENSITY_REG,
    INFLOW_REG,
    VELOCITY_REG,
    PDParams,
    RegularizerSpec,
    pd_iterate,
    solve_cg,
)
from .tomography import TomographyProblem

log = logging.getLogger(__name__)

__all__ = [
    "InflowBoundary",
    "TransportOperator",
    "curl_curl",
    "viscous_increment",
    "predict_velocity",
    "linearized_advection",
    "transport_objective",
    "ReconLevel",
    "SolverSettings",
    "recon_vel",
    "recon_vel_ms",
]


@dataclass
class InflowBoundary:
    """Faces below the pressure domain and their prescribed total velocity.

    Every face under the first visible layer is fixed: y-faces of footprint
    columns carry the upward inflow speed ``c``, all others are zero.
    """

    dims: GridDims
    slab: int
    footprint: np.ndarray | None
    speed: float

    def masks(self):
        nx, ny, nz = self.dims.shape
        fx = np.zeros(self.dims.face_shape(0), bool)
        fy = np.zeros(self.dims.face_shape(1), bool)
        fz = np.zeros(self.dims.face_shape(2), bool)
        fx[:, :self.slab, :] = True
        fz[:, :self.slab, :] = True
        fy[:, :self.slab + 1, :] = True
        return fx, fy, fz

    def values(self) -> StaggeredField:
        out = StaggeredField.zeros(self.dims)
        if self.footprint is not None and self.speed:
            out.y[:, :self.slab + 1, :] = np.where(self.footprint[:, None, :], self.speed, 0.0)
        return out

    def apply(self, residual: StaggeredField, predicted: StaggeredField) -> StaggeredField:
        """Set ``residual = c - predicted`` on every fixed face."""
        vals = self.values()
        out = residual.copy()
        for m, o, v, p in zip(self.masks(), out.components, vals.components, predicted.components):
            o[m] = v[m] - p[m]
        return out

    def coarse(self) -> "InflowBoundary":
        fp = None
        if self.footprint is not None:
            nx, nz = self.footprint.shape
            fp = self.footprint.reshape(nx // 2, 2, nz // 2, 2).any(axis=(1, 3))
        return InflowBoundary(self.dims.coarse(), max(self.slab // 2, 1) if self.slab else 0,
                              fp, self.speed)


class TransportOperator:
    """``w -> ∇Φ · w`` from cell-unit face velocities to cells.

    Gradients are central differences of ``Φ`` (one-sided at the domain
    edges); face velocities are averaged to the cell centres.
    """

    def __init__(self, phi: np.ndarray):
        self.shape = phi.shape
        self.grads = [np.gradient(phi, axis=a) for a in range(3)]

    def apply(self, w: StaggeredField) -> np.ndarray:
        out = np.zeros(self.shape)
        for a, (g, c) in enumerate(zip(self.grads, w.components)):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a] = slice(None, -1)
            hi[a] = slice(1, None)
            out += g * 0.5 * (c[tuple(lo)] + c[tuple(hi)])
        return out

    def adjoint(self, cells: np.ndarray, dims: GridDims) -> StaggeredField:
        comps = []
        for a, g in enumerate(self.grads):
            t = 0.5 * g * cells
            f = np.zeros(dims.face_shape(a))
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a] = slice(None, -1)
            hi[a] = slice(1, None)
            f[tuple(lo)] += t
            f[tuple(hi)] += t
            comps.append(f)
        return StaggeredField(dims, *comps)


def transport_objective(phi_p: np.ndarray, phi_u: np.ndarray, u_u: StaggeredField, dt: float) -> float:
    """``||Φ_u + ∇Φ_p · u_u||²`` with ``u_u`` in world units."""
    w = u_u * (dt / u_u.dims.h)
    r = phi_u + TransportOperator(phi_p).apply(w)
    return float(np.vdot(r, r))


def linearized_advection(phi: np.ndarray, vel: StaggeredField, dt: float) -> np.ndarray:
    """Directional derivative of trilinear advection at zero velocity.

    Uses one-sided differences upwind of ``vel``, which is the exact first
    order term of semi-Lagrangian transport, so
    ``advect(phi, s*vel) - (phi + s*linearized_advection(phi, vel))`` is
    O(s²).
    """
    dims = vel.dims
    out = np.zeros(phi.shape)
    for a, c in enumerate(vel.components):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a] = slice(None, -1)
        hi[a] = slice(1, None)
        s = 0.5 * (c[tuple(lo)] + c[tuple(hi)]) * dt / dims.h
        pad = [(0, 0)] * 3
        pad[a] = (1, 1)
        p = np.pad(phi, pad)  # zero outside, like scalar advection
        sl_prev = [slice(None)] * 3
        sl_next = [slice(None)] * 3
        sl_prev[a] = slice(None, -2)
        sl_next[a] = slice(2, None)
        back = phi - p[tuple(sl_prev)]
        fwd = p[tuple(sl_next)] - phi
        out -= np.where(s >= 0, s * back, s * fwd)
    return out


def _diff(a: np.ndarray, axis: int) -> np.ndarray:
    """Differences between neighbours along ``axis``, zero on the two outer
    (boundary) positions, so the result is one longer than ``a``."""
    d = np.diff(a, axis=axis)
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    return np.pad(d, pad)


def curl_curl(u: StaggeredField) -> StaggeredField:
    """``curl(curl u)`` on the MAC grid (vorticity on edges, grid units).

    The result is the curl of an edge field and therefore exactly
    divergence free; for divergence-free ``u`` it equals ``-Δu`` away from
    the boundary.
    """
    # edge vorticity: wx on (i+1/2, j, k), wy on (i, j+1/2, k), wz on (i, j, k+1/2)
    wx = _diff(u.z, 1) - _diff(u.y, 2)
    wy = _diff(u.x, 2) - _diff(u.z, 0)
    wz = _diff(u.y, 0) - _diff(u.x, 1)
    cx = np.diff(wz, axis=1) - np.diff(wy, axis=2)
    cy = np.diff(wx, axis=2) - np.diff(wz, axis=0)
    cz = np.diff(wy, axis=0) - np.diff(wx, axis=1)
    return StaggeredField(u.dims, cx, cy, cz)


def viscous_increment(u: StaggeredField, nu: float, dt: float) -> StaggeredField:
    """Explicit ``nu*dt*Δu`` written as ``-nu*dt*curl(curl u)`` so that adding
    it keeps a divergence-free prediction divergence free."""
    return curl_curl(u) * (-nu * dt / u.dims.h**2)


def predict_velocity(u_prev: StaggeredField, nu: float, dt: float, tol: float = 1e-4,
                     bottom: int = 0) -> StaggeredField:
    """Self-advect, project, then add the explicit viscosity increment of ``u_prev``."""
    u = pressure_project(advect_velocity(u_prev, u_prev, dt), tol, bottom)
    if nu:
        u = u + viscous_increment(u_prev, nu, dt)
    return u


@dataclass
class SolverSettings:
    pd: PDParams = field(default_factory=PDParams)
    velocity_pd: PDParams = field(default_factory=lambda: PDParams(1.0, 1.0))
    velocity_reg: RegularizerSpec = VELOCITY_REG
    density_reg: RegularizerSpec = DENSITY_REG
    inflow_reg: RegularizerSpec = INFLOW_REG
    cg_tol: float = 1e-4
    cg_maxiter: int = 1000
    cgls_tol: float = 1e-4
    cgls_maxiter: int = 1000
    pressure_tol: float = 1e-4
    coupled: bool = True
    min_dim: int = 16
    pixel_floor: float = 1e-3
    inflow_constant: float | None = None


@dataclass
class ReconLevel:
    """Per-resolution operators: projection, masks, per-frame tomography."""

    dims: GridDims
    P: ProjectionOperator
    masks: DomainMasks
    settings: SolverSettings
    dt: float
    coarse: "ReconLevel | None" = None
    tomography: TomographyProblem | None = None
    phi_target: np.ndarray | None = None
    boundary: InflowBoundary | None = None
    stats: dict = field(default_factory=lambda: {"cg": 0, "pd": 0})

    def prepare(self, images: ImageSet, speed: float, footprint: np.ndarray | None = None) -> None:
        """Per-frame setup: hull, tomography, density target, inflow boundary."""
        s = self.settings
        hull = compute_visual_hull(images, self.P, pixel_floor=s.pixel_floor, exclude=self.masks.inflow)
        self.masks.hull = hull
        self.tomography = TomographyProblem(self.P, hull, s.density_reg, s.pd, s.cgls_tol, s.cgls_maxiter)
        self.phi_target = None
        slab = self.masks.slab
        if footprint is None:
            footprint = inflow_footprint(hull, slab)
        self.masks.footprint = footprint
        self.boundary = InflowBoundary(self.dims, slab, footprint, speed)
        if self.coarse is not None:
            cfp = footprint.reshape(footprint.shape[0] // 2, 2, footprint.shape[1] // 2, 2).any(axis=(1, 3))
            self.coarse.prepare(images, speed, cfp)

    def target(self, images: ImageSet) -> np.ndarray:
        if self.phi_target is None:
            self.phi_target = self.tomography.recon_den(images)
        return self.phi_target

    def inflow(self, images, phi_prev, vel) -> np.ndarray:
        s = self.settings
        if s.inflow_constant is not None:
            return constant_inflow(phi_prev, self.masks, s.inflow_constant)
        return estimate_inflow(images, phi_prev, vel, self.masks, self.dt,
                               phi_target=self.target(images), pd=s.pd,
                               regularizer=s.inflow_reg, tol=s.cgls_tol, maxiter=s.cgls_maxiter)


def inflow_footprint(hull: np.ndarray, slab: int) -> np.ndarray:
    """Columns above which smoke enters: hull cells in the first visible
    layer, dilated by one cell."""
    layer = hull[:, slab, :] if slab < hull.shape[1] else np.zeros((hull.shape[0], hull.shape[2]), bool)
    out = layer.copy()
    out[1:] |= layer[:-1]
    out[:-1] |= layer[1:]
    out[:, 1:] |= layer[:, :-1]
    out[:, :-1] |= layer[:, 1:]
    return out


def _split(vec: np.ndarray, dims: GridDims):
    nf = dims.n_faces
    return StaggeredField.from_flat(dims, vec[:nf]), vec[nf:].reshape(dims.shape)


def _face_reg(w: StaggeredField, reg: RegularizerSpec) -> StaggeredField:
    return w.map(lambda c: reg.smooth * apply_laplacian(c) + reg.kinetic * c)


def recon_vel(level: ReconLevel, u_p: StaggeredField, phi_p: np.ndarray, images: ImageSet) -> StaggeredField:
    """Single-scale residual velocity (world units).

    Runs the PD loop on the stacked unknown (residual velocity, residual
    density).  The shared data prox solves the regularised transport
    least-squares problem with CG; the velocity prox sets the inflow and
    projects to divergence-free fields; the density prox applies a
    tomographic correction.  With ``settings.coupled`` off the residual
    density is the difference between a separate tomography solve and the
    prediction, fixed for the whole loop (simplified variant).
    """
    s = level.settings
    dims = level.dims
    dt = level.dt
    to_cells = dt / dims.h
    pd = s.velocity_pd
    sigma = pd.sigma
    G = TransportOperator(phi_p)
    bc = level.boundary or InflowBoundary(dims, level.masks.slab, None, 0.0)
    bottom = level.masks.slab
    nf, nc = dims.n_faces, dims.size
    vr, dr = s.velocity_reg, s.density_reg

    def velocity_prox(w_flat):
        u = StaggeredField.from_flat(dims, w_flat) * (1.0 / to_cells)
        u = bc.apply(u, u_p)
        u = pressure_project(u, s.pressure_tol, bottom)
        return (u * to_cells).flat()

    state = {"z": None}
    if s.coupled:
        def matvec(v):
            w, phi = _split(v, dims)
            m = G.apply(w) + phi
            out_w = G.adjoint(m, dims) + _face_reg(w, vr) + w * sigma
            out_phi = m + dr.smooth * apply_laplacian(phi) + (dr.kinetic + sigma) * phi
            return np.concatenate([out_w.flat(), out_phi.ravel()])

        A = LinearOperator((nf + nc, nf + nc), matvec=matvec, dtype=float)

        def prox_data(v):
            z, info = solve_cg(A, v, x0=state["z"], tol=s.cg_tol, maxiter=s.cg_maxiter)
            level.stats["cg"] += info.iterations
            state["z"] = z
            return z

        def prox_constraint(v):
            w = velocity_prox(v[:nf])
            phi_w = v[nf:].reshape(dims.shape)
            phi = phi_w + level.tomography.recon_den(images, phi_p + phi_w)
            return np.concatenate([w, phi.ravel()])

        z0 = np.zeros(nf + nc)
    else:
        phi_u = level.target(images) - phi_p
        rhs_shift = G.adjoint(phi_u, dims).flat()

        def matvec(v):
            w = StaggeredField.from_flat(dims, v)
            out = G.adjoint(G.apply(w), dims) + _face_reg(w, vr) + w * sigma
            return out.flat()

        A = LinearOperator((nf, nf), matvec=matvec, dtype=float)

        def prox_data(v):
            z, info = solve_cg(A, v - rhs_shift, x0=state["z"], tol=s.cg_tol, maxiter=s.cg_maxiter)
            level.stats["cg"] += info.iterations
            state["z"] = z
            return z

        prox_constraint = velocity_prox
        z0 = np.zeros(nf)

    history = []

    def record(k, z, x):
        w = StaggeredField.from_flat(dims, z[:nf])
        phi = z[nf:].reshape(dims.shape) if s.coupled else phi_u
        r = phi + G.apply(w)
        history.append(float(np.vdot(r, r)))
        log.debug("stage=recon_vel level=%s iter=%d objective=%.6g", dims.shape, k + 1, history[-1])

    z = pd_iterate(prox_data, prox_constraint, pd, z0=z0, callback=record)
    level.stats["pd"] += pd.iterations
    level.stats["objective"] = history
    u_u = StaggeredField.from_flat(dims, z[:nf]) * (1.0 / to_cells)
    if pd.iterations == 0:
        u_u = pressure_project(bc.apply(u_u, u_p), s.pressure_tol, bottom)
    level.stats["phi_u"] = z[nf:].reshape(dims.shape) if s.coupled else phi_u
    level.stats["max_div"] = max_divergence(u_u, bottom)
    return u_u


def recon_vel_ms(level: ReconLevel, u_p: StaggeredField, phi_p: np.ndarray,
                 phi_prev: np.ndarray, images: ImageSet) -> StaggeredField:
    """Coarse-to-fine residual velocity.

    The residual solved on the next coarser level is prolonged, projected and
    added to the prediction; inflow and predicted density are refreshed with
    it before the residual on this level is solved.  Returns the sum of the
    residuals of all levels.
    """
    if level.coarse is None:
        return recon_vel(level, u_p, phi_p, images)
    s = level.settings
    bottom = level.masks.slab
    coarse_u = recon_vel_ms(level.coarse, restrict_staggered(u_p), restrict(phi_p),
                            restrict(phi_prev), images)
    u_uc = pressure_project(prolong_staggered(coarse_u), s.pressure_tol, bottom)
    u_new = u_p + u_uc
    phi_i = level.inflow(images, phi_prev, u_new)
    phi_new = advect_scalar(phi_prev + phi_i, u_new, level.dt)
    return u_uc + recon_vel(level, u_new, phi_new, images)
