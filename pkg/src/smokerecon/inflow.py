"""Estimation of the unseen density inflow.

Visible cells whose semi-Lagrangian back-trace samples the inflow slab form
the trace target region; the inflow cells they sample form the trace source
region.  The inflow density on the source cells is solved so that advecting
previous plus inflow density reproduces the total density seen in the images.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fluid import advect_scalar, cell_backtrace
from .grid import DomainMasks, StaggeredField
from .optim import (INFLOW_REG, PDParams, RegularizerSpec, build_regularizer, estimate_norm,
                    pd_iterate, project_nonneg, solve_cgls_reg)

log = logging.getLogger(__name__)

__all__ = [
    "trilinear_stencil",
    "trace_regions",
    "InflowProblem",
    "target_discrepancy",
    "extrapolate_source",
    "estimate_inflow",
    "constant_inflow",
]

# squared Courant number 0.01
MIN_CURVATURE = 1e-4


def trilinear_stencil(back: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray]:
    """Flat corner indices and weights ``(N, 8)`` of trilinear sampling.

    Corners outside the grid get index -1 and weight 0, matching the
    zero-outside convention of scalar advection.
    """
    shape = np.asarray(shape)
    c = back.T
    i0 = np.floor(c).astype(np.int64)
    f = c - i0
    n = c.shape[0]
    idx = np.empty((n, 8), dtype=np.int64)
    w = np.empty((n, 8))
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        ijk = i0 + off
        wc = np.prod(np.where(off, f, 1 - f), axis=1)
        inside = np.all((ijk >= 0) & (ijk < shape), axis=1)
        flat = (ijk[:, 0] * shape[1] + ijk[:, 1]) * shape[2] + ijk[:, 2]
        idx[:, corner] = np.where(inside, flat, -1)
        w[:, corner] = np.where(inside, wc, 0.0)
    return idx, w


def trace_regions(vel: StaggeredField, masks: DomainMasks, dt: float, back=None):
    """Return ``(target, source, A_I)`` for the given velocity.

    ``target`` marks visible cells sampling the inflow slab with positive
    weight, ``source`` the inflow cells sampled; ``A_I`` maps source-cell
    values (in flat order) to target-cell values.
    """
    shape = vel.dims.shape
    if back is None:
        back = cell_backtrace(vel, dt)
    idx, w = trilinear_stencil(back, shape)
    inflow_flat = masks.inflow.ravel()
    visible_flat = masks.visible.ravel()
    hits_inflow = (idx >= 0) & (w > 0) & inflow_flat[np.maximum(idx, 0)]
    target_flat = visible_flat & hits_inflow.any(axis=1)
    rows_cells = np.flatnonzero(target_flat)
    sub_idx = idx[rows_cells]
    sub_hit = hits_inflow[rows_cells]
    src_cells = np.unique(sub_idx[sub_hit])
    source_flat = np.zeros(inflow_flat.size, bool)
    source_flat[src_cells] = True
    col_of = np.full(inflow_flat.size, -1, dtype=np.int64)
    col_of[src_cells] = np.arange(src_cells.size)
    r = np.repeat(np.arange(rows_cells.size), 8).reshape(-1, 8)[sub_hit]
    c = col_of[sub_idx[sub_hit]]
    A = sp.csr_matrix((w[rows_cells][sub_hit], (r, c)), shape=(rows_cells.size, src_cells.size))
    A.sum_duplicates()
    return target_flat.reshape(shape), source_flat.reshape(shape), A


def target_discrepancy(delta_target: np.ndarray, target: np.ndarray, inflow: np.ndarray) -> np.ndarray:
    """Per-target-cell share ``d_e`` of the density missing elsewhere.

    The missing total outside target and inflow cells is distributed in
    proportion to the (offset) residual on each target cell, falling back to
    an even split when that weighting is degenerate.
    """
    if not target.any():
        raise ValueError("empty trace target region")
    rest = ~(target | inflow)
    missing = float(delta_target[rest].sum())
    vals = delta_target[target]
    offset = abs(min(0.0, float(vals.min())))
    denom = float((vals + offset).sum())
    if denom == 0.0:
        return np.full(vals.size, missing / vals.size)
    return missing / denom * (vals + offset)


_NEIGHBOURS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


def _shift(a: np.ndarray, off, fill=0):
    out = np.full_like(a, fill)
    src = tuple(slice(max(-o, 0), a.shape[i] - max(o, 0)) for i, o in enumerate(off))
    dst = tuple(slice(max(o, 0), a.shape[i] - max(-o, 0)) for i, o in enumerate(off))
    out[dst] = a[src]
    return out


def extrapolate_source(values: np.ndarray, solved: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Copy solved values one cell outwards into unsolved ``region`` cells.

    Each newly filled cell takes the mean of its solved face neighbours.
    """
    total = np.zeros_like(values)
    count = np.zeros(values.shape)
    for off in _NEIGHBOURS:
        s = _shift(solved, off, False)
        total += np.where(s, _shift(values, off), 0.0)
        count += s
    ring = region & ~solved & (count > 0)
    out = values.copy()
    out[ring] = total[ring] / count[ring]
    return out


@dataclass
class InflowProblem:
    """Least-squares inflow solve on the trace source cells."""

    masks: DomainMasks
    A: sp.csr_matrix
    regularizer: RegularizerSpec = INFLOW_REG
    pd: PDParams = field(default_factory=PDParams)
    tol: float = 1e-4
    maxiter: int = 1000
    normalize: bool = True
    offsets: np.ndarray | None = None
    rhs: np.ndarray | None = None

    def solve(self, delta_target, adv_prev, phi_prev) -> np.ndarray:
        m = self.masks
        target, source = m.trace_target, m.trace_source
        out = np.zeros(phi_prev.shape)
        if not target.any():
            return out
        self.offsets = target_discrepancy(delta_target, target, m.inflow)
        self.rhs = np.maximum(delta_target[target] + self.offsets, -adv_prev[target])
        reg, pd = self.regularizer, self.pd
        if self.normalize:
            # trace weights scale with the Courant number at the slab, so the
            # weights and step are measured against the data curvature; the
            # floor keeps a nearly still slab from inflating the solution
            s = max(estimate_norm(self.A) ** 2, MIN_CURVATURE)
            reg = RegularizerSpec(reg.smooth * s, reg.kinetic * s)
            pd = PDParams(pd.sigma * s, pd.tau / s, pd.theta, pd.iterations)
        R = build_regularizer(reg, phi_prev.shape, source)
        floor = phi_prev[source]
        sigma = pd.sigma
        state = {"w": None}

        def prox_data(v):
            w, _ = solve_cgls_reg(self.A, R, -self.rhs, v / sigma, sigma, x0=state["w"],
                                  tol=self.tol, maxiter=self.maxiter)
            state["w"] = w
            return w

        z = pd_iterate(prox_data, lambda w: project_nonneg(w, floor), pd,
                       z0=np.zeros(self.A.shape[1]))
        out[source] = z
        out = extrapolate_source(out, source, m.inflow)
        return project_nonneg(out, phi_prev) * m.inflow


def estimate_inflow(images, phi_prev: np.ndarray, vel: StaggeredField, masks: DomainMasks,
                    dt: float, tomography=None, phi_target: np.ndarray | None = None,
                    pd: PDParams | None = None, regularizer: RegularizerSpec = INFLOW_REG,
                    tol: float = 1e-4, maxiter: int = 1000,
                    diagnostics: dict | None = None) -> np.ndarray:
    """Inflow density ``Φ_I`` (supported on the inflow slab).

    The density target is the tomographic reconstruction of ``images``
    (pass ``phi_target`` to reuse one).  The trace masks are written back
    into ``masks``.
    """
    if phi_target is None:
        phi_target = tomography.recon_den(images)
    back = cell_backtrace(vel, dt)
    adv_prev = advect_scalar(phi_prev, vel, dt, back)
    delta = phi_target - adv_prev
    target, source, A = trace_regions(vel, masks, dt, back)
    masks.trace_target, masks.trace_source = target, source
    problem = InflowProblem(masks, A, regularizer, pd or PDParams(), tol, maxiter)
    phi_i = problem.solve(delta, adv_prev, phi_prev)
    if diagnostics is not None:
        diagnostics.update(target=target, source=source, problem=problem, adv_prev=adv_prev)
    log.debug("stage=inflow target_cells=%d source_cells=%d mass=%.4g",
              int(target.sum()), int(source.sum()), float(phi_i.sum()))
    return phi_i


def constant_inflow(phi_prev: np.ndarray, masks: DomainMasks, value: float) -> np.ndarray:
    """Inflow that raises slab cells below the footprint to ``value``.

    A fixed-rate baseline for comparison with the estimated inflow.
    """
    region = masks.inflow.copy()
    if masks.footprint is not None:
        region &= masks.footprint[:, None, :]
    return np.where(region, np.maximum(value - phi_prev, 0.0), 0.0)
