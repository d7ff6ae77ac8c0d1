"""Density reconstruction from images with a non-negativity floor."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .imaging import ImageSet, ProjectionOperator
from .optim import (
    DENSITY_REG,
    PDParams,
    RegularizerSpec,
    build_regularizer,
    pd_iterate,
    project_nonneg,
    solve_cgls_reg,
)

log = logging.getLogger(__name__)

__all__ = ["TomographyProblem"]


@dataclass
class TomographyProblem:
    """Tomography restricted to the visual hull.

    Voxels outside ``hull`` are eliminated from the unknowns.  All solves
    run in cell units (weights divided by ``h``) so the regulariser weights
    do not depend on the world scale.
    """

    P: ProjectionOperator
    hull: np.ndarray
    regularizer: RegularizerSpec = DENSITY_REG
    pd: PDParams = field(default_factory=PDParams)
    tol: float = 1e-4
    maxiter: int = 1000
    cgls_iterations: int = 0

    def __post_init__(self):
        if self.hull.shape != self.P.dims.shape:
            raise ValueError("hull mask does not match the projection grid")
        self.cols = np.flatnonzero(self.hull.ravel())
        Pn = self.P.normalized
        self.Ph = Pn.tocsc()[:, self.cols].tocsr()
        self.PhT = self.Ph.T.tocsr()
        self.R = build_regularizer(self.regularizer, self.hull.shape, self.hull)

    @property
    def n_unknowns(self) -> int:
        return self.cols.size

    def _operator(self):
        Ph, PhT = self.Ph, self.PhT
        return sp.linalg.LinearOperator(Ph.shape, matvec=lambda v: Ph @ v,
                                        rmatvec=lambda v: PhT @ v, dtype=float)

    def recon_den(self, images: ImageSet | np.ndarray, floor: np.ndarray | None = None) -> np.ndarray:
        """Solve for a density delta ``z`` with ``z + floor >= 0``.

        The residual image ``i - P floor`` is fitted by the PD loop with
        regularised CGLS as data prox and the floored non-negativity
        projection as constraint.  Off-hull voxels keep the smallest
        admissible value (zero whenever ``floor >= 0``).
        """
        shape = self.P.dims.shape
        flat = images.flat() if isinstance(images, ImageSet) else np.ravel(images)
        if flat.size != self.P.shape[0]:
            raise ValueError(f"image vector has {flat.size} pixels, operator expects {self.P.shape[0]}")
        floor = np.zeros(shape) if floor is None else np.asarray(floor, float)
        if floor.shape != shape:
            raise ValueError(f"floor shape {floor.shape} does not match grid {shape}")
        out = np.maximum(0.0, -floor).ravel()
        if self.n_unknowns == 0:
            return out.reshape(shape)
        residual = (flat - self.P.apply(floor)) / self.P.dims.h
        floor_h = floor.ravel()[self.cols]
        if not residual.any() and not (floor_h < 0).any():
            return out.reshape(shape)
        sigma = self.pd.sigma
        op = self._operator()
        state = {"w": None}

        def prox_data(v):
            w, info = solve_cgls_reg(op, self.R, -residual, v / sigma, sigma,
                                     x0=state["w"], tol=self.tol, maxiter=self.maxiter)
            self.cgls_iterations += info.iterations
            state["w"] = w
            return w

        z = pd_iterate(prox_data, lambda w: project_nonneg(w, floor_h), self.pd,
                       z0=np.zeros(self.n_unknowns))
        out[self.cols] = z
        return out.reshape(shape)

    def recon_correction(self, images, phi_p: np.ndarray, phi_u: np.ndarray) -> np.ndarray:
        """Correction ``Φ_c`` so ``P(Φ_u + Φ_c)`` fits ``i - PΦ_p`` and
        ``Φ_p + Φ_u + Φ_c >= 0``."""
        return self.recon_den(images, phi_p + phi_u)
