"""Matrix-free least-squares solvers and the primal-dual iteration.

All solvers accept anything :func:`scipy.sparse.linalg.aslinearoperator`
understands (sparse matrices, dense arrays, ``LinearOperator``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from .grid import laplacian_stencil

log = logging.getLogger(__name__)

__all__ = [
    "RegularizerSpec",
    "VELOCITY_REG",
    "DENSITY_REG",
    "INFLOW_REG",
    "PDParams",
    "SolveInfo",
    "SolverBreakdown",
    "PDDivergenceError",
    "solve_cgls_reg",
    "solve_cg",
    "pd_iterate",
    "project_nonneg",
    "build_regularizer",
    "masked_laplacian",
    "estimate_norm",
]


class SolverBreakdown(ArithmeticError):
    """Non-positive curvature met inside a conjugate-gradient iteration."""


class PDDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegularizerSpec:
    """Weights of the smoothness (Laplacian) and kinetic (identity) terms."""

    smooth: float
    kinetic: float

    def __post_init__(self):
        if self.smooth < 0 or self.kinetic < 0:
            raise ValueError("regularizer weights must be non-negative")


VELOCITY_REG = RegularizerSpec(1e-1, 5e-4)
DENSITY_REG = RegularizerSpec(6e-1, 5e-2)
INFLOW_REG = RegularizerSpec(5e-3, 1e-2)


@dataclass(frozen=True)
class PDParams:
    sigma: float = 1.0
    tau: float = 1.0
    theta: float = 1.0
    iterations: int = 10

    def __post_init__(self):
        if not (self.sigma > 0 and self.tau > 0):
            raise ValueError("sigma and tau must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.iterations < 0:
            raise ValueError("iteration count must be non-negative")

    @classmethod
    def for_operator(cls, norm: float, theta: float = 1.0, iterations: int = 10) -> "PDParams":
        """Largest symmetric steps, ``sigma = tau = 1/||K||``."""
        return cls(1.0 / norm, 1.0 / norm, theta, iterations)

    def check(self, norm: float) -> None:
        if self.sigma * self.tau * norm**2 > 1.0 + 1e-12:
            raise ValueError(
                f"sigma*tau*||K||^2 = {self.sigma * self.tau * norm**2:.3g} > 1; PD may diverge"
            )


@dataclass
class SolveInfo:
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    history: list = field(default_factory=list, repr=False)


def _op(a) -> LinearOperator:
    if a is None:
        return None
    return aslinearoperator(a)


def solve_cgls_reg(P, R, b, b_pd, sigma: float, x0=None, tol: float = 1e-4,
                   maxiter: int = 1000, record: bool = False):
    """Regularised CGLS for ``(PᵀP + R + σI) x = σ b_pd − Pᵀb``.

    ``P`` is only ever applied as a product (``P p`` then ``Pᵀ(P p)``); the
    normal matrix is never formed.  Stops when ``||r_k|| <= tol * ||rhs||``
    (identical to ``||r_k||/||r_0||`` for a zero start) or after ``maxiter``
    iterations.

    Returns
    -------
    x : ndarray
    info : SolveInfo
        ``converged`` is False when ``maxiter`` was hit; ``history`` holds the
        quadratic objective per iteration when ``record`` is set.
    """
    P = _op(P)
    R = _op(R)
    n = P.shape[1]
    b = np.asarray(b, float)
    b_pd = np.zeros(n) if b_pd is None else np.asarray(b_pd, float)

    def normal(v):
        out = P.rmatvec(P.matvec(v)) + sigma * v
        if R is not None:
            out = out + R.matvec(v)
        return out

    rhs = sigma * b_pd - P.rmatvec(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = rhs - normal(x) if x.any() else rhs.copy()
    rhs_norm = float(np.linalg.norm(rhs))
    info = SolveInfo()

    def objective(v, res):
        # 0.5 vᵀAv - rhsᵀv  ==  -0.5 (res + rhs)ᵀ v
        return -0.5 * float(np.dot(res + rhs, v))

    if record:
        info.history.append(objective(x, r))
    rr = float(np.dot(r, r))
    if rhs_norm == 0.0 and rr == 0.0:
        return x, info
    target = tol * rhs_norm
    p = r.copy()
    k = 0
    while math.sqrt(rr) > target and k < maxiter:
        Pp = P.matvec(p)
        Ap_extra = sigma * p if R is None else R.matvec(p) + sigma * p
        denom = float(np.dot(Pp, Pp) + np.dot(p, Ap_extra))
        if not denom > 0:
            raise SolverBreakdown(f"CGLS curvature {denom:.3e} <= 0 at iteration {k}")
        alpha = rr / denom
        x += alpha * p
        r -= alpha * (P.rmatvec(Pp) + Ap_extra)
        rr_new = float(np.dot(r, r))
        p = r + (rr_new / rr) * p
        rr = rr_new
        k += 1
        if record:
            info.history.append(objective(x, r))
    info.iterations = k
    info.residual = math.sqrt(rr) / rhs_norm if rhs_norm > 0 else math.sqrt(rr)
    info.converged = math.sqrt(rr) <= target
    if not info.converged:
        log.warning("solver=cgls converged=0 iterations=%d residual=%.3e", k, info.residual)
    else:
        log.debug("solver=cgls iterations=%d residual=%.3e", k, info.residual)
    return x, info


def solve_cg(A, b, x0=None, tol: float = 1e-4, maxiter: int = 1000):
    """Conjugate gradients for symmetric positive (semi-)definite ``A``.

    Stops when ``||Ax - b|| <= tol * ||b||``.
    """
    A = _op(A)
    b = np.asarray(b, float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - A.matvec(x) if x.any() else b.copy()
    b_norm = float(np.linalg.norm(b))
    info = SolveInfo()
    rr = float(np.dot(r, r))
    if b_norm == 0.0:
        x[:] = 0.0
        return x, info
    target = tol * b_norm
    p = r.copy()
    k = 0
    while math.sqrt(rr) > target and k < maxiter:
        Ap = A.matvec(p)
        denom = float(np.dot(p, Ap))
        if not denom > 0:
            raise SolverBreakdown(f"CG curvature {denom:.3e} <= 0 at iteration {k}")
        alpha = rr / denom
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(np.dot(r, r))
        p = r + (rr_new / rr) * p
        rr = rr_new
        k += 1
    info.iterations = k
    info.residual = math.sqrt(rr) / b_norm
    info.converged = math.sqrt(rr) <= target
    if not info.converged:
        log.warning("solver=cg converged=0 iterations=%d residual=%.3e", k, info.residual)
    return x, info


def pd_iterate(prox_data: Callable, prox_constraint: Callable, params: PDParams,
               x0=None, z0=None, callback: Callable | None = None,
               growth_limit: float = 1e3):
    """Primal-dual loop with an identity coupling operator.

    Each iteration::

        v   = x + σ y
        x   = v − σ prox_data(v)
        z'  = prox_constraint(z − τ x)
        y   = z' + θ (z' − z)

    ``prox_data(v)`` must return the minimiser of ``F(w) + σ/2 ||w − v/σ||²``.

    Raises
    ------
    PDDivergenceError
        If the primal norm grows beyond ``growth_limit`` times its first
        non-zero value.
    """
    sigma, tau, theta = params.sigma, params.tau, params.theta
    if z0 is None and x0 is None:
        raise ValueError("need a starting primal or dual vector")
    z = np.zeros_like(np.asarray(x0, float)) if z0 is None else np.array(z0, float)
    x = np.zeros_like(z) if x0 is None else np.array(x0, float)
    y = z.copy()
    ref = float(np.linalg.norm(z)) or None
    for k in range(params.iterations):
        v = x + sigma * y
        x = v - sigma * prox_data(v)
        z_new = prox_constraint(z - tau * x)
        y = z_new + theta * (z_new - z)
        z = z_new
        norm = float(np.linalg.norm(z))
        if ref is None and norm > 0:
            ref = norm
        elif ref is not None and norm > growth_limit * ref:
            raise PDDivergenceError(f"primal norm grew {norm / ref:.3g}x by iteration {k + 1}")
        if callback is not None:
            callback(k, z, x)
    return z


def project_nonneg(x: np.ndarray, floor: np.ndarray | float = 0.0) -> np.ndarray:
    """Clamp so that ``x + floor >= 0``."""
    return np.maximum(x, -np.asarray(floor))


def masked_laplacian(shape, mask: np.ndarray | None = None) -> sp.csr_matrix:
    """Grid-unit Neumann Laplacian restricted to the cells in ``mask``.

    Neighbours outside the mask are treated like domain boundaries, so rows
    still sum to zero.
    """
    lap = laplacian_stencil(tuple(shape), 1.0)
    if mask is None:
        return lap
    idx = np.flatnonzero(np.ravel(mask))
    sub = lap[idx][:, idx].tocsr()
    off = sub - sp.diags(sub.diagonal())
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(diag)).tocsr()


def build_regularizer(spec: RegularizerSpec, shape, mask: np.ndarray | None = None) -> sp.csr_matrix:
    """``smooth * L + kinetic * I`` in grid units; symmetric positive semi-definite."""
    if hasattr(shape, "shape") and not isinstance(shape, tuple):
        shape = shape.shape
    lap = masked_laplacian(shape, mask)
    n = lap.shape[0]
    return (spec.smooth * lap + spec.kinetic * sp.identity(n, format="csr")).tocsr()


def estimate_norm(op, n: int | None = None, iterations: int = 20, seed: int = 0) -> float:
    """Operator 2-norm by power iteration on ``KᵀK``."""
    K = _op(op)
    n = K.shape[1] if n is None else n
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iterations):
        w = K.rmatvec(K.matvec(v))
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        v = w / est
    return math.sqrt(est)
