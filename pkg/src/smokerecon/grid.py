"""Grid containers, domain masks and discrete differential operators.

Scalar fields are plain ``numpy`` arrays of shape ``(nx, ny, nz)`` holding
cell-centred values.  Velocities live on a staggered (MAC) layout: the
x-component on the ``(nx+1, ny, nz)`` x-faces and so on.  The y axis points
upwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "GridDims",
    "StaggeredField",
    "DomainMasks",
    "divergence",
    "gradient",
    "laplacian_stencil",
    "apply_laplacian",
    "restrict",
    "prolong",
    "restrict_staggered",
    "prolong_staggered",
    "face_average",
    "MIN_COARSE_DIM",
]

# coarsest multi-scale level: stop once a further halving would drop below this
MIN_COARSE_DIM = 16


@dataclass(frozen=True)
class GridDims:
    """Uniform grid resolution and cell size (world units)."""

    nx: int
    ny: int
    nz: int
    h: float = 1.0

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if int(getattr(self, name)) < 4:
                raise ValueError(f"{name} must be >= 4, got {getattr(self, name)}")
        if not self.h > 0:
            raise ValueError(f"cell size h must be positive, got {self.h}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    def face_shape(self, axis: int) -> tuple[int, int, int]:
        s = list(self.shape)
        s[axis] += 1
        return tuple(s)

    @property
    def face_shapes(self):
        return tuple(self.face_shape(a) for a in range(3))

    @property
    def n_faces(self) -> int:
        return sum(int(np.prod(s)) for s in self.face_shapes)

    def coarse(self) -> "GridDims":
        if self.nx % 2 or self.ny % 2 or self.nz % 2:
            raise ValueError(f"cannot restrict odd dims {self.shape}")
        return GridDims(self.nx // 2, self.ny // 2, self.nz // 2, self.h * 2)

    def fine(self) -> "GridDims":
        return GridDims(self.nx * 2, self.ny * 2, self.nz * 2, self.h / 2)

    def can_coarsen(self, min_dim: int = MIN_COARSE_DIM) -> bool:
        if self.nx % 2 or self.ny % 2 or self.nz % 2:
            return False
        return min(self.shape) // 2 >= min_dim

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)


@dataclass
class StaggeredField:
    """Face-centred velocity field."""

    dims: GridDims
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        for a, comp in enumerate(self.components):
            if comp.shape != self.dims.face_shape(a):
                raise ValueError(
                    f"component {a} has shape {comp.shape}, expected {self.dims.face_shape(a)}"
                )

    @classmethod
    def zeros(cls, dims: GridDims) -> "StaggeredField":
        return cls(dims, *(np.zeros(s) for s in dims.face_shapes))

    @classmethod
    def constant(cls, dims: GridDims, value) -> "StaggeredField":
        return cls(dims, *(np.full(s, float(v)) for s, v in zip(dims.face_shapes, value)))

    @classmethod
    def from_flat(cls, dims: GridDims, flat: np.ndarray) -> "StaggeredField":
        comps = []
        start = 0
        for s in dims.face_shapes:
            n = int(np.prod(s))
            comps.append(np.asarray(flat[start:start + n], dtype=float).reshape(s))
            start += n
        if start != flat.size:
            raise ValueError(f"flat vector of length {flat.size} does not match {dims}")
        return cls(dims, *comps)

    @property
    def components(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.x, self.y, self.z)

    def flat(self) -> np.ndarray:
        return np.concatenate([c.ravel() for c in self.components])

    def copy(self) -> "StaggeredField":
        return StaggeredField(self.dims, self.x.copy(), self.y.copy(), self.z.copy())

    def map(self, fn) -> "StaggeredField":
        return StaggeredField(self.dims, *(fn(c) for c in self.components))

    def max_abs(self) -> float:
        return max(float(np.abs(c).max()) for c in self.components)

    def is_finite(self) -> bool:
        return all(np.isfinite(c).all() for c in self.components)

    def __add__(self, other: "StaggeredField") -> "StaggeredField":
        return StaggeredField(self.dims, self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "StaggeredField") -> "StaggeredField":
        return StaggeredField(self.dims, self.x - other.x, self.y - other.y, self.z - other.z)

    def __mul__(self, s: float) -> "StaggeredField":
        return StaggeredField(self.dims, self.x * s, self.y * s, self.z * s)

    __rmul__ = __mul__

    def dot(self, other: "StaggeredField") -> float:
        return float(sum(np.vdot(a, b) for a, b in zip(self.components, other.components)))


@dataclass
class DomainMasks:
    """Cell classification of the reconstruction domain.

    ``inflow`` is the unseen source slab, ``visible`` its complement.  The
    trace masks are per-frame and are filled in by the inflow solver.
    """

    visible: np.ndarray
    inflow: np.ndarray
    hull: np.ndarray | None = None
    trace_target: np.ndarray | None = None
    trace_source: np.ndarray | None = None
    footprint: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if np.any(self.visible & self.inflow):
            raise ValueError("inflow and visible masks overlap")
        if self.trace_source is not None and np.any(self.trace_source & ~self.inflow):
            raise ValueError("trace source cells must lie in the inflow region")
        if self.trace_target is not None and np.any(self.trace_target & ~self.visible):
            raise ValueError("trace target cells must lie in the visible region")

    @property
    def slab(self) -> int:
        """Thickness (cells) of the bottom inflow slab."""
        column = self.inflow[0, :, 0]
        return int(column.sum())

    @classmethod
    def bottom_slab(cls, dims: GridDims, thickness: int) -> "DomainMasks":
        inflow = np.zeros(dims.shape, dtype=bool)
        inflow[:, :thickness, :] = True
        return cls(visible=~inflow, inflow=inflow)

    def coarse(self) -> "DomainMasks":
        dims = self.inflow.shape
        cdims = tuple(d // 2 for d in dims)
        thickness = max(self.slab // 2, 1) if self.slab else 0
        inflow = np.zeros(cdims, dtype=bool)
        inflow[:, :thickness, :] = True
        out = DomainMasks(visible=~inflow, inflow=inflow)
        if self.footprint is not None:
            fp = self.footprint
            out.footprint = fp.reshape(cdims[0], 2, cdims[2], 2).any(axis=(1, 3))
        return out


def divergence(vel: StaggeredField) -> np.ndarray:
    """Cell-centred MAC divergence, scaled by ``1/h``."""
    h = vel.dims.h
    return (np.diff(vel.x, axis=0) + np.diff(vel.y, axis=1) + np.diff(vel.z, axis=2)) / h


def gradient(s: np.ndarray, dims: GridDims) -> StaggeredField:
    """Face-centred differences of adjacent cells, scaled by ``1/h``.

    Domain-boundary faces carry zero normal gradient, so that
    ``divergence(gradient(s)) == -laplacian_stencil(dims) @ s``.
    """
    h = dims.h
    comps = []
    for axis in range(3):
        g = np.zeros(dims.face_shape(axis))
        inner = [slice(None)] * 3
        inner[axis] = slice(1, -1)
        g[tuple(inner)] = np.diff(s, axis=axis) / h
        comps.append(g)
    return StaggeredField(dims, *comps)


def _neumann_1d(n: int) -> sp.csr_matrix:
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    off = -np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def laplacian_stencil(dims: GridDims | tuple, h: float | None = None) -> sp.csr_matrix:
    """Positive semi-definite 7-point Neumann Laplacian (``-Δ``) on a box.

    Rows follow C-order flattening of the ``(nx, ny, nz)`` array.  A missing
    neighbour drops its off-diagonal and reduces the diagonal, so every row
    sums to zero.
    """
    if isinstance(dims, GridDims):
        shape, h = dims.shape, dims.h if h is None else h
    else:
        shape, h = tuple(dims), 1.0 if h is None else h
    nx, ny, nz = shape
    ix, iy, iz = sp.identity(nx), sp.identity(ny), sp.identity(nz)
    lap = (
        sp.kron(sp.kron(_neumann_1d(nx), iy), iz)
        + sp.kron(sp.kron(ix, _neumann_1d(ny)), iz)
        + sp.kron(sp.kron(ix, iy), _neumann_1d(nz))
    )
    return (lap / h**2).tocsr()


def apply_laplacian(a: np.ndarray, h: float = 1.0) -> np.ndarray:
    """Matrix-free ``-Δ a`` with Neumann boundaries, any 3-D array shape."""
    out = np.zeros_like(a)
    for axis in range(3):
        d = np.diff(a, axis=axis)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        out[tuple(lo)] -= d
        out[tuple(hi)] += d
    return out / h**2


def restrict(a: np.ndarray) -> np.ndarray:
    """Average 2x2x2 cell blocks to half resolution."""
    nx, ny, nz = a.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise ValueError(f"cannot restrict odd shape {a.shape}")
    return a.reshape(nx // 2, 2, ny // 2, 2, nz // 2, 2).mean(axis=(1, 3, 5))


def _prolong_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # cell-centred linear interpolation to double resolution; linear ghost
    # extrapolation keeps restrict(prolong(a)) == a in the edge cells
    a = np.moveaxis(a, axis, 0)
    pad = np.concatenate([2 * a[:1] - a[1:2], a, 2 * a[-1:] - a[-2:-1]], axis=0)
    even = 0.75 * pad[1:-1] + 0.25 * pad[:-2]
    odd = 0.75 * pad[1:-1] + 0.25 * pad[2:]
    out = np.empty((2 * a.shape[0],) + a.shape[1:])
    out[0::2] = even
    out[1::2] = odd
    return np.moveaxis(out, 0, axis)


def prolong(a: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a cell-centred field to double resolution."""
    for axis in range(3):
        a = _prolong_axis(a, axis)
    return a


def restrict_staggered(vel: StaggeredField) -> StaggeredField:
    """Average the four fine faces covering each coarse face.

    Coarse face ``i`` along the normal axis coincides with fine face ``2i``.
    """
    cdims = vel.dims.coarse()
    comps = []
    for axis, c in enumerate(vel.components):
        sl = [slice(None)] * 3
        sl[axis] = slice(0, None, 2)
        c = c[tuple(sl)]
        shape = list(c.shape)
        blocks = []
        for a in range(3):
            if a == axis:
                blocks.extend([shape[a], 1])
            else:
                blocks.extend([shape[a] // 2, 2])
        comps.append(c.reshape(blocks).mean(axis=(1, 3, 5)))
    return StaggeredField(cdims, *comps)


def _prolong_face_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # face (node-like) positions along the normal axis: 0, h, 2h ...
    a = np.moveaxis(a, axis, 0)
    out = np.empty((2 * (a.shape[0] - 1) + 1,) + a.shape[1:])
    out[0::2] = a
    out[1::2] = 0.5 * (a[:-1] + a[1:])
    return np.moveaxis(out, 0, axis)


def prolong_staggered(vel: StaggeredField) -> StaggeredField:
    """Trilinear interpolation of each staggered component to double resolution."""
    fdims = vel.dims.fine()
    comps = []
    for axis, c in enumerate(vel.components):
        for a in range(3):
            c = _prolong_face_axis(c, a) if a == axis else _prolong_axis(c, a)
        comps.append(c)
    return StaggeredField(fdims, *comps)


def face_average(s: np.ndarray, axis: int) -> np.ndarray:
    """Average cell values onto the faces normal to ``axis``; boundary faces copy."""
    a = np.moveaxis(s, axis, 0)
    out = np.empty((a.shape[0] + 1,) + a.shape[1:])
    out[1:-1] = 0.5 * (a[1:] + a[:-1])
    out[0] = a[0]
    out[-1] = a[-1]
    return np.moveaxis(out, 0, axis)
