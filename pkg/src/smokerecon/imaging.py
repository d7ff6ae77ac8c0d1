"""Linear image formation: ray-marched projection matrix, rendering and visual hull."""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .grid import GridDims
from . import volio

__all__ = [
    "PinholeCamera",
    "RayCamera",
    "ImageSet",
    "ProjectionOperator",
    "ConfigurationError",
    "build_projection",
    "render",
    "compute_visual_hull",
    "arc_cameras",
    "load_cameras",
    "save_cameras",
]


class ConfigurationError(ValueError):
    pass


@dataclass
class PinholeCamera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera space.

    Pixels are indexed ``[px, py]`` with ``py`` growing upwards; the
    intrinsic matrix uses the usual downward image ``v`` axis.
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.width, self.height)

    @property
    def center(self) -> np.ndarray:
        return -np.asarray(self.rotation).T @ np.asarray(self.translation)

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        px, py = np.meshgrid(np.arange(self.width), np.arange(self.height), indexing="ij")
        u = px.ravel() + 0.5
        v = self.height - (py.ravel() + 0.5)
        pix = np.stack([u, v, np.ones_like(u)])
        d_cam = np.linalg.solve(np.asarray(self.intrinsics, float), pix)
        d = (np.asarray(self.rotation, float).T @ d_cam).T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d

    def meters_per_pixel(self, point: np.ndarray) -> float:
        depth = float((np.asarray(self.rotation) @ point + self.translation)[2])
        return depth / float(self.intrinsics[1][1])


@dataclass
class RayCamera:
    """Explicit per-pixel rays (dense ray calibration)."""

    origins: np.ndarray
    directions: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.origins = np.asarray(self.origins, float).reshape(-1, 3)
        d = np.asarray(self.directions, float).reshape(-1, 3)
        self.directions = d / np.linalg.norm(d, axis=1, keepdims=True)
        if self.origins.shape[0] == 0:
            raise ConfigurationError("ray camera without pixels")
        if self.origins.shape[0] != self.width * self.height:
            raise ConfigurationError("ray count does not match image size")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.width, self.height)

    def rays(self):
        return self.origins, self.directions


@dataclass
class ImageSet:
    """Per-view float images indexed ``[px, py]``."""

    images: list[np.ndarray]
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = [np.asarray(im, dtype=float) for im in self.images]
        if not self.ids:
            self.ids = [f"view{i}" for i in range(len(self.images))]

    def flat(self) -> np.ndarray:
        return np.concatenate([im.ravel() for im in self.images])

    @property
    def shapes(self):
        return [im.shape for im in self.images]

    def scaled(self, s: float) -> "ImageSet":
        return ImageSet([im * s for im in self.images], list(self.ids))

    def __len__(self):
        return len(self.images)


class ProjectionOperator:
    """Sparse voxel-to-pixel integration matrix (world-unit path lengths)."""

    def __init__(self, matrix: sp.csr_matrix, dims: GridDims, view_shapes):
        self.matrix = matrix.tocsr()
        self.dims = dims
        self.view_shapes = [tuple(s) for s in view_shapes]

    @property
    def shape(self):
        return self.matrix.shape

    @cached_property
    def normalized(self) -> sp.csr_matrix:
        """Weights in cell units (path length / h)."""
        return (self.matrix / self.dims.h).tocsr()

    @cached_property
    def transpose(self) -> sp.csr_matrix:
        return self.matrix.T.tocsr()

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ np.ravel(x)

    def apply_transpose(self, y: np.ndarray) -> np.ndarray:
        return self.transpose @ np.ravel(y)

    def split(self, flat: np.ndarray) -> ImageSet:
        out = []
        start = 0
        for s in self.view_shapes:
            n = s[0] * s[1]
            out.append(flat[start:start + n].reshape(s))
            start += n
        return ImageSet(out)

    def restricted(self, voxel_mask: np.ndarray) -> "ProjectionOperator":
        """Zero the columns of voxels outside ``voxel_mask``."""
        keep = sp.diags(np.ravel(voxel_mask).astype(float))
        m = (self.matrix @ keep).tocsr()
        m.eliminate_zeros()
        return ProjectionOperator(m, self.dims, self.view_shapes)


def _box_intersections(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab and outside it never hit
    parallel_out = (d == 0) & ((o < lo) | (o > hi))
    t0 = np.max(tmin, axis=1)
    t1 = np.min(tmax, axis=1)
    t0 = np.maximum(t0, 0.0)
    hit = (t1 > t0) & ~parallel_out.any(axis=1)
    return t0, t1, hit


def _march_chunk(o, d, t0, t1, rows, dims: GridDims):
    h = dims.h
    shape = np.array(dims.shape)
    chord = t1 - t0
    nsteps = np.maximum(np.ceil(chord / (0.5 * h) - 1e-9).astype(int), 1)
    step = chord / nsteps
    m = int(nsteps.max())
    j = np.arange(m)
    valid = j[None, :] < nsteps[:, None]
    ray_idx, samp = np.nonzero(valid)
    t = t0[ray_idx] + (samp + 0.5) * step[ray_idx]
    pos = o[ray_idx] + t[:, None] * d[ray_idx]
    c = pos / h - 0.5
    c = np.clip(c, 0.0, shape - 1)
    i0 = np.minimum(np.floor(c).astype(int), shape - 2)
    f = c - i0
    w_step = step[ray_idx]
    rr, cc, ww = [], [], []
    for corner in range(8):
        ox, oy, oz = (corner >> 2) & 1, (corner >> 1) & 1, corner & 1
        wx = f[:, 0] if ox else 1 - f[:, 0]
        wy = f[:, 1] if oy else 1 - f[:, 1]
        wz = f[:, 2] if oz else 1 - f[:, 2]
        w = wx * wy * wz * w_step
        col = ((i0[:, 0] + ox) * shape[1] + (i0[:, 1] + oy)) * shape[2] + (i0[:, 2] + oz)
        keep = w > 0
        rr.append(rows[ray_idx[keep]])
        cc.append(col[keep])
        ww.append(w[keep])
    return np.concatenate(rr), np.concatenate(cc), np.concatenate(ww)


def build_projection(cameras, dims: GridDims, voxel_mask: np.ndarray | None = None,
                     chunk: int = 2048) -> ProjectionOperator:
    """Integrate trilinear samples along each pixel ray at step <= h/2.

    ``voxel_mask`` limits which voxels are seen (e.g. excluding the hidden
    inflow slab).
    """
    lo = np.zeros(3)
    hi = np.array(dims.shape, float) * dims.h
    blocks = []
    shapes = []
    offset = 0
    any_hit = False
    for cam in cameras:
        o, d = cam.rays()
        n = o.shape[0]
        shapes.append(cam.shape)
        t0, t1, hit = _box_intersections(o, d, lo, hi)
        any_hit |= bool(hit.any())
        idx = np.nonzero(hit)[0]
        for s in range(0, idx.size, chunk):
            sel = idx[s:s + chunk]
            r, c, w = _march_chunk(o[sel], d[sel], t0[sel], t1[sel], sel + offset, dims)
            blocks.append((r, c, w))
        offset += n
    if not any_hit:
        raise ConfigurationError("no camera ray intersects the reconstruction domain")
    r = np.concatenate([b[0] for b in blocks]) if blocks else np.zeros(0, int)
    c = np.concatenate([b[1] for b in blocks]) if blocks else np.zeros(0, int)
    w = np.concatenate([b[2] for b in blocks]) if blocks else np.zeros(0)
    m = sp.csr_matrix((w, (r, c)), shape=(offset, dims.size))
    m.sum_duplicates()
    op = ProjectionOperator(m, dims, shapes)
    if voxel_mask is not None:
        op = op.restricted(voxel_mask)
    return op


def render(P: ProjectionOperator, density: np.ndarray) -> ImageSet:
    """Line-integral images ``P @ density`` split per view."""
    if density.shape != P.dims.shape:
        raise ValueError(f"density shape {density.shape} does not match operator {P.dims.shape}")
    return P.split(P.apply(density))


def compute_visual_hull(images: ImageSet, P: ProjectionOperator, weight_keep: float = 1e-4,
                        weight_exclude: float = 1e-2, pixel_floor: float = 1e-3,
                        exclude: np.ndarray | None = None) -> np.ndarray:
    """Voxels consistent with every empty pixel.

    A pixel is empty when its value is at most ``pixel_floor`` times the
    brightest pixel.  Weights are compared in cell units.  Voxels in
    ``exclude`` (inflow source cells) are always outside.
    """
    flat = images.flat()
    if flat.size != P.shape[0]:
        raise ValueError("image set does not match projection operator")
    Pn = P.normalized
    peak = float(flat.max()) if flat.size else 0.0
    empty = flat <= pixel_floor * peak if peak > 0 else np.ones(flat.size, bool)
    covered = np.asarray(Pn.max(axis=0).todense()).ravel() > weight_keep
    if empty.any():
        sub = Pn[np.nonzero(empty)[0]]
        carved = np.asarray(sub.max(axis=0).todense()).ravel() > weight_exclude
    else:
        carved = np.zeros(P.shape[1], bool)
    if not (~empty).any():
        covered[:] = False
    hull = (covered & ~carved).reshape(P.dims.shape)
    if exclude is not None:
        hull &= ~exclude
    return hull


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    eye, target, up = (np.asarray(v, float) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ eye


def arc_cameras(dims: GridDims, n_views: int = 5, arc_degrees: float = 120.0,
                distance: float = 3.0, pixels_per_cell: float = 1.0,
                margin: float = 1.05) -> list[PinholeCamera]:
    """Pinhole cameras on a horizontal frontal arc, aimed at the domain centre.

    ``distance`` is in multiples of the domain height.
    """
    extent = np.array(dims.shape, float) * dims.h
    center = extent / 2
    dist = distance * extent[1]
    height = max(int(round(dims.ny * pixels_per_cell)), 4)
    half_w = 0.5 * math.hypot(extent[0], extent[2])
    half_h = 0.5 * extent[1]
    fy = (height / 2) * (dist - half_w) / (half_h * margin)
    width = max(int(math.ceil(2 * fy * half_w * margin / (dist - half_w))), 4)
    fx = fy
    K = np.array([[fx, 0, width / 2], [0, fy, height / 2], [0, 0, 1.0]])
    cams = []
    angles = np.linspace(-arc_degrees / 2, arc_degrees / 2, n_views) if n_views > 1 else [0.0]
    for a in angles:
        rad = math.radians(a)
        eye = center + dist * np.array([math.sin(rad), 0.0, -math.cos(rad)])
        rot, t = look_at(eye, center)
        cams.append(PinholeCamera(K.copy(), rot, t, width, height))
    return cams


def save_cameras(path, cameras) -> None:
    """Structured-text calibration; ray cameras go to companion ``.rays`` files."""
    path = Path(path)
    cfg = configparser.ConfigParser()
    for i, cam in enumerate(cameras):
        sec = f"view{i}"
        cfg[sec] = {"width": str(cam.width), "height": str(cam.height)}
        if isinstance(cam, PinholeCamera):
            cfg[sec]["type"] = "pinhole"
            cfg[sec]["intrinsics"] = " ".join(repr(float(v)) for v in np.ravel(cam.intrinsics))
            cfg[sec]["rotation"] = " ".join(repr(float(v)) for v in np.ravel(cam.rotation))
            cfg[sec]["translation"] = " ".join(repr(float(v)) for v in np.ravel(cam.translation))
        else:
            ray_file = path.with_name(f"{path.stem}_{sec}.rays")
            volio.write_rays(ray_file, cam.origins, cam.directions)
            cfg[sec]["type"] = "rays"
            cfg[sec]["file"] = ray_file.name
    with open(path, "w") as f:
        cfg.write(f)


def _floats(text: str, n: int) -> np.ndarray:
    vals = np.array([float(v) for v in text.split()])
    if vals.size != n:
        raise ConfigurationError(f"expected {n} numbers, got {vals.size}")
    return vals


def load_cameras(path) -> list:
    path = Path(path)
    cfg = configparser.ConfigParser()
    if not cfg.read(path):
        raise ConfigurationError(f"cannot read camera file {path}")
    cams = []
    for sec in cfg.sections():
        s = cfg[sec]
        w, hgt = int(s["width"]), int(s["height"])
        kind = s.get("type", "pinhole")
        if kind == "pinhole":
            cams.append(PinholeCamera(_floats(s["intrinsics"], 9).reshape(3, 3),
                                      _floats(s["rotation"], 9).reshape(3, 3),
                                      _floats(s["translation"], 3), w, hgt))
        elif kind == "rays":
            o, d = volio.read_rays(path.parent / s["file"])
            cams.append(RayCamera(o, d, w, hgt))
        else:
            raise ConfigurationError(f"unknown camera type {kind!r} in [{sec}]")
    if not cams:
        raise ConfigurationError(f"no views in {path}")
    return cams
