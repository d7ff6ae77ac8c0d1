"""Frame-by-frame reconstruction of density and velocity from image sequences."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import volio
from .fluid import advect_scalar, max_divergence
from .grid import DomainMasks, GridDims, StaggeredField
from .imaging import ImageSet, build_projection, render
from .optim import DENSITY_REG, INFLOW_REG, VELOCITY_REG, PDParams, RegularizerSpec
from .velocity import ReconLevel, SolverSettings, predict_velocity, recon_vel_ms

log = logging.getLogger(__name__)

__all__ = [
    "ReconConfig",
    "FrameState",
    "CheckpointError",
    "psnr",
    "sequence_psnr",
    "slab_thickness",
    "estimate_inflow_speed",
    "build_levels",
    "reconstruct",
    "load_checkpoint",
]


class CheckpointError(RuntimeError):
    pass


def slab_thickness(nx: int) -> int:
    """Inflow slab of 8 cells per 100 cells of domain width (at least 2)."""
    return max(2, int(round(8 * nx / 100)))


@dataclass
class ReconConfig:
    nx: int = 50
    ny: int = 88
    nz: int = 50
    h: float = 0.01
    slab: int | None = None
    inflow_speed: float | None = None
    front_view: int | None = None
    dt: float = 1.0 / 60.0
    viscosity: float = 1.516e-5
    velocity_reg: RegularizerSpec = VELOCITY_REG
    density_reg: RegularizerSpec = DENSITY_REG
    inflow_reg: RegularizerSpec = INFLOW_REG
    pd: PDParams = field(default_factory=PDParams)
    velocity_pd: PDParams = field(default_factory=lambda: PDParams(1.0, 1.0))
    cgls_tol: float = 1e-4
    cgls_maxiter: int = 1000
    cg_tol: float = 1e-4
    cg_maxiter: int = 1000
    pressure_tol: float = 1e-4
    min_dim: int = 16
    multiscale: bool = True
    coupled: bool = True
    pixel_floor: float = 1e-3
    inflow_constant: float | None = None

    def __post_init__(self):
        for name in ("cgls_tol", "cg_tol", "pressure_tol", "pixel_floor", "dt", "h"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.viscosity < 0:
            raise ValueError("viscosity must be non-negative")

    @property
    def dims(self) -> GridDims:
        return GridDims(self.nx, self.ny, self.nz, self.h)

    @property
    def slab_cells(self) -> int:
        return slab_thickness(self.nx) if self.slab is None else self.slab

    def settings(self) -> SolverSettings:
        return SolverSettings(pd=self.pd, velocity_reg=self.velocity_reg, density_reg=self.density_reg,
                              inflow_reg=self.inflow_reg, cg_tol=self.cg_tol, cg_maxiter=self.cg_maxiter,
                              cgls_tol=self.cgls_tol, cgls_maxiter=self.cgls_maxiter,
                              pressure_tol=self.pressure_tol, coupled=self.coupled,
                              min_dim=self.min_dim, velocity_pd=self.velocity_pd,
                              pixel_floor=self.pixel_floor, inflow_constant=self.inflow_constant)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of every setting that influences the reconstructed fields."""
        text = json.dumps(self.to_dict(), sort_keys=True, default=repr)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class FrameState:
    index: int
    density: np.ndarray
    velocity: StaggeredField
    inflow: np.ndarray
    images: ImageSet | None = None
    diagnostics: dict = field(default_factory=dict)


def psnr(a, b, peak: float) -> float:
    """``10 log10(peak² / MSE)``; identical inputs give ``inf``."""
    if isinstance(a, ImageSet):
        a, b = a.flat(), b.flat()
    elif isinstance(a, StaggeredField):
        a, b = a.flat(), b.flat()
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _magnitude(x) -> np.ndarray:
    if isinstance(x, ImageSet):
        return np.abs(x.flat())
    if isinstance(x, StaggeredField):
        return np.abs(x.flat())
    return np.abs(np.asarray(x))


def sequence_psnr(ref: list, test: list, peak: float | None = None) -> list[float]:
    """Per-frame PSNR with one peak for the whole sequence (max |ref|)."""
    if len(ref) != len(test):
        raise ValueError("sequences differ in length")
    if peak is None:
        peak = max((float(_magnitude(r).max()) for r in ref), default=0.0) or 1.0
    return [psnr(r, t, peak) for r, t in zip(ref, test)]


def _ray_spacing(camera, row_step: int = 1) -> float:
    """Meters per vertical pixel at distance ``1`` along the central column."""
    o, d = camera.rays()
    w, hgt = camera.shape
    cx, cy = w // 2, hgt // 2
    d0 = d[cx * hgt + cy]
    d1 = d[cx * hgt + min(cy + row_step, hgt - 1)]
    return float(np.arccos(np.clip(np.dot(d0, d1), -1.0, 1.0))), o[cx * hgt + cy]


def estimate_inflow_speed(sequence: list[ImageSet], camera, dims: GridDims, dt: float,
                          view: int, frames=(10, 30), threshold: float = 0.05) -> float | None:
    """Upward speed (m/s) of the plume top seen from the front view.

    The top is the highest image row whose brightest pixel exceeds
    ``threshold`` times the sequence peak; its height is fitted linearly
    over ``frames`` while the top stays inside the image.
    """
    imgs = [s.images[view] for s in sequence]
    peak = max(float(im.max()) for im in imgs) if imgs else 0.0
    if peak <= 0:
        return None
    tops = []
    for im in imgs:
        rows = np.flatnonzero(im.max(axis=0) > threshold * peak)
        tops.append(rows.max() if rows.size else -1)
    tops = np.array(tops, float)
    height = imgs[0].shape[1]
    lo, hi = frames
    t = np.arange(len(imgs))
    sel = (t >= lo) & (t <= hi) & (tops >= 0) & (tops < height - 1)
    if sel.sum() < 2:
        sel = (tops >= 0) & (tops < height - 1)
    if sel.sum() < 2:
        return None
    slope = np.polyfit(t[sel], tops[sel], 1)[0]
    angle, origin = _ray_spacing(camera)
    center = np.array(dims.shape, float) * dims.h / 2
    meters_per_pixel = angle * float(np.linalg.norm(center - origin))
    return max(float(slope) * meters_per_pixel / dt, 0.0)


def build_levels(cameras, config: ReconConfig) -> ReconLevel:
    """Projection operators and masks for every multi-scale level."""
    dims = config.dims
    masks = DomainMasks.bottom_slab(dims, config.slab_cells)
    settings = config.settings()
    top = level = None
    while True:
        P = build_projection(cameras, dims, voxel_mask=masks.visible)
        nxt = ReconLevel(dims, P, masks, settings, config.dt)
        if level is None:
            top = nxt
        else:
            level.coarse = nxt
        level = nxt
        if not (config.multiscale and dims.can_coarsen(config.min_dim)):
            break
        dims = dims.coarse()
        masks = masks.coarse()
    return top


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, np.float32).astype(np.float64)


def _f32_field(u: StaggeredField) -> StaggeredField:
    return u.map(_f32)


def finalize_density(phi_prev: np.ndarray, phi_i: np.ndarray, vel: StaggeredField, dt: float) -> np.ndarray:
    """Transport previous plus inflow density; stored in single precision."""
    out = advect_scalar(phi_prev + phi_i, vel, dt)
    np.maximum(out, 0.0, out=out)
    return _f32(out)


# ----------------------------------------------------------- checkpoints

def _frame_paths(root: Path, t: int) -> dict:
    stem = f"frame_{t:04d}"
    return {k: root / f"{stem}_{k}.vol" for k in ("density", "velocity", "inflow")}


def _write_frame(root: Path, st: FrameState, h: float) -> None:
    p = _frame_paths(root, st.index)
    volio.write_volume(p["density"], st.density, h)
    volio.write_volume(p["velocity"], st.velocity)
    volio.write_volume(p["inflow"], st.inflow, h)


def _read_frame(root: Path, t: int) -> FrameState:
    p = _frame_paths(root, t)
    return FrameState(t, volio.read_volume(p["density"]), volio.read_volume(p["velocity"]),
                      volio.read_volume(p["inflow"]))


def _write_manifest(root: Path, manifest: dict) -> None:
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(root / "manifest.json")


def load_checkpoint(root, config: ReconConfig) -> tuple[dict, list[FrameState]]:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"no manifest in {root}")
    manifest = json.loads(path.read_text())
    if manifest.get("config") != config.digest():
        raise CheckpointError("checkpoint was written with a different configuration")
    frames = [_read_frame(root, t) for t in range(manifest["frames"])]
    for st, diag in zip(frames, manifest.get("diagnostics", [])):
        st.diagnostics = diag
    return manifest, frames


# ----------------------------------------------------------- main loop

def _initial_state(level: ReconLevel, images: ImageSet, speed: float) -> FrameState:
    level.prepare(images, speed)
    dims = level.dims
    phi = _f32(level.tomography.recon_den(images))
    return FrameState(0, phi, StaggeredField.zeros(dims), dims.zeros())


def _step(level: ReconLevel, prev: FrameState, images: ImageSet, speed: float, config: ReconConfig) -> FrameState:
    dt = config.dt
    slab = level.masks.slab
    t0 = time.perf_counter()
    for lv in _levels(level):
        lv.stats = {"cg": 0, "pd": 0}
    level.prepare(images, speed)
    u_p = predict_velocity(prev.velocity, config.viscosity, dt, config.pressure_tol, slab)
    phi_ip = level.inflow(images, prev.density, u_p)
    phi_p = advect_scalar(prev.density + phi_ip, u_p, dt)
    u_u = recon_vel_ms(level, u_p, phi_p, prev.density, images)
    div_uu = max_divergence(u_u, slab)
    vel = _f32_field(u_p + u_u)
    phi_i = _f32(level.inflow(images, prev.density, vel))
    phi = finalize_density(prev.density, phi_i, vel, dt)
    visible = level.masks.visible
    target_mass = float(level.target(images)[visible].sum())
    diag = {
        "target_mass": target_mass,
        "visible_mass": float(phi[visible].sum()),
        "max_div_residual": div_uu,
        "max_div": max_divergence(vel, slab),
        "inflow_mass": float(phi_i.sum()),
        "cg_iterations": sum(lv.stats.get("cg", 0) for lv in _levels(level)),
        "cgls_iterations": sum(lv.tomography.cgls_iterations for lv in _levels(level) if lv.tomography),
        "wall_time": time.perf_counter() - t0,
    }
    return FrameState(prev.index + 1, phi, vel, phi_i, diagnostics=diag)


def _levels(level):
    while level is not None:
        yield level
        level = level.coarse


def reconstruct(sequence: list[ImageSet], cameras, config: ReconConfig, out_dir=None,
                resume: bool = False, levels: ReconLevel | None = None,
                stop_after: int | None = None) -> list[FrameState]:
    """Reconstruct density and velocity for every frame of ``sequence``.

    With ``out_dir`` each frame is written as it completes together with a
    manifest; ``resume`` continues from the frames already on disk.
    ``stop_after`` ends the run after that many frames (for staged runs).
    """
    if len(sequence) < 1:
        raise ValueError("empty image sequence")
    level = levels or build_levels(cameras, config)
    front = config.front_view if config.front_view is not None else len(cameras) // 2
    speed = config.inflow_speed
    if speed is None:
        speed = estimate_inflow_speed(sequence, cameras[front], config.dims, config.dt, front)
        if speed is None:
            log.warning("stage=inflow_speed estimate=none fallback=0")
            speed = 0.0
    root = Path(out_dir) if out_dir is not None else None
    frames: list[FrameState] = []
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        if resume and (root / "manifest.json").exists():
            manifest, frames = load_checkpoint(root, config)
            speed = manifest["inflow_speed"]
            log.info("stage=resume frames=%d", len(frames))
    digest = config.digest()
    n = len(sequence) if stop_after is None else min(len(sequence), stop_after)
    log.info("stage=reconstruct frames=%d grid=%s levels=%d inflow_speed=%.4g",
             len(sequence), config.dims.shape, len(list(_levels(level))), speed)
    while len(frames) < n:
        t = len(frames)
        try:
            if t == 0:
                st = _initial_state(level, sequence[0], speed)
            else:
                st = _step(level, frames[-1], sequence[t], speed, config)
        except Exception:
            log.error("stage=frame t=%d status=failed last_good=%d", t, t - 1)
            raise
        frames.append(st)
        log.info("stage=frame t=%d mass=%.5g inflow=%.4g max_div=%.3g wall=%.2f", t,
                 float(st.density.sum()), float(st.inflow.sum()),
                 st.diagnostics.get("max_div", 0.0), st.diagnostics.get("wall_time", 0.0))
        if root is not None:
            _write_frame(root, st, config.h)
            _write_manifest(root, {"config": digest, "frames": len(frames), "inflow_speed": speed,
                                   "diagnostics": [f.diagnostics for f in frames]})
    for st in frames:
        st.images = ImageSet([_f32(im) for im in render(level.P, st.density).images])
    return frames
