"""Synthetic ground-truth scenes and the reconstruction benchmark."""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fluid import SimParams, SmokeState, source_mask, step_forward
from .grid import DomainMasks, GridDims, StaggeredField, restrict, restrict_staggered
from .imaging import ImageSet, arc_cameras, build_projection, render
from .pipeline import FrameState, ReconConfig, reconstruct, sequence_psnr, slab_thickness

log = logging.getLogger(__name__)

__all__ = [
    "VARIANTS",
    "SceneConfig",
    "GroundTruth",
    "simulate",
    "render_sequence",
    "plume_top",
    "visible_cells",
    "visible_faces",
    "evaluate",
    "InstanceResult",
    "run_instance",
    "run_benchmark",
    "write_reports",
    "write_psnr_table",
    "write_summary",
]

VARIANTS = ("base", "wide-inflow", "buoyant-1.5x", "double-res-truth")


@dataclass
class SceneConfig:
    """Desk-scale plume.  Lengths in cells scale with ``nx``."""

    nx: int = 50
    ny: int = 88
    nz: int = 50
    width: float = 0.5
    frames: int = 60
    dt: float = 1.0 / 60.0
    viscosity: float = 1.516e-5
    buoyancy: float = 1.1
    source_radius: float = 0.1
    noise_amp: float = 0.3
    source_density: float = 1.0
    views: int = 5
    arc_degrees: float = 120.0
    camera_distance: float = 3.0
    pixels_per_cell: float = 1.0
    truth_scale: int = 1
    seed: int = 0

    @property
    def h(self) -> float:
        return self.width / self.nx

    @property
    def dims(self) -> GridDims:
        return GridDims(self.nx, self.ny, self.nz, self.h)

    @property
    def truth_dims(self) -> GridDims:
        s = self.truth_scale
        return GridDims(self.nx * s, self.ny * s, self.nz * s, self.h / s)

    @property
    def slab(self) -> int:
        return slab_thickness(self.nx)

    def variant(self, name: str) -> "SceneConfig":
        if name == "base":
            return self
        if name == "wide-inflow":
            return replace(self, source_radius=self.source_radius * 1.5)
        if name == "buoyant-1.5x":
            return replace(self, buoyancy=self.buoyancy * 1.5)
        if name == "double-res-truth":
            return replace(self, truth_scale=2)
        raise ValueError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")

    def sim_params(self, seed: int) -> SimParams:
        d = self.truth_dims
        s = self.truth_scale
        slab = self.slab * s
        return SimParams(dt=self.dt, viscosity=self.viscosity, buoyancy=self.buoyancy,
                         noise_seed=seed, noise_amp=self.noise_amp,
                         source_radius=self.source_radius * d.nx,
                         source_y=(s, max(slab - s, s + 1)),
                         source_density=self.source_density)

    def cameras(self):
        return arc_cameras(self.dims, self.views, self.arc_degrees, self.camera_distance,
                           self.pixels_per_cell)

    def recon_config(self, **overrides) -> ReconConfig:
        base = ReconConfig(nx=self.nx, ny=self.ny, nz=self.nz, h=self.h, slab=self.slab,
                           dt=self.dt, viscosity=self.viscosity)
        return replace(base, **overrides)


@dataclass
class GroundTruth:
    """Simulated fields at the reconstruction resolution plus their images."""

    density: list[np.ndarray]
    velocity: list[StaggeredField]
    images: list[ImageSet]
    injected: list[float] = field(default_factory=list)
    max_divergence: list[float] = field(default_factory=list)


def simulate(scene: SceneConfig, seed: int, frames: int | None = None) -> tuple[list, list, SmokeState]:
    """Forward-simulate ``frames`` states at truth resolution (frame 0 empty)."""
    frames = scene.frames if frames is None else frames
    params = scene.sim_params(seed)
    dims = scene.truth_dims
    state = SmokeState.empty(dims, seed)
    src = source_mask(dims, params)
    dens, vels = [state.density.copy()], [state.velocity.copy()]
    info = {"injected": [0.0], "div": [0.0]}
    for _ in range(frames - 1):
        state = step_forward(state, params, src)
        dens.append(state.density.copy())
        vels.append(state.velocity.copy())
        info["injected"].append(state.injected)
        info["div"].append(state.last_divergence)
    return dens, vels, info


def render_sequence(P, densities) -> list[ImageSet]:
    return [render(P, d) for d in densities]


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, np.float32).astype(np.float64)


def ground_truth(scene: SceneConfig, seed: int, cameras=None) -> GroundTruth:
    """Simulate, store-round and render one instance.

    Fields and images are rounded to single precision exactly as when they
    pass through volume and image files, so in-memory and file-based runs
    agree bit for bit.
    """
    cameras = cameras or scene.cameras()
    dens, vels, info = simulate(scene, seed)
    dens = [_f32(d) for d in dens]
    vels = [v.map(_f32) for v in vels]
    t = scene.truth_dims
    tdims = GridDims(t.nx, t.ny, t.nz, float(np.float32(t.h)))
    masks = DomainMasks.bottom_slab(tdims, slab_thickness(tdims.nx))
    P = build_projection(cameras, tdims, voxel_mask=masks.visible)
    images = [ImageSet([_f32(im) for im in s.images]) for s in render_sequence(P, dens)]
    for _ in range(int(math.log2(scene.truth_scale))):
        dens = [restrict(d) for d in dens]
        vels = [restrict_staggered(v) for v in vels]
    return GroundTruth(dens, vels, images, info["injected"], info["div"])


def plume_top(density: np.ndarray, threshold: float = 0.05) -> int:
    """Highest y layer holding more than ``threshold`` of the peak density."""
    peak = float(density.max())
    if peak <= 0:
        return -1
    rows = np.flatnonzero(density.max(axis=(0, 2)) > threshold * peak)
    return int(rows.max())


def visible_cells(a: np.ndarray, slab: int) -> np.ndarray:
    return a[:, slab:, :]


def visible_faces(u: StaggeredField, slab: int) -> np.ndarray:
    """Face values above the inflow slab (its top faces excluded)."""
    return np.concatenate([u.x[:, slab:, :].ravel(), u.y[:, slab + 1:, :].ravel(),
                           u.z[:, slab:, :].ravel()])


def evaluate(truth: GroundTruth, frames: list[FrameState], slab: int) -> dict:
    """Per-frame density, velocity and image PSNR (visible domain)."""
    n = len(frames)
    dens = sequence_psnr([visible_cells(d, slab) for d in truth.density[:n]],
                         [visible_cells(f.density, slab) for f in frames])
    vel = sequence_psnr([visible_faces(v, slab) for v in truth.velocity[:n]],
                        [visible_faces(f.velocity, slab) for f in frames])
    img = sequence_psnr(truth.images[:n], [f.images for f in frames])
    return {"density": dens, "velocity": vel, "image": img}


@dataclass
class InstanceResult:
    seed: int
    psnr: dict
    wall_time: float
    frames: list[FrameState] = field(default_factory=list, repr=False)

    def mean(self, metric: str) -> float:
        return _finite_mean(self.psnr[metric])


def run_instance(scene: SceneConfig, seed: int, config: ReconConfig | None = None,
                 truth: GroundTruth | None = None, out_dir=None, keep_frames: bool = False) -> InstanceResult:
    cameras = scene.cameras()
    truth = truth or ground_truth(scene, seed, cameras)
    config = config or scene.recon_config()
    t0 = time.perf_counter()
    frames = reconstruct(truth.images, cameras, config, out_dir=out_dir)
    wall = time.perf_counter() - t0
    scores = evaluate(truth, frames, config.slab_cells)
    log.info("stage=instance seed=%d density=%.2f velocity=%.2f image=%.2f wall=%.1f", seed,
             np.mean(scores["density"][1:]), np.mean(scores["velocity"][1:]),
             np.mean(scores["image"][1:]), wall)
    return InstanceResult(seed, scores, wall, frames if keep_frames else [])


def run_benchmark(scene: SceneConfig, variant: str = "base", instances: int = 5,
                  config: ReconConfig | None = None, out_dir=None, seeds=None) -> list[InstanceResult]:
    """Ground truth plus reconstruction for several seeded noise instances."""
    scene = scene.variant(variant)
    seeds = list(seeds) if seeds is not None else [scene.seed + i for i in range(instances)]
    results = []
    for s in seeds:
        inst_dir = None if out_dir is None else Path(out_dir) / f"instance_{s}"
        results.append(run_instance(scene, s, config, out_dir=inst_dir))
    if out_dir is not None:
        write_reports(results, out_dir)
    return results


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def write_psnr_table(scores: dict, out_dir) -> None:
    """``{metric}_psnr.tsv`` per metric: one row per frame."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for metric, vals in scores.items():
        lines = ["frame\tpsnr"] + [f"{t}\t{_fmt(v)}" for t, v in enumerate(vals)]
        (out / f"{metric}_psnr.tsv").write_text("\n".join(lines) + "\n")


def _finite_mean(vals) -> float:
    vals = [v for v in vals if math.isfinite(v)]
    return float(np.mean(vals)) if vals else math.inf


def write_reports(results: list[InstanceResult], out_dir) -> dict:
    """Per-instance tables plus merged mean/std tables."""
    out = Path(out_dir)
    for r in results:
        write_psnr_table(r.psnr, out / f"instance_{r.seed}")
    return write_summary([(r.seed, r.psnr) for r in results], out)


def write_summary(results: list[tuple[int, dict]], out_dir) -> dict:
    """``{metric}_mean_std.tsv`` curves across instances and ``summary.tsv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    metrics = [m for m in ("density", "velocity", "image") if all(m in p for _, p in results)]
    for metric in metrics:
        curves = np.array([p[metric] for _, p in results], float)
        with warnings.catch_warnings():
            # frames that are infinite in every instance have no finite mean
            warnings.simplefilter("ignore", RuntimeWarning)
            finite = np.where(np.isfinite(curves), curves, np.nan)
            mean = np.nanmean(finite, axis=0) if finite.size else np.array([])
            std = np.nanstd(finite, axis=0) if finite.size else np.array([])
        lines = ["frame\tmean\tstd"] + [f"{t}\t{_fmt(m)}\t{_fmt(s)}" for t, (m, s) in
                                        enumerate(zip(np.nan_to_num(mean, nan=np.inf),
                                                      np.nan_to_num(std, nan=0.0)))]
        (out / f"{metric}_mean_std.tsv").write_text("\n".join(lines) + "\n")
        per_inst = [_finite_mean(p[metric]) for _, p in results]
        summary[metric] = (float(np.mean(per_inst)), float(np.std(per_inst)))
    lines = ["metric\tmean\tstd"] + [f"{k}\t{_fmt(m)}\t{_fmt(s)}" for k, (m, s) in summary.items()]
    (out / "summary.tsv").write_text("\n".join(lines) + "\n")
    return summary
