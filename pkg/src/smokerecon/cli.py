"""Command-line entry point: ``smokerecon <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import volio
from .benchmark import (VARIANTS, SceneConfig, simulate, visible_cells, visible_faces, write_psnr_table,
                        write_summary)
from .config import ConfigError, Settings, load_settings
from .grid import DomainMasks, GridDims, restrict, restrict_staggered
from .imaging import (ConfigurationError, ImageSet, build_projection, compute_visual_hull, load_cameras,
                      render, save_cameras)
from .pipeline import CheckpointError, ReconConfig, reconstruct, sequence_psnr, slab_thickness
from .tomography import TomographyProblem

log = logging.getLogger("smokerecon")

_FRAME = re.compile(r"frame_(\d+)_density\.vol$")
_IMAGE = re.compile(r"frame_(\d+)_view(\d+)\.pfm$")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ stages

def stage_simulate(scene: SceneConfig, seed: int, out) -> Path:
    """Ground-truth volumes (truth resolution) and the camera file."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dens, vels, _ = simulate(scene, seed)
    h = scene.truth_dims.h
    for t, (d, v) in enumerate(zip(dens, vels)):
        volio.write_volume(out / f"frame_{t:04d}_density.vol", d, h)
        volio.write_volume(out / f"frame_{t:04d}_velocity.vol", v)
    save_cameras(out / "cameras.ini", scene.cameras())
    log.info("stage=simulate frames=%d out=%s", len(dens), out)
    return out


def _frames(directory: Path) -> list[int]:
    idx = sorted(int(m.group(1)) for p in directory.iterdir() if (m := _FRAME.search(p.name)))
    if not idx:
        raise UsageError(f"no frame_*_density.vol files in {directory}")
    if idx != list(range(len(idx))):
        raise UsageError(f"frame numbers in {directory} are not contiguous from 0")
    return idx


def write_images(out: Path, t: int, images: ImageSet) -> None:
    for v, im in enumerate(images.images):
        volio.write_pfm(out / f"frame_{t:04d}_view{v}.pfm", im)


def read_image_sequence(directory) -> list[ImageSet]:
    directory = Path(directory)
    found = {}
    for p in directory.iterdir():
        m = _IMAGE.search(p.name)
        if m:
            found.setdefault(int(m.group(1)), {})[int(m.group(2))] = p
    if not found:
        raise UsageError(f"no frame_*_view*.pfm images in {directory}")
    seq = []
    for t in range(len(found)):
        if t not in found:
            raise UsageError(f"missing images for frame {t} in {directory}")
        views = found[t]
        seq.append(ImageSet([volio.read_pfm(views[v]) for v in sorted(views)]))
    return seq


def stage_render(volumes, cameras, out) -> Path:
    """Images of every density volume; the bottom inflow slab is hidden."""
    volumes, out = Path(volumes), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    P = None
    for t in _frames(volumes):
        d = volio.read_volume(volumes / f"frame_{t:04d}_density.vol")
        if P is None:
            h = volio.read_volume_h(volumes / f"frame_{t:04d}_density.vol")
            dims = GridDims(*d.shape, h=h)
            masks = DomainMasks.bottom_slab(dims, slab_thickness(dims.nx))
            P = build_projection(cameras, dims, voxel_mask=masks.visible)
        write_images(out, t, render(P, d))
    log.info("stage=render out=%s", out)
    return out


def stage_reconstruct(images, cameras, config: ReconConfig, out, resume: bool = False):
    out = Path(out)
    seq = read_image_sequence(images)
    frames = reconstruct(seq, cameras, config, out_dir=out, resume=resume)
    render_dir = out / "render"
    render_dir.mkdir(exist_ok=True)
    for st in frames:
        write_images(render_dir, st.index, st.images)
    return frames


def _load_fields(directory: Path, n: int | None = None):
    idx = _frames(directory)
    if n is not None:
        idx = idx[:n]
    dens = [volio.read_volume(directory / f"frame_{t:04d}_density.vol") for t in idx]
    vel_paths = [directory / f"frame_{t:04d}_velocity.vol" for t in idx]
    vels = [volio.read_volume(p) for p in vel_paths] if all(p.exists() for p in vel_paths) else None
    return dens, vels


def stage_evaluate(ref, test, out=None, ref_images=None, test_images=None) -> dict:
    """Per-frame PSNR of ``test`` against ``ref`` on the visible domain.

    A reference at twice the test resolution is averaged down first.
    """
    ref, test = Path(ref), Path(test)
    t_dens, t_vels = _load_fields(test)
    r_dens, r_vels = _load_fields(ref, len(t_dens))
    if len(r_dens) < len(t_dens):
        raise UsageError("reference has fewer frames than the test sequence")
    while r_dens[0].shape[0] > t_dens[0].shape[0]:
        if r_dens[0].shape[0] != 2 * t_dens[0].shape[0]:
            raise UsageError("reference resolution must equal or double the test resolution")
        r_dens = [restrict(d) for d in r_dens]
        r_vels = [restrict_staggered(v) for v in r_vels] if r_vels is not None else None
    if r_dens[0].shape != t_dens[0].shape:
        raise UsageError(f"grid mismatch {r_dens[0].shape} vs {t_dens[0].shape}")
    slab = slab_thickness(t_dens[0].shape[0])
    scores = {"density": sequence_psnr([visible_cells(d, slab) for d in r_dens],
                                       [visible_cells(d, slab) for d in t_dens])}
    if r_vels is not None and t_vels is not None:
        scores["velocity"] = sequence_psnr([visible_faces(v, slab) for v in r_vels],
                                           [visible_faces(v, slab) for v in t_vels])
    if ref_images is not None and test_images is not None:
        ri = read_image_sequence(ref_images)[:len(t_dens)]
        ti = read_image_sequence(test_images)[:len(t_dens)]
        scores["image"] = sequence_psnr(ri, ti)
    if out is not None:
        write_psnr_table(scores, out)
    return scores


def stage_tomo(images, cameras, frame: int, out, config: ReconConfig) -> np.ndarray:
    seq = read_image_sequence(images)
    if not 0 <= frame < len(seq):
        raise UsageError(f"frame {frame} out of range (0..{len(seq) - 1})")
    dims = config.dims
    masks = DomainMasks.bottom_slab(dims, config.slab_cells)
    P = build_projection(cameras, dims, voxel_mask=masks.visible)
    hull = compute_visual_hull(seq[frame], P, pixel_floor=config.pixel_floor, exclude=masks.inflow)
    tomo = TomographyProblem(P, hull, config.density_reg, config.pd, config.cgls_tol, config.cgls_maxiter)
    phi = tomo.recon_den(seq[frame])
    volio.write_volume(out, phi, dims.h)
    log.info("stage=tomo frame=%d hull=%d mass=%.5g cgls=%d", frame, int(hull.sum()),
             float(phi.sum()), tomo.cgls_iterations)
    return phi


def stage_bench(scene: SceneConfig, variant: str, instances: int, config_overrides: Settings, out) -> dict:
    """Simulate, render, reconstruct and evaluate each instance through files."""
    out = Path(out)
    scene = scene.variant(variant)
    results = []
    for i in range(instances):
        seed = scene.seed + i
        inst = out / f"instance_{seed}"
        truth = stage_simulate(scene, seed, inst / "truth")
        cameras = load_cameras(truth / "cameras.ini")
        imgs = stage_render(truth, cameras, inst / "images")
        config = config_overrides.recon(scene)
        stage_reconstruct(imgs, cameras, config, inst / "recon")
        scores = stage_evaluate(truth, inst / "recon", inst, imgs, inst / "recon" / "render")
        results.append((seed, scores))
    return write_summary(results, out)


# -------------------------------------------------------------------- main

def _common(p):
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a configuration key (repeatable)")
    p.add_argument("--seed", type=int, help="noise seed (overrides scene.seed)")
    p.add_argument("--threads", type=int, help="limit BLAS/OpenMP threads")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smokerecon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="forward-simulate ground-truth volumes")
    _common(p)
    p.add_argument("--variant", choices=VARIANTS, default="base")

    p = sub.add_parser("render", help="render density volumes to images")
    _common(p)
    p.add_argument("--volumes", required=True)
    p.add_argument("--cameras", required=True)

    p = sub.add_parser("reconstruct", help="reconstruct density and velocity from images")
    _common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--resume", action="store_true", help="continue from checkpoints in --out")

    p = sub.add_parser("tomo", help="one-shot tomography of a single frame")
    _common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--frame", type=int, default=0)

    p = sub.add_parser("evaluate", help="PSNR tables of two volume sequences")
    _common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--ref-images")
    p.add_argument("--test-images")

    p = sub.add_parser("bench", help="synthetic benchmark")
    _common(p)
    p.add_argument("--variant", choices=VARIANTS, default="base")
    p.add_argument("--instances", type=int, default=5)
    return parser


def _settings(args) -> Settings:
    settings = load_settings(args.config, args.set)
    if args.seed is not None:
        settings.set("scene", "seed", str(args.seed))
    return settings


def _require_out(args):
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def run(args) -> int:
    settings = _settings(args)
    scene = settings.scene()
    cmd = args.command
    if cmd == "simulate":
        stage_simulate(scene.variant(args.variant), scene.seed, _require_out(args))
    elif cmd == "render":
        stage_render(args.volumes, load_cameras(args.cameras), _require_out(args))
    elif cmd == "reconstruct":
        stage_reconstruct(args.images, load_cameras(args.cameras), settings.recon(scene),
                          _require_out(args), resume=args.resume)
    elif cmd == "tomo":
        stage_tomo(args.images, load_cameras(args.cameras), args.frame, _require_out(args),
                   settings.recon(scene))
    elif cmd == "evaluate":
        scores = stage_evaluate(args.ref, args.test, args.out, args.ref_images, args.test_images)
        for metric, vals in scores.items():
            finite = [v for v in vals if math.isfinite(v)]
            mean = float(np.mean(finite)) if finite else math.inf
            print(f"{metric}\t{'inf' if math.isinf(mean) else f'{mean:.4f}'}")
    elif cmd == "bench":
        if args.instances < 1:
            raise UsageError("--instances must be at least 1")
        summary = stage_bench(scene, args.variant, args.instances, settings, _require_out(args))
        for metric, (m, s) in summary.items():
            print(f"{metric}\t{m:.4f}\t{s:.4f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="level=%(levelname)s logger=%(name)s %(message)s", force=True)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            if args.threads < 1:
                raise UsageError("--threads must be at least 1")
            with threadpool_limits(limits=args.threads):
                return run(args)
        return run(args)
    except (UsageError, ConfigError, CheckpointError) as exc:
        log.error("status=usage error=%s", exc)
        return 1
    except (ConfigurationError, volio.FormatError, FileNotFoundError) as exc:
        log.error("status=failed error=%s", exc)
        return 2
    except Exception as exc:  # solver or I/O failure
        log.error("status=failed error=%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
