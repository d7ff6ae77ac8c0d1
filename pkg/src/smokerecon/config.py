"""INI configuration for scenes and reconstructions.

Every recognised key is listed in :data:`SCHEMA`; anything else is an error.
Command-line overrides use the same ``section.key=value`` names.
"""
from __future__ import annotations

import configparser
from dataclasses import replace
from pathlib import Path

from .benchmark import SceneConfig
from .optim import PDParams, RegularizerSpec
from .pipeline import ReconConfig

__all__ = ["ConfigError", "SCHEMA", "Settings", "load_settings", "parse_override", "dump_settings"]


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("auto", "none", "") else float(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("auto", "none", "") else int(text)


def _mode(text: str) -> str:
    t = text.strip().lower()
    if t not in ("full", "vb"):
        raise ValueError(f"mode must be 'full' or 'vb', got {text!r}")
    return t


SCHEMA = {
    "grid": {"nx": int, "ny": int, "nz": int, "width": float, "slab": _opt_int},
    "scene": {"frames": int, "buoyancy": float, "source_radius": float, "noise_amp": float,
              "source_density": float, "truth_scale": int, "seed": int},
    "camera": {"views": int, "arc_degrees": float, "distance": float, "pixels_per_cell": float,
               "front_view": _opt_int, "file": str},
    "time": {"dt": float, "viscosity": float},
    "inflow": {"speed": _opt_float, "constant": _opt_float},
    "regularizer": {"velocity_smooth": float, "velocity_kinetic": float,
                    "density_smooth": float, "density_kinetic": float,
                    "inflow_smooth": float, "inflow_kinetic": float},
    "solver": {"pd_sigma": float, "pd_tau": float, "pd_theta": float, "pd_iterations": int,
               "velocity_sigma": float, "velocity_tau": float, "velocity_iterations": int,
               "cgls_tol": float, "cgls_maxiter": int, "cg_tol": float, "cg_maxiter": int,
               "pressure_tol": float, "min_dim": int, "multiscale": _bool, "mode": _mode,
               "pixel_floor": float},
}


class Settings:
    """Parsed configuration values keyed by ``(section, key)``."""

    def __init__(self, values: dict | None = None):
        self.values = dict(values or {})

    def get(self, section: str, key: str, default=None):
        return self.values.get((section, key), default)

    def set(self, section: str, key: str, raw: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        try:
            self.values[(section, key)] = SCHEMA[section][key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from None

    def scene(self) -> SceneConfig:
        sc = SceneConfig()
        g = self.get
        fields = {
            "nx": g("grid", "nx"), "ny": g("grid", "ny"), "nz": g("grid", "nz"),
            "width": g("grid", "width"), "frames": g("scene", "frames"),
            "dt": g("time", "dt"), "viscosity": g("time", "viscosity"),
            "buoyancy": g("scene", "buoyancy"), "source_radius": g("scene", "source_radius"),
            "noise_amp": g("scene", "noise_amp"), "source_density": g("scene", "source_density"),
            "views": g("camera", "views"), "arc_degrees": g("camera", "arc_degrees"),
            "camera_distance": g("camera", "distance"),
            "pixels_per_cell": g("camera", "pixels_per_cell"),
            "truth_scale": g("scene", "truth_scale"), "seed": g("scene", "seed"),
        }
        return replace(sc, **{k: v for k, v in fields.items() if v is not None})

    def recon(self, scene: SceneConfig | None = None) -> ReconConfig:
        scene = scene or self.scene()
        cfg = scene.recon_config()
        g = self.get
        base_pd = cfg.pd
        pd = PDParams(g("solver", "pd_sigma", base_pd.sigma), g("solver", "pd_tau", base_pd.tau),
                      g("solver", "pd_theta", base_pd.theta), g("solver", "pd_iterations", base_pd.iterations))
        vpd = cfg.velocity_pd
        vpd = PDParams(g("solver", "velocity_sigma", vpd.sigma), g("solver", "velocity_tau", vpd.tau),
                       g("solver", "pd_theta", vpd.theta), g("solver", "velocity_iterations", vpd.iterations))

        def reg(name, current):
            return RegularizerSpec(g("regularizer", f"{name}_smooth", current.smooth),
                                   g("regularizer", f"{name}_kinetic", current.kinetic))

        fields = {
            "slab": g("grid", "slab", cfg.slab),
            "inflow_speed": g("inflow", "speed"),
            "inflow_constant": g("inflow", "constant"),
            "front_view": g("camera", "front_view"),
            "velocity_reg": reg("velocity", cfg.velocity_reg),
            "density_reg": reg("density", cfg.density_reg),
            "inflow_reg": reg("inflow", cfg.inflow_reg),
            "pd": pd,
            "velocity_pd": vpd,
        }
        for key in ("cgls_tol", "cgls_maxiter", "cg_tol", "cg_maxiter", "pressure_tol", "min_dim",
                    "multiscale", "pixel_floor"):
            if g("solver", key) is not None:
                fields[key] = g("solver", key)
        if g("solver", "mode") is not None:
            fields["coupled"] = g("solver", "mode") == "full"
        try:
            return replace(cfg, **fields)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def parse_override(text: str) -> tuple[str, str, str]:
    """``section.key=value`` -> parts."""
    name, sep, value = text.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    return section, key, value.strip()


def load_settings(path=None, overrides=()) -> Settings:
    settings = Settings()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            read = parser.read(Path(path))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                settings.set(section, key, raw)
    for item in overrides:
        settings.set(*parse_override(item))
    return settings


def dump_settings(settings: Settings, path) -> None:
    parser = configparser.ConfigParser()
    for (section, key), value in sorted(settings.values.items()):
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, "auto" if value is None else str(value))
    with open(path, "w") as f:
        parser.write(f)
