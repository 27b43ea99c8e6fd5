"""Run configuration: one JSON document drives every command.

Sections: mesh, prior, observation, eki, simulate. Unknown keys anywhere are
rejected so a typo cannot silently fall back to a default.
"""

import json

import numpy as np

from . import fields as flds
from . import mesh as msh
from . import observe as obs
from .grid import RegularGrid


class ConfigError(ValueError):
    pass


_SECTIONS = {"mesh", "prior", "observation", "eki", "simulate"}
_MESH_KEYS = {"kind", "nx", "ny", "path", "domain"}
_PRIOR_KEYS = {"grid", "boundary_points", "level_threshold", "scalar_ranges",
               "field_specs", "baseline_ranges"}
_OBS_KEYS = {"layout", "layout_file", "times", "sigma0", "floor"}
_EKI_KEYS = {"J", "rho", "seed", "mode", "weights", "error_stats", "max_iterations",
             "damping", "workers"}
_SIM_KEYS = {"T", "p_0"}
_FIELD_SPEC_KEYS = {"sigma", "ell", "nu", "mean"}


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(doc)


def validate_config(doc: dict) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys("<root>", doc, _SECTIONS)
    out = {
        "mesh": dict(doc.get("mesh", {})),
        "prior": dict(doc.get("prior", {})),
        "observation": dict(doc.get("observation", {})),
        "eki": dict(doc.get("eki", {})),
        "simulate": dict(doc.get("simulate", {})),
    }
    _check_keys("mesh", out["mesh"], _MESH_KEYS)
    _check_keys("prior", out["prior"], _PRIOR_KEYS)
    _check_keys("observation", out["observation"], _OBS_KEYS)
    _check_keys("eki", out["eki"], _EKI_KEYS)
    _check_keys("simulate", out["simulate"], _SIM_KEYS)
    for name, spec in out["prior"].get("field_specs", {}).items():
        if name not in flds.FIELD_NAMES:
            raise ConfigError(f"unknown field spec '{name}'")
        _check_keys(f"prior.field_specs.{name}", spec, _FIELD_SPEC_KEYS)
    mode = out["eki"].get("mode", "full")
    if mode not in ("full", "surrogate"):
        raise ConfigError(f"eki.mode must be 'full' or 'surrogate', got {mode!r}")
    if mode == "surrogate":
        if not out["eki"].get("weights"):
            raise ConfigError("surrogate mode requires eki.weights")
        if not out["eki"].get("error_stats"):
            raise ConfigError("surrogate mode requires eki.error_stats")
    return out


def build_mesh(cfg: dict) -> msh.Mesh:
    m = cfg["mesh"]
    kind = m.get("kind", "structured")
    if kind == "structured":
        domain = tuple(m.get("domain", (0.3, 0.3)))
        try:
            return msh.generate_structured_mesh(int(m.get("nx", 61)), int(m.get("ny", 61)), domain)
        except ValueError as exc:
            raise ConfigError(f"mesh: {exc}") from exc
    if kind == "file":
        if "path" not in m:
            raise ConfigError("mesh.kind 'file' requires mesh.path")
        return msh.load_mesh(m["path"])
    raise ConfigError(f"mesh.kind must be 'structured' or 'file', got {kind!r}")


def build_prior(cfg: dict) -> flds.PriorSpec:
    p = cfg["prior"]
    domain = tuple(cfg["mesh"].get("domain", (0.3, 0.3)))
    gnx, gny = p.get("grid", (120, 120))
    grid = RegularGrid(int(gnx), int(gny), domain[0], domain[1])
    base = flds.default_prior(grid, n_boundary=int(p.get("boundary_points", gnx)))
    scalar_ranges = dict(base.scalar_ranges)
    for k, v in p.get("scalar_ranges", {}).items():
        if k not in flds.SCALAR_NAMES:
            raise ConfigError(f"unknown scalar '{k}' in prior.scalar_ranges")
        scalar_ranges[k] = (float(v[0]), float(v[1]))
    field_specs = dict(base.field_specs)
    for k, v in p.get("field_specs", {}).items():
        old = field_specs[k]
        field_specs[k] = flds.MaternSpec(
            sigma=float(v.get("sigma", old.sigma)), ell=float(v.get("ell", old.ell)),
            nu=float(v.get("nu", old.nu)), mean=float(v.get("mean", old.mean)))
    baseline_ranges = dict(base.baseline_ranges)
    for k, v in p.get("baseline_ranges", {}).items():
        if k not in baseline_ranges:
            raise ConfigError(f"unknown region '{k}' in prior.baseline_ranges")
        baseline_ranges[k] = (float(v[0]), float(v[1]))
    try:
        return flds.PriorSpec(scalar_ranges=scalar_ranges, field_specs=field_specs,
                              baseline_ranges=baseline_ranges,
                              level_threshold=float(p.get("level_threshold", 1.0)),
                              grid=grid, n_boundary=base.n_boundary)
    except ValueError as exc:
        raise ConfigError(f"prior: {exc}") from exc


def build_observation(cfg: dict, mesh: msh.Mesh) -> obs.ObservationConfig:
    o = cfg["observation"]
    sim = cfg["simulate"]
    t_max = float(sim.get("T", 110.0))
    times = o.get("times", {"count": 34})
    if isinstance(times, dict):
        _check_keys("observation.times", times, {"count", "t_max"})
        times = obs.default_times(int(times.get("count", 34)), float(times.get("t_max", t_max)))
    else:
        times = np.asarray(times, float)
    layout = o.get("layout", "sparse23")
    if o.get("layout_file"):
        sensors = obs.read_sensor_layout(o["layout_file"])
    elif layout in ("grid100", "sparse23"):
        sensors = obs.default_layouts(mesh.domain_size)[layout]
    else:
        raise ConfigError(f"observation.layout must be 'grid100' or 'sparse23', got {layout!r}")
    try:
        return obs.ObservationConfig(sensors=sensors, times=times,
                                     sigma0=float(o.get("sigma0", 0.025)),
                                     floor=float(o.get("floor", 100.0)))
    except ValueError as exc:
        raise ConfigError(f"observation: {exc}") from exc
