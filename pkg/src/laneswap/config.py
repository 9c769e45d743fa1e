"""Config-file plumbing: INI sections <-> ScenarioConfig.

Every scenario parameter is addressable as section.key; command-line
overrides win over file values, and the effective config is echoed into
every output sidecar so a run is reproducible from its artifacts alone.
Unknown sections or keys are rejected with their location.
"""

from __future__ import annotations

import configparser
import math

from .dynamics import VehicleParams
from .geometry import CbfGains, EllipseSpec
from .scenario import ScenarioConfig


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_float(s: str) -> float:
    return math.inf if s.strip().lower() in ("inf", "unlimited") else float(s)


# section -> key -> (ScenarioConfig construction path, parser)
_SCHEMA = {
    "scenario": {
        "n_vehicles": ("n_vehicles", int),
        "speed_min": ("speed_min", float),
        "speed_max": ("speed_max", float),
        "straight_fraction": ("straight_fraction", float),
        "zone_start": ("zone_start", float),
        "zone_length": ("zone_length", float),
        "lane_width": ("lane_width", float),
        "v2v_range": ("v2v_range", _parse_float),
        "ctrl_period": ("ctrl_period", float),
        "bsm_period": ("bsm_period", float),
        "variant": ("variant", str),
        "nra_enabled": ("nra_enabled", _parse_bool),
        "seed": ("seed", int),
        "margin": ("margin", float),
        "headway_mean": ("headway_mean", float),
        "headway_jitter": ("headway_jitter", float),
        "lead_gap": ("lead_gap", float),
        "t_max": ("t_max", float),
        "instability_scale": ("instability_scale", float),
    },
    "baseline": {"kappa": ("kappa", float)},
    "filter": {
        "tau": ("tau", float),
        "slack_weight_agent": ("slack_weight_agent", float),
        "slack_weight_road": ("slack_weight_road", float),
        "soft": ("soft", _parse_bool),
    },
    "gains": {"lambda1": ("gains.lambda1", float), "lambda2": ("gains.lambda2", float)},
    "ellipse": {"r": ("control_ellipse.r", float), "alpha": ("control_ellipse.alpha", float)},
    "reporting_ellipse": {"r": ("reporting_ellipse.r", float),
                          "alpha": ("reporting_ellipse.alpha", float)},
    "vehicle": {
        "wheelbase": ("vehicle_params.wheelbase", float),
        "body_length": ("vehicle_params.body_length", float),
        "body_width": ("vehicle_params.body_width", float),
        "mass": ("vehicle_params.mass", float),
    },
    "rails": {"steepness": ("rail_steepness", float), "center": ("rail_center", float)},
}


def _assemble(values: dict) -> ScenarioConfig:
    base = ScenarioConfig()
    kw = {}
    nested = {"gains": {}, "control_ellipse": {}, "reporting_ellipse": {},
              "vehicle_params": {}}
    for path, val in values.items():
        if "." in path:
            obj, field = path.split(".", 1)
            nested[obj][field] = val
        else:
            kw[path] = val
    if nested["gains"]:
        kw["gains"] = CbfGains(
            lambda1=nested["gains"].get("lambda1", base.gains.lambda1),
            lambda2=nested["gains"].get("lambda2", base.gains.lambda2))
    if nested["control_ellipse"]:
        kw["control_ellipse"] = EllipseSpec(
            r=nested["control_ellipse"].get("r", base.control_ellipse.r),
            alpha=nested["control_ellipse"].get("alpha", base.control_ellipse.alpha))
    if nested["reporting_ellipse"]:
        kw["reporting_ellipse"] = EllipseSpec(
            r=nested["reporting_ellipse"].get("r", base.reporting_ellipse.r),
            alpha=nested["reporting_ellipse"].get("alpha", base.reporting_ellipse.alpha))
    if nested["vehicle_params"]:
        vp = base.vehicle_params
        kw["vehicle_params"] = VehicleParams(
            wheelbase=nested["vehicle_params"].get("wheelbase", vp.wheelbase),
            body_length=nested["vehicle_params"].get("body_length", vp.body_length),
            body_width=nested["vehicle_params"].get("body_width", vp.body_width),
            mass=nested["vehicle_params"].get("mass", vp.mass))
    try:
        return ScenarioConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_override(text: str):
    """'section.key=value' -> (section, key, raw value)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value: {text!r}")
    loc, raw = text.split("=", 1)
    section, key = loc.split(".", 1)
    return section.strip(), key.strip(), raw.strip()


def load_config(path: str | None = None, overrides=()) -> ScenarioConfig:
    """Read an INI file (optional) and apply section.key=value overrides."""
    values = {}

    def apply(section, key, raw, where):
        if section not in _SCHEMA:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if key not in _SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {section}.{key}")
        path_, parser = _SCHEMA[section][key]
        try:
            values[path_] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from exc

    if path is not None:
        cp = configparser.ConfigParser()
        read = cp.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in cp.sections():
            for key, raw in cp.items(section):
                apply(section, key, raw, path)
    for text in overrides:
        section, key, raw = parse_override(text)
        apply(section, key, raw, f"--set {text}")
    return _assemble(values)


def dump_ini(cfg: ScenarioConfig) -> str:
    """Render the effective config as an INI document."""
    d = cfg.as_dict()
    lines = []
    mapping = {
        "scenario": ["n_vehicles", "speed_min", "speed_max", "straight_fraction",
                     "zone_start", "zone_length", "lane_width", "v2v_range",
                     "ctrl_period", "bsm_period", "variant", "nra_enabled", "seed",
                     "margin", "headway_mean", "headway_jitter", "lead_gap",
                     "t_max", "instability_scale"],
        "baseline": ["kappa"],
        "filter": ["tau", "slack_weight_agent", "slack_weight_road", "soft"],
        "gains": ["lambda1", "lambda2"],
        "ellipse": ["ellipse_r", "ellipse_alpha"],
        "reporting_ellipse": ["reporting_r", "reporting_alpha"],
        "vehicle": ["wheelbase", "body_length", "body_width", "mass"],
        "rails": ["rail_steepness", "rail_center"],
    }
    rename = {"ellipse_r": "r", "ellipse_alpha": "alpha", "reporting_r": "r",
              "reporting_alpha": "alpha", "rail_steepness": "steepness",
              "rail_center": "center"}
    for section, keys in mapping.items():
        lines.append(f"[{section}]")
        for k in keys:
            lines.append(f"{rename.get(k, k)} = {d[k]}")
        lines.append("")
    return "\n".join(lines)
