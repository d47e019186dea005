"""INI scenario configuration: defaults, overrides, validation and hashing."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .controller import GainVector
from .model import ParameterError, PhysicalParams
from .simulator import DelayLineError, SimConfig, delay_steps


class ConfigError(ValueError):
    pass


_TYPES = {
    "plant": {f.name: float for f in fields(PhysicalParams)},
    "sim": {"N": int, "dt": float, "t_end": float, "scheme": str, "mode": str,
            "amplitude": float, "seed": int, "record_every": int, "l_min_frac": float,
            "overflow_guard": float, "prehistory": float},
    "gains": {"k1": float, "k2": float},
    "kernels": {"nx": int, "ny": int, "tol_l": float, "point_term": bool, "blend": bool,
                "l_snap": float},
    "diagnostics": {"enabled": bool, "l_bar": float, "transient": float, "kernel_tol": float},
    "output": {"trajectory": str, "summary": str, "kernel_q": str, "kernel_psi": str,
               "sweep": str},
    "sweep": {"axes": str, "workers": int},
}


def _parser():
    return configparser.ConfigParser(inline_comment_prefixes=(";",), interpolation=None,
                                     empty_lines_in_values=False)


def _read_default(cp):
    text = resources.files("axonctl").joinpath("default.ini").read_text()
    cp.read_string(text)


def _convert(section, key, raw):
    kind = _TYPES[section][key]
    raw = raw.strip()
    if raw == "":
        return None
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            val = float(raw)
            if val != int(val):
                raise ValueError(raw)
            return int(val)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_axes(text: str):
    """Parse sweep axes ``section.key = start, stop, count`` (one per line)."""
    axes = []
    for line in (text or "").splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"[sweep] axes: malformed line {line!r}")
        name, spec = (s.strip() for s in line.split("=", 1))
        if "." not in name:
            raise ConfigError(f"[sweep] axes: {name!r} must be section.key")
        sec, key = name.split(".", 1)
        if sec not in ("plant", "sim", "gains") or key not in _TYPES[sec]:
            raise ConfigError(f"[sweep] axes: {name!r} is not a sweepable parameter")
        if _TYPES[sec][key] not in (float, int):
            raise ConfigError(f"[sweep] axes: {name!r} is not numeric")
        parts = [p.strip() for p in spec.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"[sweep] axes: {name!r} needs start, stop, count")
        try:
            start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise ConfigError(f"[sweep] axes: {name!r} has non-numeric range") from None
        if count < 1:
            raise ConfigError(f"[sweep] axes: {name!r} count must be >= 1")
        values = np.linspace(start, stop, count)
        if _TYPES[sec][key] is int:
            values = np.round(values).astype(int)
        axes.append((sec, key, [v.item() for v in values]))
    return axes


@dataclass
class ScenarioConfig:
    plant: PhysicalParams
    sim: SimConfig
    gains: GainVector | None
    kernels: dict
    diagnostics: dict
    output: dict
    axes: list
    workers: int
    values: dict = field(repr=False)

    def hash(self) -> str:
        blob = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_values(self, changes: dict) -> "ScenarioConfig":
        """Copy with ``{(section, key): value}`` applied and re-validated."""
        vals = {s: dict(v) for s, v in self.values.items()}
        for (sec, key), val in changes.items():
            vals[sec][key] = val
        return build_config(vals)


def apply_override(values: dict, text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} must be section.key=value")
    name, raw = text.split("=", 1)
    name = name.strip()
    if "." not in name:
        raise ConfigError(f"override {name!r} must be section.key")
    sec, key = name.split(".", 1)
    if sec not in _TYPES or key not in _TYPES[sec]:
        raise ConfigError(f"override names unknown field {name!r}")
    values[sec][key] = _convert(sec, key, raw)


def load_config(path=None, overrides=(), seed=None) -> ScenarioConfig:
    """Read defaults, then ``path`` (if given), then ``overrides``.

    Unknown sections or keys are rejected with the offending name.
    """
    cp = _parser()
    _read_default(cp)
    if path is not None:
        user = _parser()
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            user.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
        for sec in user.sections():
            if sec not in _TYPES:
                raise ConfigError(f"unknown section [{sec}]")
            for key, raw in user.items(sec):
                real = _match_key(sec, key)
                cp.set(sec, real, raw)
    values = {}
    for sec, keys in _TYPES.items():
        values[sec] = {}
        for key in keys:
            values[sec][key] = _convert(sec, key, cp.get(sec, key, fallback=""))
    for text in overrides:
        apply_override(values, text)
    if seed is not None:
        values["sim"]["seed"] = int(seed)
    return build_config(values)


def _match_key(sec, key):
    # configparser lower-cases keys; map back to the declared spelling
    for real in _TYPES[sec]:
        if real.lower() == key.lower():
            return real
    raise ConfigError(f"unknown key [{sec}] {key}")


def build_config(values: dict) -> ScenarioConfig:
    try:
        plant = PhysicalParams(**{k: v for k, v in values["plant"].items() if v is not None})
    except ParameterError as exc:
        raise ConfigError("[plant] " + "; ".join(exc.violations)) from None
    sim_vals = {k: v for k, v in values["sim"].items() if v is not None}
    try:
        sim = SimConfig(**sim_vals)
    except ValueError as exc:
        raise ConfigError(f"[sim] {exc}") from None
    try:
        delay_steps(plant.D_e, sim.dt)
    except (DelayLineError, ValueError) as exc:
        raise ConfigError(f"[sim] dt: {exc}") from None
    g = values["gains"]
    if (g["k1"] is None) != (g["k2"] is None):
        raise ConfigError("[gains] set both k1 and k2 or neither")
    gains = GainVector(g["k1"], g["k2"]) if g["k1"] is not None else None
    axes = parse_axes(values["sweep"]["axes"])
    workers = values["sweep"]["workers"] or 1
    if workers < 1:
        raise ConfigError("[sweep] workers must be >= 1")
    return ScenarioConfig(plant, sim, gains, dict(values["kernels"]), dict(values["diagnostics"]),
                          dict(values["output"]), axes, workers, values)
