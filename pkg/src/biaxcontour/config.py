"""Run configuration: one YAML file with sections, merged over built-in defaults.

Unknown sections or keys are rejected. Every value passes the constructor
checks of the objects it feeds before any computation starts.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .controller import MpcConfig, TUNINGS, ErrorBudget, error_budget
from .pathkit import ContourPath, PathError, circle_then_line
from .plantmodel import GantryParams
from .simloop import PLANT_MODES, RigParams
from .synthesis import SynthesisSetup


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


DEFAULTS: dict = {
    "gantry": {f: v for f, v in GantryParams().__dict__.items()},
    "rig": {"M_A": 2.0, "k_A": 1.5, "b_A": 5.0, "coulomb": 0.1, "noise": 0.1},
    "budget": {"eps_c": 0.004, "split": 0.5, "theta_max": 0.0025},
    "bank": {"points": [-0.075, -0.025, 0.025, 0.075], "spacing": 0.05},
    "timing": {"Ts": 0.002, "Tdx": 1, "Tdy": 1},
    "synthesis": {
        "rho": 1e-4,
        "x_box": [[-0.15, 0.15], [-0.2, 0.2]],
        "y_box": [[-0.2, 0.7], [-0.2, 0.2], [-0.05, 0.05]],
        "i_x": 2.0,
        "i_sum": 36.0,
        "i_diff": 4.0,
        "rel_velocity": [0.02, 0.05],
        "ref_x": [[-0.1, 0.1], [-0.1, 0.1]],
        "ref_y": [[-0.1, 0.12], [-0.1, 0.1]],
        "grid": 5,
        "max_iter": 200,
        "samples": 1000,
        "workers": 4,
    },
    "mpc": {"tuning": "A", "N": 10, "Qx": None, "Qy": None, "Rx": None, "Ry": None,
            "max_iter": 25, "slack_penalty": 1e8},
    "scenario": {"name": "paper-contour", "segments": None, "v_max": 0.1, "a_max": 1.0, "dwell": 0.2},
    "plant": {"mode": "nonlinear", "quantum": 0.0},
    "seed": 0,
    "output": "out",
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {name!r} must be a section")
            out[key] = _merge(base[key], val, name + ".")
        else:
            out[key] = val
    return out


def parse_override(text: str) -> dict:
    """``"a.b=1.5"`` to ``{"a": {"b": 1.5}}``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    val = yaml.safe_load(raw)
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = val
    return out


def _pairs(v, n: int, name: str) -> tuple:
    try:
        out = tuple((float(a), float(b)) for a, b in v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a list of [low, high] pairs") from None
    if len(out) != n or any(a > b for a, b in out):
        raise ConfigError(f"{name} must hold {n} ordered [low, high] pairs")
    return out


PAPER_CONTOUR = "paper-contour"


def build_path(scn: dict) -> ContourPath:
    if scn.get("segments"):
        return ContourPath.from_records(scn["segments"])
    if scn.get("name") == PAPER_CONTOUR:
        return circle_then_line()
    raise ConfigError(f"unknown scenario {scn.get('name')!r}; give segments or use {PAPER_CONTOUR!r}")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration plus the raw merged dictionary."""

    raw: dict
    params: GantryParams
    rig: RigParams
    budget: ErrorBudget
    setup: SynthesisSetup
    mpc: MpcConfig
    path: ContourPath
    v_max: float
    a_max: float
    dwell: float
    mode: str
    quantum: float
    seed: int
    output: Path
    samples: int
    workers: int

    @property
    def config_hash(self) -> str:
        """Hash of everything that affects a run's trace (the output folder excluded)."""
        return _digest({k: v for k, v in self.raw.items() if k != "output"})

    @property
    def synthesis_hash(self) -> str:
        """Hash of everything that affects the offline sets."""
        return _digest(self.setup.to_record())

    def effective_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


def validate(raw: dict) -> RunConfig:
    """Build every object from a merged dictionary; raises :class:`ConfigError`."""
    try:
        params = GantryParams.from_dict(raw["gantry"])
        rig = RigParams(**{k: float(v) for k, v in raw["rig"].items()})
        b = raw["budget"]
        budget = error_budget(float(b["eps_c"]), params.D, float(b["theta_max"]), float(b["split"]))
        t = raw["timing"]
        Ts, Tdx, Tdy = float(t["Ts"]), int(t["Tdx"]), int(t["Tdy"])
        if not Ts > 0 or Tdx < 0 or Tdy < 0:
            raise ConfigError("timing needs Ts > 0 and nonnegative delays")
        bk = raw["bank"]
        pts = tuple(float(x) for x in bk["points"])
        if len(pts) < 1 or any(b2 <= a2 for a2, b2 in zip(pts, pts[1:])):
            raise ConfigError("bank points must be strictly increasing")
        sy = raw["synthesis"]
        scn = raw["scenario"]
        a_max = float(scn["a_max"])
        setup = SynthesisSetup(
            params, budget, Ts, Tdx, Tdy, float(sy["rho"]), pts, float(bk["spacing"]),
            _pairs(sy["x_box"], 2, "synthesis.x_box"), _pairs(sy["y_box"], 3, "synthesis.y_box"),
            float(sy["i_x"]), float(sy["i_sum"]), float(sy["i_diff"]),
            tuple(float(v) for v in sy["rel_velocity"]),
            _pairs(sy["ref_x"], 2, "synthesis.ref_x"), _pairs(sy["ref_y"], 2, "synthesis.ref_y"),
            a_max, int(sy["grid"]), int(sy["max_iter"]),
        )
        if len(setup.rel_velocity) != 2:
            raise ConfigError("synthesis.rel_velocity needs one value per axis")
        m = raw["mpc"]
        if m["tuning"] not in TUNINGS and m["tuning"] is not None:
            raise ConfigError(f"unknown tuning {m['tuning']!r}; choose from {sorted(TUNINGS)}")
        weights = dict(TUNINGS[m["tuning"]]) if m["tuning"] else {}
        for key in ("Qx", "Qy", "Rx"):
            if m[key] is not None:
                weights[key] = float(m[key])
        if m["Ry"] is not None:
            weights["Ry"] = tuple(tuple(float(v) for v in row) for row in m["Ry"])
        missing = {"Qx", "Qy", "Rx", "Ry"} - set(weights)
        if missing:
            raise ConfigError(f"mpc weights missing: {sorted(missing)}")
        mpc = MpcConfig(N=int(m["N"]), Ts=Ts, max_iter=int(m["max_iter"]),
                        slack_penalty=float(m["slack_penalty"]), **weights)
        path = build_path(scn)
        v_max, dwell = float(scn["v_max"]), float(scn["dwell"])
        if not (v_max > 0 and a_max > 0 and dwell >= 0):
            raise ConfigError("scenario needs v_max > 0, a_max > 0 and dwell >= 0")
        pl = raw["plant"]
        if pl["mode"] not in PLANT_MODES:
            raise ConfigError(f"plant.mode must be one of {PLANT_MODES}")
        samples, workers = int(sy["samples"]), int(sy["workers"])
        if samples < 0 or workers < 1:
            raise ConfigError("synthesis.samples must be >= 0 and synthesis.workers >= 1")
        return RunConfig(raw, params, rig, budget, setup, mpc, path, v_max, a_max, dwell,
                         pl["mode"], float(pl["quantum"]), int(raw["seed"]), Path(raw["output"]),
                         samples, workers)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError, PathError) as err:
        raise ConfigError(str(err)) from err


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the YAML file at ``path`` (if any), then ``section.key=value`` overrides."""
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except yaml.YAMLError as err:
            raise ConfigError(f"config {path} is not valid YAML: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping of sections")
        raw = _merge(raw, data)
    for text in overrides:
        raw = _merge(raw, parse_override(text))
    return validate(raw)


__all__ = ["ConfigError", "DEFAULTS", "PAPER_CONTOUR", "RunConfig", "build_path", "load_config",
           "parse_override", "validate"]
