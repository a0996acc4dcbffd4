"""Scenario files: JSON with a versioned header, validated with line info.

Schema (version 1), every section optional except the header:

    {
      "version": 1,
      "name": "pillars",
      "map":     {"kind": "pillars|noise|empty", "seed": 0, "size": [10, 10, 3],
                  "resolution": 0.1667, "density": 0.25, "radius_range": [0.1, 0.3],
                  "threshold": 0.7, "scale": 8.0, "clear_radius": 1.0},
      "spline":  {"k": 6, "dt": 0.15, "weights": {"4": 1.0},
                  "bounds": {"1": [2, 2, 2], "2": [3, 3, 3]}},
      "planner": {"lambda": "auto", "window": 12, "sensing_range": 4.0,
                  "mode": "passive", "timer_knots": null, "connectivity": 26,
                  "v_max": 3.5, "max_expansions": null,
                  "clearances": {"rbk": 0.4, "elas": 0.2, "robot_radius": 0.1}},
      "start": [1, 1, 1.5], "goal": [9, 9, 1.5], "round_trip": false,
      "sim":     {"step": 0.05, "max_time": 120.0}
    }

Any key can be overridden with "dotted.key=value" (value parsed as JSON,
falling back to a plain string).
"""

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from bench import SCENARIO_VERSION
from planner.bspline import UniformBsplineSpec
from planner.elastic import check_two_level_inflation
from planner.env_map import (
    DEFAULT_NOISE_SCALE,
    DEFAULT_NOISE_THRESHOLD,
    DEFAULT_PILLAR_DENSITY,
    DEFAULT_PILLAR_RADII,
    DEFAULT_RESOLUTION,
    OccupancyWorld,
    build_world,
    clear_around,
    generate_noise_map,
    generate_random_pillars,
    grid_dims,
)
from planner.replanner import SENSING_RANGE, WINDOW, PlannerConfig
from planner.rbk import V_MAX

MAP_KINDS = ("pillars", "noise", "empty")

DEFAULTS: Dict = {
    "version": SCENARIO_VERSION,
    "name": "scenario",
    "map": {
        "kind": "pillars",
        "seed": 0,
        "size": [10.0, 10.0, 3.0],
        "resolution": DEFAULT_RESOLUTION,
        "density": DEFAULT_PILLAR_DENSITY,
        "radius_range": list(DEFAULT_PILLAR_RADII),
        "threshold": DEFAULT_NOISE_THRESHOLD,
        "scale": DEFAULT_NOISE_SCALE,
        "clear_radius": 1.0,
    },
    "spline": {"k": 6, "dt": 0.15, "weights": None,
               "bounds": {"1": [2.0, 2.0, 2.0], "2": [3.0, 3.0, 3.0]}},
    "planner": {
        "lambda": "auto",
        "window": WINDOW,
        "sensing_range": SENSING_RANGE,
        "mode": "passive",
        "timer_knots": None,
        "connectivity": 26,
        "v_max": V_MAX,
        "max_expansions": None,
        "clearances": {"rbk": 0.4, "elas": 0.2, "robot_radius": 0.1},
    },
    "start": [1.0, 1.0, 1.5],
    "goal": [9.0, 9.0, 1.5],
    "round_trip": False,
    "sim": {"step": 0.05, "max_time": 120.0},
}


class ScenarioError(ValueError):
    pass


def _line_of(text: str, key: str) -> int:
    needle = f'"{key.split(".")[-1]}"'
    for n, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return n
    return 1


def _deep_merge(base: Dict, extra: Dict) -> Dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def parse_override(item: str):
    """'a.b=value' -> (['a', 'b'], parsed value)."""
    if "=" not in item:
        raise ScenarioError(f"Invalid override {item!r}: expected dotted.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: Dict, overrides: Sequence[str]) -> Dict:
    out = copy.deepcopy(data)
    for item in overrides or ():
        path, value = parse_override(item)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ScenarioError(f"Invalid override {item!r}: {part} is not a section")
        node[path[-1]] = value
    return out


@dataclass
class Scenario:
    data: Dict
    source: str = "<scenario>"
    text: str = ""

    @property
    def name(self) -> str:
        return str(self.data["name"])

    def fail(self, key: str, msg: str) -> ScenarioError:
        return ScenarioError(f"{self.source}:{_line_of(self.text, key)}: {key}: {msg}")

    def spline_spec(self) -> UniformBsplineSpec:
        s = self.data["spline"]
        try:
            return UniformBsplineSpec(
                k=int(s["k"]), dt=float(s["dt"]),
                weights=None if s.get("weights") is None else
                {int(l): float(w) for l, w in s["weights"].items()},
                bounds=None if s.get("bounds") is None else
                {int(l): b for l, b in s["bounds"].items()},
            )
        except (ValueError, TypeError, KeyError) as e:
            raise self.fail("spline", str(e)) from None

    def planner_config(self) -> PlannerConfig:
        p = self.data["planner"]
        lam = p.get("lambda", "auto")
        try:
            return PlannerConfig(
                spec=self.spline_spec(),
                window=int(p["window"]),
                sensing_range=float(p["sensing_range"]),
                mode=str(p["mode"]),
                timer_knots=None if p.get("timer_knots") is None else int(p["timer_knots"]),
                connectivity=int(p["connectivity"]),
                lam=None if lam in (None, "auto") else float(lam),
                v_max=float(p["v_max"]),
                max_expansions=None if p.get("max_expansions") is None else int(p["max_expansions"]),
            )
        except (ValueError, TypeError, KeyError) as e:
            raise self.fail("planner", str(e)) from None

    def clearances(self) -> Dict[str, float]:
        return {k: float(v) for k, v in self.data["planner"]["clearances"].items()}

    def goals(self) -> List[np.ndarray]:
        goal = np.asarray(self.data["goal"], dtype=float)
        if self.data.get("round_trip"):
            return [goal, np.asarray(self.data["start"], dtype=float)]
        return [goal]

    def build_world(self) -> OccupancyWorld:
        m = self.data["map"]
        res = float(m["resolution"])
        dims = grid_dims(m["size"], res)
        kind = m["kind"]
        if kind == "pillars":
            obs = generate_random_pillars(int(m["seed"]), m["size"][:2], float(m["density"]),
                                          m["radius_range"], res, float(m["size"][2]))
        elif kind == "noise":
            obs = generate_noise_map(int(m["seed"]), dims, float(m["threshold"]), res,
                                     float(m["scale"]))
        else:
            obs = np.zeros((0, 3))
        obs = clear_around(obs, [self.data["start"], self.data["goal"]], float(m["clear_radius"]))
        try:
            return build_world(obs, res, dims, self.clearances())
        except ValueError as e:
            raise self.fail("clearances", str(e)) from None

    def validate(self) -> "Scenario":
        d = self.data
        if d.get("version") != SCENARIO_VERSION:
            raise self.fail("version", f"unsupported version {d.get('version')!r} "
                                       f"(expected {SCENARIO_VERSION})")
        if d["map"].get("kind") not in MAP_KINDS:
            raise self.fail("kind", f"unknown map kind {d['map'].get('kind')!r}, use {MAP_KINDS}")
        for key in ("start", "goal"):
            val = d.get(key)
            if not isinstance(val, list) or len(val) != 3:
                raise self.fail(key, f"expected [x, y, z], got {val!r}")
        if not float(d["sim"]["step"]) > 0 or not float(d["sim"]["max_time"]) > 0:
            raise self.fail("sim", "step and max_time must be > 0")
        cfg = self.planner_config()
        c = self.clearances()
        ok, margins = check_two_level_inflation(float(d["map"]["resolution"]), cfg.connectivity,
                                                c["rbk"], c["elas"], c.get("robot_radius", 0.0))
        if not ok:
            raise self.fail("clearances", "two-level inflation condition fails: "
                                          + ", ".join(f"{k}={v:.4f}" for k, v in margins.items()))
        size = np.asarray(d["map"]["size"], dtype=float)
        for key in ("start", "goal"):
            p = np.asarray(d[key], dtype=float)
            if np.any(p < 0) or np.any(p > size):
                raise self.fail(key, f"{p.tolist()} lies outside the map {size.tolist()}")
        world = self.build_world()
        for key in ("start", "goal"):
            center = world.center(world.cell_of(np.asarray(d[key], dtype=float)))
            if not world.is_free(center, "elas"):
                raise self.fail(key, f"{d[key]} is blocked at the c_elas clearance "
                                     f"(map.clear_radius={d['map'].get('clear_radius')})")
        return self


def load_scenario(path: Optional[Path] = None, overrides: Sequence[str] = (),
                  data: Optional[Dict] = None) -> Scenario:
    """Read, merge with defaults, apply overrides and validate a scenario."""
    text, source = "", "<scenario>"
    if path is not None:
        source = str(path)
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"{source}:{e.lineno}: {e.msg}") from None
    data = data or {}
    if not isinstance(data, dict):
        raise ScenarioError(f"{source}:1: top level must be an object")
    if "version" not in data:
        raise ScenarioError(f"{source}:1: missing \"version\" header")
    merged = apply_overrides(_deep_merge(DEFAULTS, data), overrides)
    return Scenario(merged, source, text).validate()
