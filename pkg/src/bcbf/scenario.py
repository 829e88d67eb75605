"""Scenario files: JSON documents validated against ``scenario.schema.json``.

A :class:`Scenario` keeps the validated document and builds fresh, stateful
components (safe-set providers, reference controller) for every run, so
runs never share mutable state and can be rebuilt inside worker processes.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .belief_dynamics import ObservationModel, SystemModel, linear_observation
from .errors import BeliefError, ConfigurationError, DimensionError
from .gaussian_belief import GaussianBelief, RiskHalfSpace
from .models import (
    AdversarialReference,
    CircularObstacle,
    HalfSpaceSet,
    LQRReference,
    PolytopeSequence,
    WaypointReference,
    box_halfspaces,
    drone_model,
    drone_position_observation,
    drone_velocity_observation,
    integrator_model,
    linear_model,
    unicycle_model,
)

SCHEMA_VERSION = 1
DEFAULTS = {
    "truth_substeps": 10,
    "sensing_key": "truth",
    "seed": 0,
}
CONTROLLER_DEFAULTS = {
    "epsilon": 0.5,
    "order": 2,
    "zeta": [4.0, 4.0],
    "slack_weight": 1e6,
    "integrator": "rk4",
}


def schema() -> dict:
    text = resources.files("bcbf").joinpath("scenarios/scenario.schema.json").read_text()
    return json.loads(text)


def builtin_path(name: str) -> Path:
    """Path of a scenario shipped with the package, e.g. ``"unicycle_obstacle"``."""
    path = Path(str(resources.files("bcbf").joinpath(f"scenarios/{name}.json")))
    if not path.exists():
        raise ConfigurationError(f"no built-in scenario named {name!r}")
    return path


def _box_contains(region, x) -> bool:
    idx = region.get("pos_idx") or list(range(len(region["lo"])))
    p = np.asarray(x)[idx]
    return bool(np.all(p >= np.asarray(region["lo"])) and np.all(p <= np.asarray(region["hi"])))


@dataclass
class SensingRegion:
    name: str
    obs: ObservationModel
    region: dict | None

    def contains(self, x) -> bool:
        return self.region is None or _box_contains(self.region, x)


class Scenario:
    def __init__(self, config: dict):
        try:
            jsonschema.validate(config, schema())
        except jsonschema.ValidationError as exc:
            raise ConfigurationError(f"scenario does not match schema: {exc.message}") from exc
        cfg = copy.deepcopy(config)
        for k, v in DEFAULTS.items():
            cfg.setdefault(k, v)
        ctrl = dict(CONTROLLER_DEFAULTS)
        ctrl.update(cfg.get("controller", {}))
        cfg["controller"] = ctrl
        self.config = cfg
        self.name = cfg["name"]
        self.model = self._build_model(cfg["model"])
        n, m = self.model.n, self.model.m
        self.dt = float(cfg["dt"])
        self.duration = float(cfg["duration"])
        self.truth_substeps = int(cfg["truth_substeps"])
        self.n_steps = int(round(self.duration / self.dt))
        if abs(self.n_steps * self.dt - self.duration) > 1e-9 * max(1.0, self.duration):
            raise ConfigurationError("duration must be an integer multiple of dt")
        init = cfg.get("initial_state", cfg["initial_belief"])
        try:
            self.initial_belief = GaussianBelief(cfg["initial_belief"]["mean"], cfg["initial_belief"]["cov"])
            self.initial_state = GaussianBelief(init["mean"], init["cov"])
        except (DimensionError, BeliefError) as exc:
            raise ConfigurationError(f"invalid initial belief/state: {exc}") from exc
        if self.initial_belief.n != n or self.initial_state.n != n:
            raise ConfigurationError(f"initial belief/state dimension does not match model n={n}")
        self.truth_Q = np.array(cfg.get("truth_Q", self.model.Q), dtype=float)
        self.sensing = [self._build_sensing(i, s) for i, s in enumerate(cfg["sensing"])]
        self.sensing_key = cfg["sensing_key"]
        self.epsilon = float(ctrl["epsilon"])
        self.order = int(ctrl["order"])
        self.zeta = tuple(ctrl["zeta"])
        self.slack_weight = ctrl["slack_weight"]
        self.integrator = ctrl["integrator"]
        self.lower = np.asarray(ctrl["u_min"], dtype=float) if "u_min" in ctrl else None
        self.upper = np.asarray(ctrl["u_max"], dtype=float) if "u_max" in ctrl else None
        for bound in (self.lower, self.upper):
            if bound is not None and bound.shape != (m,):
                raise ConfigurationError(f"input bounds must have length m={m}")
        self.goal = cfg.get("goal")
        self.seed = int(cfg["seed"])
        # build once to surface configuration errors early
        self.build_safe_set()
        self.build_reference()

    # -- construction -------------------------------------------------------

    @staticmethod
    def _build_model(entry) -> SystemModel:
        kind = entry["kind"]
        Q = entry.get("Q")
        if kind == "unicycle":
            return unicycle_model() if Q is None else unicycle_model(np.array(Q, dtype=float))
        if kind == "drone":
            return drone_model() if Q is None else drone_model(np.array(Q, dtype=float))
        if kind == "integrator":
            return integrator_model(0.0 if Q is None else float(np.array(Q)[0, 0]))
        if kind == "linear":
            if "A" not in entry or "B" not in entry or Q is None:
                raise ConfigurationError("linear model needs A, B and Q")
            return linear_model(entry["A"], entry["B"], Q)
        raise ConfigurationError(f"unknown model kind {kind!r}")

    def _build_sensing(self, i, entry) -> SensingRegion:
        o = entry["observation"]
        n = self.model.n
        R = np.array(o["R"], dtype=float)
        kind = o["kind"]
        if kind == "full":
            obs = linear_observation(np.eye(n), R, o["rate_hz"], name="full")
        elif kind == "position":
            if self.model.name != "drone":
                raise ConfigurationError("position observation is defined for the drone model")
            obs = drone_position_observation(R, o["rate_hz"])
        elif kind == "velocity":
            if self.model.name != "drone":
                raise ConfigurationError("velocity observation is defined for the drone model")
            obs = drone_velocity_observation(R, o["rate_hz"])
        else:
            if "H" not in o:
                raise ConfigurationError("linear observation needs H")
            obs = linear_observation(o["H"], R, o["rate_hz"])
        if obs.jacobian(np.zeros(n)).shape[0] != obs.dim:
            raise ConfigurationError(f"sensing entry {i}: R does not match the observation dimension")
        return SensingRegion(entry.get("name", f"sensor{i}"), obs, entry.get("region"))

    def _halfspace(self, entry, delta) -> RiskHalfSpace:
        if len(entry["alpha"]) != self.model.n:
            raise ConfigurationError(f"half-space alpha must have length n={self.model.n}")
        return RiskHalfSpace(entry["alpha"], entry["beta"], delta)

    def build_safe_set(self) -> list:
        n = self.model.n
        out = []
        for i, entry in enumerate(self.config["safe_set"]):
            kind = entry["kind"]
            name = entry.get("name", f"{kind}{i}")
            common = dict(order=self.order, zeta=self.zeta, epsilon=self.epsilon, name=name)
            delta = entry["delta"]
            if kind == "obstacle":
                out.append(
                    CircularObstacle(
                        entry["center"],
                        entry["radius"],
                        delta,
                        pos_idx=tuple(entry.get("pos_idx", [0, 1])),
                        track_alpha=entry.get("track_alpha", False),
                        **common,
                    )
                )
            elif kind == "halfspaces":
                hss = [self._halfspace(h, delta) for h in entry["halfspaces"]]
                out.append(HalfSpaceSet(hss, **common))
            elif kind == "box":
                pos_idx = entry.get("pos_idx", list(range(len(entry["lo"]))))
                out.append(HalfSpaceSet(box_halfspaces(entry["lo"], entry["hi"], pos_idx, n, delta), **common))
            elif kind == "polytopes":
                polys = [[self._halfspace(h, delta) for h in poly] for poly in entry["polytopes"]]
                out.append(PolytopeSequence(polys, **common))
        return out

    def build_reference(self):
        entry = self.config["reference"]
        kind = entry["kind"]
        m = self.model.m
        if kind == "lqr":
            return LQRReference(
                self.model,
                entry["goal"],
                entry["Q"],
                entry["R"],
                angle_idx=tuple(entry.get("angle_idx", ())),
                speed_idx=entry.get("speed_idx"),
                v_min=entry.get("v_min", 0.1),
            )
        if kind == "adversarial":
            return AdversarialReference(
                entry["lo"],
                entry["hi"],
                u_max=entry.get("u_max", 3.0),
                dwell=entry.get("dwell", 2.0),
                overshoot=entry.get("overshoot", 0.5),
                seed=entry.get("seed", self.config["seed"]),
            )
        if kind == "waypoints":
            return WaypointReference(
                entry["waypoints"],
                kp=entry.get("kp", 1.5),
                kd=entry.get("kd", 2.0),
                u_max=entry.get("u_max", 2.0),
                dim=len(entry["waypoints"][0]),
            )
        value = np.asarray(entry.get("value", np.zeros(m)), dtype=float)
        if value.shape != (m,):
            raise ConfigurationError(f"constant reference must have length m={m}")
        return lambda t, b: value.copy()

    # -- queries ------------------------------------------------------------

    def sensor_at(self, x) -> SensingRegion:
        for s in self.sensing:
            if s.contains(x):
                return s
        return self.sensing[-1]

    def with_overrides(self, epsilon=None, delta=None, dt=None) -> "Scenario":
        cfg = copy.deepcopy(self.config)
        if epsilon is not None:
            cfg["controller"]["epsilon"] = epsilon
        if delta is not None:
            for entry in cfg["safe_set"]:
                entry["delta"] = delta
        if dt is not None:
            if not dt > 0:
                raise ConfigurationError(f"dt must be positive, got {dt}")
            cfg["duration"] = round(cfg["duration"] / dt) * dt
            cfg["dt"] = dt
        return Scenario(cfg)


def load_scenario(source, epsilon=None, delta=None, dt=None) -> Scenario:
    """Load a scenario from a path, a built-in name or an already parsed dict."""
    if isinstance(source, dict):
        sc = Scenario(source)
    else:
        path = Path(source)
        if not path.exists() and not path.suffix:
            path = builtin_path(str(source))
        try:
            config = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigurationError(f"scenario file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"scenario file {path} is not valid JSON: {exc}") from exc
        sc = Scenario(config)
    if epsilon is not None or delta is not None or dt is not None:
        sc = sc.with_overrides(epsilon, delta, dt)
    return sc
