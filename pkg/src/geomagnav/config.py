"""Scenario files: JSON trees describing the world, the mission and the policy.

Every block is optional; missing keys take the defaults of the dataclasses
they feed.  Unknown keys are rejected so typos do not silently fall back to
defaults.  Relative paths (grid file, model file) resolve against the
scenario file's directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from geomagnav import calib
from geomagnav.field import AnomalyPatch, DipoleParams, GeoPosition, World, load_grid
from geomagnav.nav import POLICIES, NavParams, SpeedSchedule
from geomagnav.talstm import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MissionSpec:
    origin: tuple[float, float] = (22.6, 132.9)
    destinations: tuple[tuple[float, float], ...] = ((20.8, 136.0),)
    eps: float = 0.02
    max_steps: int = 300

    def origin_position(self) -> GeoPosition:
        return GeoPosition(*self.origin)

    def destination_positions(self) -> list[GeoPosition]:
        return [GeoPosition(*d) for d in self.destinations]


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "analytic"
    model: Optional[str] = None


# Scenario-driven training perturbs teacher headings and D/I inputs so the
# model tolerates its own feedback and anomaly-distorted readings.
SCENARIO_TRAIN = TrainConfig(teacher_noise_deg=10.0, feature_noise=(0.0, 0.0, 1.5, 0.3))


@dataclass(frozen=True)
class TrainingSpec:
    lat_range: tuple[float, float] = (17.0, 26.0)
    lon_range: tuple[float, float] = (130.0, 139.0)
    trajectories: int = 500
    legs: tuple[int, int] = (1, 3)
    min_distance_km: float = 150.0
    eps: float = 0.01
    max_steps: int = 300
    exploration_deg: float = 30.0
    hidden: int = 20
    train: TrainConfig = SCENARIO_TRAIN


@dataclass(frozen=True)
class SuiteSpec:
    repetitions: int = 10
    origin_jitter_km: float = 0.0
    vary_model_seed: bool = False
    workers: int = 1


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    world: World = field(default_factory=World)
    mission: MissionSpec = field(default_factory=MissionSpec)
    policy: PolicySpec = field(default_factory=PolicySpec)
    schedule: SpeedSchedule = field(default_factory=SpeedSchedule)
    nav: NavParams = field(default_factory=NavParams)
    sigma2_floor: float = calib.SIGMA2_FLOOR
    eta_min: float = calib.ETA_MIN
    training: TrainingSpec = field(default_factory=TrainingSpec)
    suite: SuiteSpec = field(default_factory=SuiteSpec)
    base_dir: Path = Path(".")

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _take(block: dict, allowed: set, where: str) -> dict:
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return block


def _build(cls, block: dict, where: str, **overrides):
    names = {f.name for f in dataclasses.fields(cls)}
    _take(block, names | set(overrides), where)
    kwargs = {k: v for k, v in block.items() if k not in overrides}
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _pair(v, where: str) -> tuple[float, float]:
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise ConfigError(f"{where}: expected [lat, lon] or [min, max]")
    return float(v[0]), float(v[1])


def _world(block: dict, base_dir: Path) -> World:
    _take(block, {"dipole", "grid", "anomalies"}, "world")
    grid = None
    if block.get("grid") is not None:
        path = Path(block["grid"])
        grid = load_grid(path if path.is_absolute() else base_dir / path)
    dipole = None
    if grid is None:
        dipole = _build(DipoleParams, block.get("dipole", {}), "world.dipole")
    elif "dipole" in block:
        raise ConfigError("world: give either a dipole or a grid, not both")
    patches = []
    for i, p in enumerate(block.get("anomalies", [])):
        where = f"world.anomalies[{i}]"
        _take(p, {"lat_range_deg", "lon_range_deg", "scales", "taper"}, where)
        scales = p.get("scales", (600.0, 400.0, 200.0))
        if len(scales) != 3:
            raise ConfigError(f"{where}: scales needs three values")
        try:
            patches.append(AnomalyPatch(_pair(p.get("lat_range_deg"), where), _pair(p.get("lon_range_deg"), where),
                                        *map(float, scales), taper=float(p.get("taper", 0.05))))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return World(dipole=dipole, grid=grid, patches=tuple(patches))


def scenario_from_dict(tree: dict, base_dir: Union[str, Path] = ".", name: str = "scenario") -> Scenario:
    base_dir = Path(base_dir)
    _take(tree, {"name", "world", "mission", "policy", "schedule", "nav", "calib", "training", "suite"}, "scenario")
    try:
        world = _world(tree.get("world", {}), base_dir)
    except (ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from None

    m = _take(tree.get("mission", {}), {"origin", "destinations", "eps", "max_steps"}, "mission")
    dests = m.get("destinations", MissionSpec.destinations)
    if not dests:
        raise ConfigError("mission: at least one destination is required")
    mission = MissionSpec(
        origin=_pair(m.get("origin", MissionSpec.origin), "mission.origin"),
        destinations=tuple(_pair(d, "mission.destinations") for d in dests),
        eps=float(m.get("eps", MissionSpec.eps)),
        max_steps=int(m.get("max_steps", MissionSpec.max_steps)),
    )
    if not mission.eps > 0.0 or mission.max_steps < 1:
        raise ConfigError("mission: eps must be positive and max_steps >= 1")
    try:
        mission.origin_position()
        mission.destination_positions()
    except ValueError as exc:
        raise ConfigError(f"mission: {exc}") from None

    policy = _build(PolicySpec, tree.get("policy", {}), "policy")
    if policy.kind not in POLICIES:
        raise ConfigError(f"policy: unknown kind {policy.kind!r}; expected one of {POLICIES}")

    schedule = _build(SpeedSchedule, tree.get("schedule", {}), "schedule")
    nav_block = dict(tree.get("nav", {}))
    if "bootstrap" in nav_block:
        nav_block["bootstrap"] = _pair(nav_block["bootstrap"], "nav.bootstrap")
    nav = _build(NavParams, nav_block, "nav")
    if nav.window < 1:
        raise ConfigError("nav: window must be >= 1")

    c = _take(tree.get("calib", {}), {"sigma2_floor", "eta_min"}, "calib")
    sigma2_floor = float(c.get("sigma2_floor", calib.SIGMA2_FLOOR))
    eta_min = float(c.get("eta_min", calib.ETA_MIN))
    if not sigma2_floor > 0.0 or not 0.0 < eta_min <= 1.0:
        raise ConfigError("calib: sigma2_floor must be positive and eta_min in (0, 1]")

    t = dict(tree.get("training", {}))
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    train_over = {k: t.pop(k) for k in list(t) if k in train_keys}
    if "feature_noise" in train_over:
        train_over["feature_noise"] = tuple(train_over["feature_noise"])
    try:
        train_cfg = replace(SCENARIO_TRAIN, **train_over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training: {exc}") from None
    for key in ("lat_range", "lon_range", "legs"):
        if key in t:
            t[key] = _pair(t[key], f"training.{key}")
    training = _build(TrainingSpec, t, "training", train=train_cfg)
    if training.trajectories < 1:
        raise ConfigError("training: trajectories must be >= 1")
    if not 1 <= training.legs[0] <= training.legs[1]:
        raise ConfigError("training: legs must be [min, max] with 1 <= min <= max")
    training = replace(training, legs=(int(training.legs[0]), int(training.legs[1])))

    suite = _build(SuiteSpec, tree.get("suite", {}), "suite")
    if suite.repetitions < 1 or suite.workers < 1:
        raise ConfigError("suite: repetitions and workers must be >= 1")

    return Scenario(
        name=str(tree.get("name", name)), world=world, mission=mission, policy=policy,
        schedule=schedule, nav=nav, sigma2_floor=sigma2_floor, eta_min=eta_min,
        training=training, suite=suite, base_dir=base_dir,
    )


def load_scenario(path: Union[str, Path]) -> Scenario:
    """Load a scenario file, or a bundled scenario by bare name (e.g. ``anomaly``)."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and p.parent == Path("."):
        bundled = resources.files("geomagnav") / "scenarios" / f"{p.name}.json"
        if bundled.is_file():
            return scenario_from_dict(json.loads(bundled.read_text(encoding="utf-8")), Path.cwd(), p.name)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc.strerror}") from None
    try:
        tree = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return scenario_from_dict(tree, p.parent, p.stem)


def bundled_scenarios() -> list[str]:
    root = resources.files("geomagnav") / "scenarios"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".json"))
