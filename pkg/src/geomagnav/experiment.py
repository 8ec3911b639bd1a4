"""Training-data generation, scenario suites and CSV export."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from geomagnav.config import Scenario
from geomagnav.field import GeoPosition, World
from geomagnav.metrics import OUTCOMES, TRAJECTORY_COLUMNS, MissionResult
from geomagnav.nav import NavParams, Policy, SpeedSchedule, encode_step, run_mission
from geomagnav.projection import EARTH_RADIUS_M, LocalProjection
from geomagnav import talstm

CONVERGENCE_COLUMNS = ("step", "leg", "F_bx", "F_by", "F_bz", "F_d", "F_i", "F_total")
SUITE_COLUMNS = ("run_id", "outcome", "steps", "travelled_km", "heading_variance_signed",
                 "heading_variance_unbiased", "deviation", "mean_eta")
AGGREGATE_STATS = ("steps", "travelled_km", "heading_variance_signed", "heading_variance_unbiased",
                   "deviation", "mean_eta")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(columns)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path: Union[str, Path]) -> dict:
    """Numeric CSV back into column arrays (non-numeric columns stay strings)."""
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = text[0].split(",")
    cols = list(zip(*[line.split(",") for line in text[1:]])) if len(text) > 1 else [()] * len(header)
    out = {}
    for name, vals in zip(header, cols):
        try:
            out[name] = np.array([float(v) for v in vals])
        except ValueError:
            out[name] = np.array(vals)
    return out


# ------------------------------------------------------------ training data

def mission_windows(result: MissionResult, world: World, T: int, episode_start: int = 0,
                    successful_only: bool = False) -> list[talstm.WindowSeries]:
    """Cut a recorded mission into network windows, one episode per leg.

    Step s of a leg contributes the features at the position it started from
    and the heading it flew, exactly as assembled during a mission.  The
    next-window targets are the analytic headings, which differ from the
    flown ones only when the flight was perturbed.  A trailing partial window
    is dropped, as are legs that did not arrive when ``successful_only``.
    """
    tab = result.table
    proj = LocalProjection(result.waypoints[0].lat_deg, result.waypoints[0].lon_deg)
    windows = []
    legs = tab["leg"]
    for leg in range(len(result.waypoints) - 1):
        rows = [r for r in np.flatnonzero(legs == leg) if r > 0]
        arrived = leg < len(result.leg_outcomes) and result.leg_outcomes[leg] == "success"
        if not rows or (successful_only and not arrived):
            continue
        dest = GeoPosition.from_latlon(result.waypoints[leg + 1].lat_deg, result.waypoints[leg + 1].lon_deg, proj)
        dest_sample = world.field_at(dest)
        feats, heads, labels = [], [], []
        for r in rows:
            prev = GeoPosition(float(tab["lat"][r - 1]), float(tab["lon"][r - 1]),
                               float(tab["x_m"][r - 1]), float(tab["y_m"][r - 1]))
            feats.append(encode_step(prev, world.field_at(prev), dest, dest_sample))
            heads.append(float(tab["theta_cmd"][r]))
            labels.append(float(tab["theta_analytic"][r]))
        n_win = len(rows) // T
        ep = episode_start + leg
        for n in range(n_win):
            sl = slice(n * T, (n + 1) * T)
            nxt = np.array(labels[(n + 1) * T:(n + 2) * T]) if n + 1 < n_win else None
            windows.append(talstm.WindowSeries(np.array(feats[sl]), np.array(heads[sl]),
                                               index=n + 1, episode=ep, next_targets=nxt))
    return windows


def _random_point(rng: np.random.Generator, lat_range, lon_range) -> tuple[float, float]:
    return float(rng.uniform(*lat_range)), float(rng.uniform(*lon_range))


def random_route(rng: np.random.Generator, lat_range, lon_range, n_legs: int, min_km: float,
                 tries: int = 1000) -> list[tuple[float, float]]:
    """Origin plus ``n_legs`` waypoints, consecutive points at least ``min_km`` apart."""
    route = [_random_point(rng, lat_range, lon_range)]
    for _ in range(n_legs):
        for _ in range(tries):
            b = _random_point(rng, lat_range, lon_range)
            x, y = LocalProjection(*route[-1]).forward(*b)
            if math.hypot(x, y) >= 1000.0 * min_km:
                route.append(b)
                break
        else:
            raise ValueError(f"no waypoint at least {min_km} km away inside the training region")
    return route


def generate_training_windows(scenario: Scenario, seed: int = 0, trajectories: Optional[int] = None,
                              exploration_deg: Optional[float] = None) -> list[talstm.WindowSeries]:
    """Fly the analytic policy along random routes in the anomaly-free world.

    With ``exploration_deg`` set, each flown window is offset from the
    analytic heading by a random angle, so the data also covers positions off
    the ideal path together with the heading that corrects them.
    """
    spec = scenario.training
    trajectories = spec.trajectories if trajectories is None else trajectories
    exploration_deg = spec.exploration_deg if exploration_deg is None else exploration_deg
    world = scenario.world.without_anomalies()
    rng = np.random.default_rng(seed)
    windows = []
    episode = 0
    for _ in range(trajectories):
        n_legs = int(rng.integers(spec.legs[0], spec.legs[1] + 1))
        route = random_route(rng, spec.lat_range, spec.lon_range, n_legs, spec.min_distance_km)
        policy = Policy("analytic", exploration_deg=exploration_deg,
                        exploration_seed=int(rng.integers(2**32)))
        res = run_mission(world, GeoPosition(*route[0]), [GeoPosition(*p) for p in route[1:]],
                          policy, scenario.schedule, spec.eps, spec.max_steps, scenario.nav)
        windows += mission_windows(res, world, scenario.nav.window, episode_start=episode, successful_only=True)
        episode += len(route) - 1
    return windows


def calibration_windows(scenario: Scenario, seed: int = 0) -> list[talstm.WindowSeries]:
    """Unperturbed flights, disjoint in seed from the training data."""
    n = max(1, scenario.training.trajectories // 3)
    return generate_training_windows(scenario, seed + 1_000_003, trajectories=n, exploration_deg=0.0)


def train_from_scenario(scenario: Scenario, seed: int = 0, windows=None) -> talstm.TaLstmModel:
    """Generate data, train, then record the clean-flight discrepancy reference."""
    if windows is None:
        windows = generate_training_windows(scenario, seed)
    model = talstm.init_model(T=scenario.nav.window, hidden=scenario.training.hidden, seed=seed)
    model = talstm.train(model, windows, replace(scenario.training.train, seed=seed))
    ref = talstm.reference_discrepancies(model, talstm.group_episodes(calibration_windows(scenario, seed)))
    if ref.size >= 2:
        model.reference_samples = ref
    return model


# ------------------------------------------------------------------ missions

def policy_for(scenario: Scenario, model: Optional[talstm.TaLstmModel]) -> Policy:
    return Policy(scenario.policy.kind, model, scenario.sigma2_floor, scenario.eta_min)


def run_scenario(scenario: Scenario, model: Optional[talstm.TaLstmModel] = None,
                 origin: Optional[GeoPosition] = None) -> MissionResult:
    m = scenario.mission
    return run_mission(scenario.world, origin or m.origin_position(), m.destination_positions(),
                       policy_for(scenario, model), scenario.schedule, m.eps, m.max_steps, scenario.nav)


def jitter_origin(origin: GeoPosition, radius_km: float, rng: np.random.Generator) -> GeoPosition:
    """Uniform draw from a disc around the origin."""
    if radius_km <= 0.0:
        return origin
    r = radius_km * 1000.0 * math.sqrt(rng.uniform())
    a = rng.uniform(0.0, 2.0 * math.pi)
    lat, lon = LocalProjection(origin.lat_deg, origin.lon_deg).inverse(r * math.cos(a), r * math.sin(a))
    return GeoPosition(lat, lon)


@dataclass(frozen=True)
class RunRecord:
    run_id: int
    seed: int
    result: MissionResult

    def row(self) -> tuple:
        m = self.result.metrics
        if m is None:
            return (self.run_id, self.result.outcome, 0) + (math.nan,) * 5
        return (self.run_id, self.result.outcome, m.steps, m.travelled_km, m.heading_variance,
                m.heading_variance_unbiased, m.deviation, m.mean_eta)


@dataclass(frozen=True)
class SuiteReport:
    runs: tuple[RunRecord, ...]
    aggregate: dict

    def rows(self) -> list[tuple]:
        return [r.row() for r in self.runs]


def _run_one(args) -> RunRecord:
    scenario, model, run_id, run_seed = args
    rng = np.random.default_rng(run_seed)
    origin = jitter_origin(scenario.mission.origin_position(), scenario.suite.origin_jitter_km, rng)
    if model is not None and scenario.suite.vary_model_seed:
        model = train_from_scenario(scenario, seed=run_seed)
    return RunRecord(run_id, run_seed, run_scenario(scenario, model, origin))


def run_seeds(seed: int, repetitions: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1)[0]) for s in ss.spawn(repetitions)]


def aggregate(rows: Sequence[tuple]) -> dict:
    """Mean and population variance of each metric; outcome counts."""
    out = {f"n_{o}": sum(1 for r in rows if r[1] == o) for o in OUTCOMES}
    out["runs"] = len(rows)
    for j, name in enumerate(SUITE_COLUMNS):
        if name not in AGGREGATE_STATS:
            continue
        vals = np.array([float(r[j]) for r in rows])
        out[f"{name}_mean"] = float(np.mean(vals))
        out[f"{name}_var"] = float(np.var(vals))
    return out


def run_scenario_suite(scenario: Scenario, repetitions: Optional[int] = None, seed: int = 0,
                       model: Optional[talstm.TaLstmModel] = None, workers: Optional[int] = None) -> SuiteReport:
    """Repeat a scenario with seeded variation and aggregate the metrics.

    Each run draws its own seed from ``seed``; the origin is jittered when the
    suite asks for it and, with ``vary_model_seed``, the model is retrained
    from that seed.  Runs are collected in run order whatever the worker
    count, so reports do not depend on scheduling.
    """
    reps = scenario.suite.repetitions if repetitions is None else repetitions
    if reps < 1:
        raise ValueError("repetitions must be >= 1")
    workers = scenario.suite.workers if workers is None else workers
    jobs = [(scenario, model, i, s) for i, s in enumerate(run_seeds(seed, reps))]
    if workers > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=min(workers, reps, os.cpu_count() or 1)) as ex:
            records = list(ex.map(_run_one, jobs))
    else:
        records = [_run_one(j) for j in jobs]
    records.sort(key=lambda r: r.run_id)
    return SuiteReport(tuple(records), aggregate([r.row() for r in records]))


# ------------------------------------------------------------------- export

def trajectory_rows(result: MissionResult) -> list[tuple]:
    tab = result.table
    return [tuple(tab[c][i] for c in TRAJECTORY_COLUMNS) for i in range(len(tab["step"]))]


def export_trajectory(result: MissionResult, path: Union[str, Path]) -> None:
    write_csv(path, TRAJECTORY_COLUMNS, trajectory_rows(result))


def export_convergence(result: MissionResult, path: Union[str, Path], svg: Optional[Union[str, Path]] = None) -> None:
    """Per-step objective terms; optionally a line chart next to the CSV."""
    if len(result.table["step"]) == 0:
        raise ValueError("empty mission result")
    tab = result.table
    rows = [tuple(tab[c][i] for c in CONVERGENCE_COLUMNS) for i in range(len(tab["step"]))]
    write_csv(path, CONVERGENCE_COLUMNS, rows)
    if svg is not None:
        from geomagnav.plotting import plot_convergence
        plot_convergence(result, svg)


def export_suite(report: SuiteReport, out_dir: Union[str, Path], prefix: str = "suite") -> list[Path]:
    out = Path(out_dir)
    paths = [out / f"{prefix}_runs.csv", out / f"{prefix}_aggregate.csv"]
    write_csv(paths[0], SUITE_COLUMNS, report.rows())
    write_csv(paths[1], ("statistic", "value"), sorted(report.aggregate.items()))
    for rec in report.runs:
        if rec.result.metrics is None:
            continue
        p = out / f"{prefix}_run{rec.run_id:03d}_convergence.csv"
        export_convergence(rec.result, p)
        paths.append(p)
    return paths


def straight_line_km(waypoints: Sequence[GeoPosition]) -> float:
    """Sum of great-circle leg lengths (haversine, mean Earth radius)."""
    total = 0.0
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        p1, p2 = math.radians(a.lat_deg), math.radians(b.lat_deg)
        dl = math.radians(b.lon_deg - a.lon_deg)
        h = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
        total += 2 * EARTH_RADIUS_M * math.asin(math.sqrt(h)) / 1000.0
    return total
