"""Mission results and the scalar metrics reported for them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from geomagnav.angles import angle_diff
from geomagnav.field import GeoPosition

OUTCOMES = ("success", "budget-exhausted", "aborted")

# Per-step columns carried by a MissionResult, in CSV order.
TRAJECTORY_COLUMNS = (
    "step", "leg", "lat", "lon", "x_m", "y_m",
    "theta_cmd", "theta_analytic", "theta_predicted", "theta_true",
    "eta", "e_n", "mu", "sigma2", "speed",
    "F_total", "F_bx", "F_by", "F_bz", "F_d", "F_i",
    "bx", "by", "bz", "D", "I",
)


def heading_variance(truth: Sequence[float], predicted: Sequence[float]) -> float:
    """Signed mean of wrapped (truth - predicted) over all K_t headings."""
    t = np.asarray(truth, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if t.shape != p.shape:
        raise ValueError(f"series differ in length: {t.size} vs {p.size}")
    if t.size == 0:
        raise ValueError("K_t = 0: no headings to compare")
    return float(np.sum(angle_diff(t, p)) / t.size)


def heading_variance_unbiased(truth: Sequence[float], predicted: Sequence[float]) -> float:
    """Sample variance (ddof=1) of the wrapped differences; 0 for a single heading."""
    t = np.asarray(truth, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if t.shape != p.shape:
        raise ValueError(f"series differ in length: {t.size} vs {p.size}")
    if t.size == 0:
        raise ValueError("K_t = 0: no headings to compare")
    d = angle_diff(t, p)
    return float(np.var(d, ddof=1)) if d.size > 1 else 0.0


def navigation_deviation(origin: GeoPosition, destination: GeoPosition, arrival: GeoPosition) -> float:
    """Distance left to the destination relative to the origin-destination distance."""
    base = math.hypot(destination.x_m - origin.x_m, destination.y_m - origin.y_m)
    if base == 0.0:
        raise ValueError("origin and destination coincide")
    return math.hypot(destination.x_m - arrival.x_m, destination.y_m - arrival.y_m) / base


@dataclass(frozen=True)
class MetricSet:
    travelled_km: float
    steps: int
    heading_variance: float
    heading_variance_unbiased: float
    deviation: float
    arrival: GeoPosition
    mean_eta: float
    leg_deviations: tuple[float, ...] = ()
    leg_steps: tuple[int, ...] = ()


@dataclass(frozen=True)
class MissionResult:
    """Everything recorded during one mission.

    ``table`` holds one array per name in TRAJECTORY_COLUMNS, one entry per
    position (row 0 is the origin; heading columns on row s describe the move
    that ended at position s, so they are NaN on row 0).
    """

    table: dict
    outcome: str
    metrics: Optional[MetricSet]
    waypoints: tuple[GeoPosition, ...]
    policy: str
    message: str = ""
    leg_outcomes: tuple[str, ...] = field(default_factory=tuple)

    @property
    def steps(self) -> int:
        return len(self.table["step"]) - 1

    @property
    def succeeded(self) -> bool:
        return self.outcome == "success"

    def column(self, name: str) -> np.ndarray:
        return self.table[name]


def compute_metrics(table: dict, waypoints: Sequence[GeoPosition]) -> MetricSet:
    """Derive a MetricSet from trajectory columns alone.

    ``waypoints`` is the origin followed by the ordered destinations; leg
    membership of each row comes from the ``leg`` column.
    """
    x = np.asarray(table["x_m"], float)
    y = np.asarray(table["y_m"], float)
    steps = len(x) - 1
    travelled = float(np.sum(np.hypot(np.diff(x), np.diff(y)))) / 1000.0
    legs = np.asarray(table["leg"], int)
    last = GeoPosition(float(table["lat"][-1]), float(table["lon"][-1]), float(x[-1]), float(y[-1]))
    leg_devs, leg_steps = [], []
    for leg in range(int(legs.max()) + 1 if len(legs) else 0):
        rows = np.flatnonzero(legs == leg)
        if rows.size == 0:
            break
        end = int(rows[-1])
        arrival = GeoPosition(float(table["lat"][end]), float(table["lon"][end]), float(x[end]), float(y[end]))
        try:
            leg_devs.append(navigation_deviation(waypoints[leg], waypoints[leg + 1], arrival))
        except ValueError:
            leg_devs.append(math.nan)
        leg_steps.append(int(np.count_nonzero(rows > 0)))
    moved = np.arange(len(x)) > 0
    truth = np.asarray(table["theta_true"], float)[moved]
    cmd = np.asarray(table["theta_cmd"], float)[moved]
    if truth.size:
        hv = heading_variance(truth, cmd)
        hvu = heading_variance_unbiased(truth, cmd)
    else:
        hv = hvu = 0.0
    # eta is undefined (NaN) on steps flown purely on network headings
    eta = np.asarray(table["eta"], float)[moved]
    eta = eta[~np.isnan(eta)]
    mean_eta = float(np.mean(eta)) if eta.size else math.nan
    return MetricSet(
        travelled_km=travelled,
        steps=steps,
        heading_variance=hv,
        heading_variance_unbiased=hvu,
        deviation=leg_devs[-1] if leg_devs else 0.0,
        arrival=last,
        mean_eta=mean_eta,
        leg_deviations=tuple(leg_devs),
        leg_steps=tuple(leg_steps),
    )
