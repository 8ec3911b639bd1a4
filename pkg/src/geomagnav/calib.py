"""Anomaly detection and heading calibration.

The analytic (gradient) heading and the network heading are compared; a
Gaussian fitted by maximum likelihood to their discrepancy under normal
conditions turns the current discrepancy into an anomaly weight, and the
weight blends the two headings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from geomagnav.angles import angle_diff, wrap_deg

SIGMA2_FLOOR = 1.0
ETA_MIN = 1e-3


class NotReadyError(RuntimeError):
    """Not enough samples yet; callers fall back to the analytic heading."""


@dataclass(frozen=True)
class AnomalyStats:
    mu: float
    sigma2: float
    window: tuple[float, ...]

    def __post_init__(self):
        if not self.sigma2 > 0.0:
            raise ValueError("sigma2 must be positive")
        if not self.window:
            raise ValueError("reference window is empty")


@dataclass(frozen=True)
class BlendRecord:
    e_n: float
    eta: float
    theta_cmd: float


def heading_discrepancy(analytic: Sequence[float], predicted: Sequence[float]) -> float:
    """Mean absolute wrapped difference between two heading sequences."""
    a = np.asarray(analytic, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if a.shape != p.shape:
        raise ValueError(f"heading sequences differ in length: {a.shape} vs {p.shape}")
    if a.size == 0:
        raise ValueError("heading sequences are empty")
    return float(np.mean(np.abs(angle_diff(a, p))))


def fit_reference(samples: Sequence[float], sigma2_floor: float = SIGMA2_FLOOR) -> AnomalyStats:
    """Gaussian MLE (biased variance) with a variance floor."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise NotReadyError(f"need at least 2 samples, got {x.size}")
    mu = float(np.mean(x))
    var = float(np.mean((x - mu) ** 2))
    return AnomalyStats(mu, max(var, sigma2_floor), tuple(float(v) for v in x))


def anomaly_weight(e_n: float, stats: AnomalyStats, eta_min: float = ETA_MIN) -> float:
    eta = math.exp(-((e_n - stats.mu) ** 2) / stats.sigma2)
    return min(1.0, max(eta_min, eta))


def blend_heading(eta: float, analytic: float, predicted: float) -> float:
    """eta * analytic + (1 - eta) * predicted, taken along the shorter arc.

    Identical to the plain weighted sum unless the two headings straddle the
    +-180 seam, where the plain sum would point the wrong way.
    """
    if eta == 1.0:
        return wrap_deg(analytic)
    return wrap_deg(predicted + eta * angle_diff(analytic, predicted))
