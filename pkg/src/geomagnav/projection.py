"""Local planar projection used for dead reckoning.

Positions are carried as north (``x``) and east (``y``) offsets in meters from
a fixed anchor point.  The mapping is equirectangular with the standard
parallel at the anchor latitude, so the inverse is exact up to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

EARTH_RADIUS_M = 6_371_008.8


@dataclass(frozen=True)
class LocalProjection:
    lat0_deg: float
    lon0_deg: float
    radius_m: float = EARTH_RADIUS_M

    def __post_init__(self):
        if not -89.0 < self.lat0_deg < 89.0:
            raise ValueError(f"projection anchor latitude {self.lat0_deg} too close to a pole")

    @property
    def _east_scale(self) -> float:
        return self.radius_m * math.cos(math.radians(self.lat0_deg))

    def forward(self, lat_deg: float, lon_deg: float) -> tuple[float, float]:
        """(lat, lon) in degrees -> (north_m, east_m)."""
        dlon = (lon_deg - self.lon0_deg + 180.0) % 360.0 - 180.0
        x = self.radius_m * math.radians(lat_deg - self.lat0_deg)
        y = self._east_scale * math.radians(dlon)
        return x, y

    def inverse(self, x_m: float, y_m: float) -> tuple[float, float]:
        lat = self.lat0_deg + math.degrees(x_m / self.radius_m)
        lon = self.lon0_deg + math.degrees(y_m / self._east_scale)
        lon = (lon + 180.0) % 360.0 - 180.0
        return lat, lon
