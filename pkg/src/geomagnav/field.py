"""Geomagnetic field model: element derivation, tilted dipole, synthetic anomalies, sampled grids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from geomagnav.projection import LocalProjection

# Order of the five elements compared by the navigation objective.
OBJECTIVE_ELEMENTS = ("bx", "by", "bz", "d", "i")


class FieldDomainError(ValueError):
    """A query fell outside the domain of the configured field."""


class GridFormatError(ValueError):
    """A field-grid file could not be parsed."""


@dataclass(frozen=True)
class GeoPosition:
    lat_deg: float
    lon_deg: float
    x_m: float = 0.0
    y_m: float = 0.0

    def __post_init__(self):
        if not (-90.0 <= self.lat_deg <= 90.0) or not (-180.0 <= self.lon_deg <= 180.0):
            raise ValueError(f"invalid position lat={self.lat_deg} lon={self.lon_deg}")

    @classmethod
    def from_latlon(cls, lat_deg: float, lon_deg: float, proj: LocalProjection) -> GeoPosition:
        x, y = proj.forward(lat_deg, lon_deg)
        return cls(lat_deg, lon_deg, x, y)

    @classmethod
    def from_xy(cls, x_m: float, y_m: float, proj: LocalProjection) -> GeoPosition:
        lat, lon = proj.inverse(x_m, y_m)
        return cls(lat, lon, x_m, y_m)


@dataclass(frozen=True)
class MagneticVector:
    """The seven geomagnetic elements at one location.

    Intensities are in nanotesla and angles in degrees.  ``decl_deg`` is NaN
    where the horizontal intensity vanishes, ``incl_deg`` too where the total
    intensity does.
    """

    bx_nt: float
    by_nt: float
    bz_nt: float
    f_nt: float
    h_nt: float
    incl_deg: float
    decl_deg: float

    @property
    def decl_defined(self) -> bool:
        return not math.isnan(self.decl_deg)

    @property
    def incl_defined(self) -> bool:
        return not math.isnan(self.incl_deg)

    def objective_vector(self) -> np.ndarray:
        """(B_X, B_Y, B_Z, D, I) as used by the convergence objective."""
        return np.array([self.bx_nt, self.by_nt, self.bz_nt, self.decl_deg, self.incl_deg])


def derive_elements(bx: float, by: float, bz: float) -> MagneticVector:
    bx, by, bz = float(bx), float(by), float(bz)
    if not (math.isfinite(bx) and math.isfinite(by) and math.isfinite(bz)):
        raise ValueError(f"non-finite field components ({bx}, {by}, {bz})")
    h = math.hypot(bx, by)
    f = math.sqrt(bx * bx + by * by + bz * bz)
    incl = math.degrees(math.atan2(bz, h)) if f > 0.0 else math.nan
    decl = math.degrees(math.atan2(by, bx)) if h > 0.0 else math.nan
    return MagneticVector(bx, by, bz, f, h, incl, decl)


@dataclass(frozen=True)
class DipoleParams:
    """Tilted geocentric dipole.

    ``b0_nt`` is the field magnitude on the magnetic equator at ``radius_km``;
    the north geomagnetic pole sits ``tilt_deg`` away from the geographic pole
    at longitude ``pole_lon_deg``.
    """

    b0_nt: float = 30_000.0
    tilt_deg: float = 11.0
    pole_lon_deg: float = -72.68
    radius_km: float = 6371.2

    def __post_init__(self):
        vals = (self.b0_nt, self.tilt_deg, self.pole_lon_deg, self.radius_km)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("dipole parameters must be finite")
        if self.b0_nt <= 0.0 or self.radius_km <= 0.0:
            raise ValueError("dipole moment and reference radius must be positive")

    @property
    def moment_axis(self) -> np.ndarray:
        # the dipole moment points at the southern geomagnetic pole
        colat = math.radians(self.tilt_deg)
        plon = math.radians(self.pole_lon_deg)
        return -np.array([
            math.sin(colat) * math.cos(plon),
            math.sin(colat) * math.sin(plon),
            math.cos(colat),
        ])


def dipole_components(lat_deg, lon_deg, params: DipoleParams, radius_km: Optional[float] = None):
    """North, east, down components in nT; vectorised over lat/lon arrays."""
    lat = np.radians(np.asarray(lat_deg, dtype=float))
    lon = np.radians(np.asarray(lon_deg, dtype=float))
    r_km = params.radius_km if radius_km is None else radius_km
    clat, slat = np.cos(lat), np.sin(lat)
    clon, slon = np.cos(lon), np.sin(lon)
    rhat = np.stack([clat * clon, clat * slon, slat])
    north = np.stack([-slat * clon, -slat * slon, clat])
    east = np.stack([-slon, clon, np.zeros_like(lat)])
    m = params.moment_axis.reshape((3,) + (1,) * lat.ndim)
    mr = np.sum(m * rhat, axis=0)
    scale = params.b0_nt * (params.radius_km / r_km) ** 3
    b = scale * (3.0 * mr * rhat - m)
    return np.sum(b * north, axis=0), np.sum(b * east, axis=0), -np.sum(b * rhat, axis=0)


def dipole_field(p: GeoPosition, params: DipoleParams) -> MagneticVector:
    bx, by, bz = dipole_components(p.lat_deg, p.lon_deg, params)
    return derive_elements(float(bx), float(by), float(bz))


def peaks_anomaly(u, v):
    """Multimodal anomaly intensity on the canonical [-3, 3]^2 square."""
    return (
        3.0 * (1.0 - u) ** 2 * np.exp(-u**2 - (v + 1.0) ** 2)
        - 10.0 * (u / 5.0 - u**3 - v**5) * np.exp(-u**2 - v**2)
        - np.exp(-(u + 1.0) ** 2 - v**2) / 3.0
    )


def _edge_taper(t, width: float):
    """1 inside [width, 1-width], cosine ramp to 0 at the edges, 0 outside [0, 1]."""
    t = np.asarray(t, dtype=float)
    d = np.minimum(t, 1.0 - t)
    ramp = 0.5 * (1.0 - np.cos(np.pi * np.clip(d, 0.0, width) / width))
    return np.where(d <= 0.0, 0.0, np.where(d >= width, 1.0, ramp))


@dataclass(frozen=True)
class AnomalyPatch:
    """Box in which the peaks surface is added to B_X, B_Y, B_Z.

    Latitude maps onto the first peaks coordinate, longitude onto the second.
    """

    lat_range_deg: tuple[float, float]
    lon_range_deg: tuple[float, float]
    scale_x: float = 600.0
    scale_y: float = 400.0
    scale_z: float = 200.0
    taper: float = 0.05

    def __post_init__(self):
        (a0, a1), (o0, o1) = self.lat_range_deg, self.lon_range_deg
        if not (a1 > a0 and o1 > o0):
            raise ValueError("anomaly box must be non-degenerate")
        if not all(math.isfinite(s) for s in (self.scale_x, self.scale_y, self.scale_z)):
            raise ValueError("anomaly scales must be finite")
        if not 0.0 < self.taper < 0.5:
            raise ValueError("taper width must lie in (0, 0.5)")

    def unit_coords(self, lat_deg, lon_deg):
        (a0, a1), (o0, o1) = self.lat_range_deg, self.lon_range_deg
        return (np.asarray(lat_deg, float) - a0) / (a1 - a0), (np.asarray(lon_deg, float) - o0) / (o1 - o0)

    def intensity(self, lat_deg, lon_deg):
        """Tapered peaks value (dimensionless); zero outside the box."""
        s, t = self.unit_coords(lat_deg, lon_deg)
        w = _edge_taper(s, self.taper) * _edge_taper(t, self.taper)
        return w * peaks_anomaly(6.0 * s - 3.0, 6.0 * t - 3.0)

    def components(self, lat_deg, lon_deg):
        p = self.intensity(lat_deg, lon_deg)
        return self.scale_x * p, self.scale_y * p, self.scale_z * p


@dataclass(frozen=True)
class FieldGrid:
    """Regular lat/lon grid of sampled field components (row = latitude)."""

    lat0_deg: float
    lon0_deg: float
    dlat_deg: float
    dlon_deg: float
    bx: np.ndarray
    by: np.ndarray
    bz: np.ndarray

    def __post_init__(self):
        if self.dlat_deg <= 0.0 or self.dlon_deg <= 0.0:
            raise ValueError("grid spacing must be positive")
        shape = np.shape(self.bx)
        if len(shape) != 2 or shape[0] < 2 or shape[1] < 2:
            raise ValueError("grid needs at least 2x2 samples")
        if np.shape(self.by) != shape or np.shape(self.bz) != shape:
            raise ValueError("component arrays must share one rectangular shape")
        for name in ("bx", "by", "bz"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                r, c = np.argwhere(~np.isfinite(arr))[0]
                raise ValueError(f"non-finite {name} sample at row {r}, column {c}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(np.shape(self.bx))

    @property
    def origin(self) -> GeoPosition:
        return GeoPosition(self.lat0_deg, self.lon0_deg)

    @property
    def lat_max(self) -> float:
        return self.lat0_deg + (self.shape[0] - 1) * self.dlat_deg

    @property
    def lon_max(self) -> float:
        return self.lon0_deg + (self.shape[1] - 1) * self.dlon_deg

    def sample(self, row: int, col: int) -> MagneticVector:
        return derive_elements(self.bx[row, col], self.by[row, col], self.bz[row, col])

    def _locate(self, value: float, start: float, step: float, n: int, label: str):
        t = (value - start) / step
        nearest = round(t)
        if abs(t - nearest) < 1e-9:
            t = float(nearest)
        if t < 0.0 or t > n - 1:
            lo, hi = start, start + (n - 1) * step
            raise FieldDomainError(f"{label}={value} outside grid range [{lo}, {hi}]")
        i = min(int(math.floor(t)), n - 2)
        return i, t - i

    def components(self, lat_deg: float, lon_deg: float) -> tuple[float, float, float]:
        nlat, nlon = self.shape
        i, s = self._locate(lat_deg, self.lat0_deg, self.dlat_deg, nlat, "latitude")
        j, t = self._locate(lon_deg, self.lon0_deg, self.dlon_deg, nlon, "longitude")
        w00, w01, w10, w11 = (1 - s) * (1 - t), (1 - s) * t, s * (1 - t), s * t
        out = []
        for arr in (self.bx, self.by, self.bz):
            out.append(
                w00 * arr[i, j] + w01 * arr[i, j + 1] + w10 * arr[i + 1, j] + w11 * arr[i + 1, j + 1]
            )
        return float(out[0]), float(out[1]), float(out[2])


@dataclass(frozen=True)
class World:
    """Immutable description of the field a mission flies through."""

    dipole: Optional[DipoleParams] = field(default_factory=DipoleParams)
    grid: Optional[FieldGrid] = None
    patches: tuple[AnomalyPatch, ...] = ()

    def __post_init__(self):
        if (self.dipole is None) == (self.grid is None):
            raise ValueError("world needs exactly one base field: a dipole or a grid")
        object.__setattr__(self, "patches", tuple(self.patches))

    def without_anomalies(self) -> World:
        return World(dipole=self.dipole, grid=self.grid, patches=())

    def base_components(self, lat_deg: float, lon_deg: float) -> tuple[float, float, float]:
        if self.grid is not None:
            return self.grid.components(lat_deg, lon_deg)
        bx, by, bz = dipole_components(lat_deg, lon_deg, self.dipole)
        return float(bx), float(by), float(bz)

    def anomaly_components(self, lat_deg: float, lon_deg: float) -> tuple[float, float, float]:
        ax = ay = az = 0.0
        for patch in self.patches:
            px, py, pz = patch.components(lat_deg, lon_deg)
            ax += float(px)
            ay += float(py)
            az += float(pz)
        return ax, ay, az

    def field_at(self, p: GeoPosition) -> MagneticVector:
        return field_at(p, self)


def field_at(p: GeoPosition, world: World) -> MagneticVector:
    bx, by, bz = world.base_components(p.lat_deg, p.lon_deg)
    if world.patches:
        ax, ay, az = world.anomaly_components(p.lat_deg, p.lon_deg)
        bx, by, bz = bx + ax, by + ay, bz + az
    return derive_elements(bx, by, bz)


GRID_MAGIC = "MAGGRID"
GRID_VERSION = "v1"


def load_grid(source: Union[str, Path]) -> FieldGrid:
    """Parse a ``MAGGRID v1`` text file (header, then ``bx by bz`` per node)."""
    lines = Path(source).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise GridFormatError("line 1: empty grid file")
    head = lines[0].split()
    if len(head) != 8 or head[0] != GRID_MAGIC or head[1] != GRID_VERSION:
        raise GridFormatError(f"line 1: malformed header {lines[0]!r}")
    try:
        nlat, nlon = int(head[2]), int(head[3])
        lat0, lon0, dlat, dlon = (float(v) for v in head[4:8])
    except ValueError as exc:
        raise GridFormatError(f"line 1: malformed header values ({exc})") from None
    if nlat < 2 or nlon < 2:
        raise GridFormatError("line 1: grid must be at least 2x2")
    if not (dlat > 0.0 and dlon > 0.0):
        raise GridFormatError("line 1: grid spacing must be positive")
    body = [(n, ln) for n, ln in enumerate(lines[1:], start=2) if ln.strip()]
    if len(body) != nlat * nlon:
        raise GridFormatError(
            f"line {len(lines)}: expected {nlat * nlon} samples for a {nlat}x{nlon} grid, got {len(body)}"
        )
    data = np.empty((nlat * nlon, 3))
    for idx, (lineno, text) in enumerate(body):
        parts = text.split()
        row, col = divmod(idx, nlon)
        if len(parts) != 3:
            raise GridFormatError(f"line {lineno}: row {row}, column {col}: expected 3 values")
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise GridFormatError(f"line {lineno}: row {row}, column {col}: unparsable value") from None
        if not all(math.isfinite(v) for v in vals):
            raise GridFormatError(f"line {lineno}: row {row}, column {col}: non-finite value")
        data[idx] = vals
    data = data.reshape(nlat, nlon, 3)
    return FieldGrid(lat0, lon0, dlat, dlon, data[..., 0].copy(), data[..., 1].copy(), data[..., 2].copy())


def save_grid(grid: FieldGrid, path: Union[str, Path]) -> None:
    nlat, nlon = grid.shape
    out = [f"{GRID_MAGIC} {GRID_VERSION} {nlat} {nlon} {grid.lat0_deg!r} {grid.lon0_deg!r} "
           f"{grid.dlat_deg!r} {grid.dlon_deg!r}"]
    for i in range(nlat):
        for j in range(nlon):
            out.append(f"{float(grid.bx[i, j])!r} {float(grid.by[i, j])!r} {float(grid.bz[i, j])!r}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def sample_grid(world: World, lat_edges: Sequence[float], lon_edges: Sequence[float]) -> FieldGrid:
    """Tabulate a world's components on a regular grid (exports for replay)."""
    lats = np.asarray(lat_edges, float)
    lons = np.asarray(lon_edges, float)
    comps = np.empty((len(lats), len(lons), 3))
    for i, la in enumerate(lats):
        for j, lo in enumerate(lons):
            bx, by, bz = world.base_components(la, lo)
            ax, ay, az = world.anomaly_components(la, lo)
            comps[i, j] = (bx + ax, by + ay, bz + az)
    return FieldGrid(float(lats[0]), float(lons[0]), float(lats[1] - lats[0]), float(lons[1] - lons[0]),
                     comps[..., 0], comps[..., 1], comps[..., 2])
