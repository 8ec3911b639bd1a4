"""Geomagnetic dead-reckoning navigation with anomaly-resistant heading prediction."""

from geomagnav.field import (
    AnomalyPatch,
    DipoleParams,
    FieldGrid,
    GeoPosition,
    MagneticVector,
    World,
    derive_elements,
    dipole_field,
    field_at,
    load_grid,
    peaks_anomaly,
)
from geomagnav.projection import LocalProjection

__version__ = "0.1.0"

__all__ = [
    "AnomalyPatch",
    "DipoleParams",
    "FieldGrid",
    "GeoPosition",
    "LocalProjection",
    "MagneticVector",
    "World",
    "derive_elements",
    "dipole_field",
    "field_at",
    "load_grid",
    "peaks_anomaly",
]
