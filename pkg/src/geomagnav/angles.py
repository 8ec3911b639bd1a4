"""Angle helpers; headings are degrees, measured from north toward east."""

from __future__ import annotations

import numpy as np


def wrap_deg(a):
    """Map angles to (-180, 180]."""
    w = np.mod(np.asarray(a, dtype=float) + 180.0, 360.0) - 180.0
    w = np.where(w == -180.0, 180.0, w)
    return float(w) if np.ndim(w) == 0 else w


def angle_diff(a, b):
    """Smallest signed difference a - b, in (-180, 180]."""
    return wrap_deg(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
