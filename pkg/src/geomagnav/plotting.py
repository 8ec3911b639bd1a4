"""Static charts for mission results (SVG or PNG, picked from the suffix)."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from geomagnav.metrics import MissionResult  # noqa: E402

_SERIES = (("F_bx", "B_X"), ("F_by", "B_Y"), ("F_bz", "B_Z"), ("F_d", "D"), ("F_i", "I"))


def _save(fig, path: Union[str, Path]) -> None:
    path = Path(path)
    # fixed hash salt and no date keep SVG output byte-stable between runs
    with plt.rc_context({"svg.hashsalt": "geomagnav"}):
        fig.savefig(path, format=path.suffix.lstrip(".") or "svg",
                    metadata={"Date": None} if path.suffix.lower() in (".svg", "") else None)
    plt.close(fig)


def plot_convergence(result: MissionResult, path: Union[str, Path]) -> None:
    """One line per objective element plus the total, against step."""
    tab = result.table
    steps = np.asarray(tab["step"])
    fig, ax = plt.subplots(figsize=(7, 4))
    for col, label in _SERIES:
        ax.plot(steps, tab[col], lw=1.0, label=label)
    ax.plot(steps, tab["F_total"], "k-", lw=2.0, label="F")
    ax.set_xlabel("step")
    ax.set_ylabel("normalised objective")
    ax.set_title(f"{result.policy}: {result.outcome}")
    ax.grid(alpha=0.3)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_trajectory(result: MissionResult, path: Union[str, Path]) -> None:
    """Ground track in latitude/longitude with the waypoints marked."""
    tab = result.table
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(tab["lon"], tab["lat"], "-", lw=1.2, label="track")
    wp = result.waypoints
    ax.plot([p.lon_deg for p in wp[:1]], [p.lat_deg for p in wp[:1]], "go", label="origin")
    ax.plot([p.lon_deg for p in wp[1:]], [p.lat_deg for p in wp[1:]], "r^", label="destination")
    ax.set_xlabel("longitude (deg)")
    ax.set_ylabel("latitude (deg)")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_loss(train_loss, val_loss, path: Union[str, Path]) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = np.arange(1, len(train_loss) + 1)
    ax.plot(epochs, train_loss, label="train")
    if val_loss is not None:
        ax.plot(epochs, val_loss, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("wrapped loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
