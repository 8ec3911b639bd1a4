from __future__ import annotations

import numpy as np
import pytest

from geomagnav import talstm
from geomagnav.cli import main

MODEL_SEED = 0

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])


@pytest.fixture(scope="session")
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    store = request.config.stash[_VERDICTS]

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        store[n] = line
        print(line)
        return ok

    return record


@pytest.fixture(scope="session")
def model_path(tmp_path_factory):
    """Model trained through the CLI with the bundled training scenario."""
    out = tmp_path_factory.mktemp("trained")
    assert main(["train", "--out", str(out), "--seed", str(MODEL_SEED)]) == 0
    return out / "model.talstm"


@pytest.fixture(scope="session")
def trained_model(model_path):
    return talstm.load_model(model_path, expected_T=20)


def synthetic_windows(n_episodes: int = 4, windows_per_episode: int = 5, T: int = 20, seed: int = 0,
                      constant_heading=None) -> list:
    """Smooth trajectories through a linear D/I field, cut into windows.

    Each window's next_targets are the following window's headings, so the
    last window of an episode only serves as context.
    """
    rng = np.random.default_rng(seed)
    out = []
    for ep in range(n_episodes):
        n = windows_per_episode + 1
        t = np.arange(n * T)
        if constant_heading is None:
            base = rng.uniform(-150.0, 150.0)
            theta = base + 25.0 * np.sin(t / (7.0 + ep)) + 0.2 * t
        else:
            theta = np.full(t.shape, float(constant_heading))
        x = np.cumsum(5000.0 * np.cos(np.radians(theta))) + rng.normal(0, 5e4)
        y = np.cumsum(5000.0 * np.sin(np.radians(theta))) + rng.normal(0, 5e4)
        d = 2e-5 * x - 1e-5 * y
        i = 1e-5 * x + 3e-5 * y
        feats = np.stack([x, y, d, i], axis=1)
        theta = (theta + 180.0) % 360.0 - 180.0
        for w in range(windows_per_episode):
            sl = slice(w * T, (w + 1) * T)
            nxt = slice((w + 1) * T, (w + 2) * T)
            out.append(talstm.WindowSeries(feats[sl], theta[sl], index=w + 1, episode=ep,
                                           next_targets=theta[nxt]))
    return out


def rel_err(a, b) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)

