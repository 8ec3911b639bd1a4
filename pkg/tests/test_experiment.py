import math
from dataclasses import replace

import numpy as np
import pytest

from geomagnav import talstm
from geomagnav.config import load_scenario
from geomagnav.experiment import (
    CONVERGENCE_COLUMNS,
    SUITE_COLUMNS,
    aggregate,
    export_convergence,
    export_suite,
    export_trajectory,
    generate_training_windows,
    jitter_origin,
    mission_windows,
    random_route,
    read_csv,
    run_scenario,
    run_scenario_suite,
    straight_line_km,
    train_from_scenario,
)
from geomagnav.field import GeoPosition
from geomagnav.metrics import TRAJECTORY_COLUMNS, compute_metrics


def _small_training(name="train", trajectories=6, epochs=3):
    s = load_scenario(name)
    t = replace(s.training, trajectories=trajectories, train=replace(s.training.train, epochs=epochs))
    return replace(s, training=t)


@pytest.fixture(scope="module")
def small_model():
    return train_from_scenario(_small_training(), seed=3)


@pytest.fixture(scope="module")
def clean_run():
    return run_scenario(load_scenario("anomaly_free"))


def test_convergence_export(tmp_path, clean_run):
    export_convergence(clean_run, tmp_path / "c.csv", tmp_path / "c.svg")
    tab = read_csv(tmp_path / "c.csv")
    assert list(tab) == list(CONVERGENCE_COLUMNS)
    assert len(tab["step"]) == clean_run.steps + 1
    assert tab["F_total"][0] == 1.0
    assert tab["F_total"][-1] <= 0.02
    svg = (tmp_path / "c.svg").read_text()
    assert svg.startswith("<?xml") and all(lab in svg for lab in ("B_X", "B_Y", "B_Z"))


def test_convergence_png(tmp_path, clean_run):
    export_convergence(clean_run, tmp_path / "c.csv", tmp_path / "c.png")
    assert (tmp_path / "c.png").read_bytes()[:4] == b"\x89PNG"


def test_metrics_recomputed_from_exported_trajectory(tmp_path, clean_run):
    export_trajectory(clean_run, tmp_path / "t.csv")
    tab = read_csv(tmp_path / "t.csv")
    assert list(tab) == list(TRAJECTORY_COLUMNS)
    m = compute_metrics(tab, clean_run.waypoints)
    ref = clean_run.metrics
    for name in ("travelled_km", "heading_variance", "heading_variance_unbiased", "deviation"):
        assert getattr(m, name) == pytest.approx(getattr(ref, name), abs=1e-9, rel=1e-9)
    assert m.steps == ref.steps


def test_mission_windows_shapes(clean_run):
    s = load_scenario("anomaly_free")
    ws = mission_windows(clean_run, s.world, 20)
    assert len(ws) == clean_run.steps // 20
    assert all(w.inputs.shape == (20, 4) for w in ws)
    # unperturbed flight: labels equal the headings flown in the next window
    for a, b in zip(ws[:-1], ws[1:]):
        np.testing.assert_array_equal(a.next_targets, b.targets)
    assert ws[-1].next_targets is None


def test_random_route_spacing():
    rng = np.random.default_rng(0)
    route = random_route(rng, (19, 24), (132, 137), 3, 150.0)
    assert len(route) == 4
    km = straight_line_km([GeoPosition(*p) for p in route])
    assert km >= 3 * 150.0 * 0.99
    with pytest.raises(ValueError):
        random_route(rng, (20, 20.1), (130, 130.1), 1, 150.0, tries=20)


def test_training_windows_deterministic():
    s = _small_training(trajectories=3)
    a = generate_training_windows(s, seed=5)
    b = generate_training_windows(s, seed=5)
    assert len(a) == len(b) > 0
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.inputs, y.inputs)
        np.testing.assert_array_equal(x.targets, y.targets)


def test_small_model_has_reference(small_model):
    assert small_model.trained
    assert small_model.reference_samples is not None and small_model.reference_samples.size >= 2


def test_talstm_and_calibrated_policies_run(small_model):
    s = load_scenario("anomaly_free")
    for kind in ("talstm", "calibrated"):
        r = run_scenario(replace(s, policy=replace(s.policy, kind=kind),
                                 mission=replace(s.mission, max_steps=60)), small_model)
        assert r.outcome in ("success", "budget-exhausted")
        # first window of a leg is always flown on analytic headings
        np.testing.assert_array_equal(r.table["theta_cmd"][1:21], r.table["theta_analytic"][1:21])
        if kind == "talstm":
            assert math.isnan(r.metrics.mean_eta)


def test_jitter_origin_within_radius():
    rng = np.random.default_rng(1)
    o = GeoPosition(22.6, 132.9)
    assert jitter_origin(o, 0.0, rng) is o
    for _ in range(50):
        p = jitter_origin(o, 5.0, rng)
        assert straight_line_km([o, p]) <= 5.0 * 1.001


def test_suite_single_repetition_matches_single_run():
    s = load_scenario("anomaly_free")
    report = run_scenario_suite(s, repetitions=1, seed=0)
    single = run_scenario(s)
    row = report.rows()[0]
    m = single.metrics
    assert row[1:] == (single.outcome, m.steps, m.travelled_km, m.heading_variance,
                       m.heading_variance_unbiased, m.deviation, m.mean_eta)
    assert report.aggregate["steps_mean"] == m.steps and report.aggregate["steps_var"] == 0.0


def test_suite_is_deterministic_and_order_independent(tmp_path):
    s = load_scenario("anomaly_free")
    s = replace(s, suite=replace(s.suite, origin_jitter_km=10.0))
    a = run_scenario_suite(s, repetitions=3, seed=42)
    b = run_scenario_suite(s, repetitions=3, seed=42, workers=2)
    assert a.rows() == b.rows() and a.aggregate == b.aggregate
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    pa = export_suite(a, tmp_path / "a")
    pb = export_suite(b, tmp_path / "b")
    for x, y in zip(pa, pb):
        assert x.read_bytes() == y.read_bytes()
    runs = read_csv(pa[0])
    assert list(runs) == list(SUITE_COLUMNS) and len(runs["run_id"]) == 3
    # jittered origins give distinct runs
    assert len(set(runs["travelled_km"])) == 3


def test_aggregate_counts():
    rows = [(0, "success", 10, 1.0, 0.0, 0.0, 0.1, 1.0), (1, "budget-exhausted", 20, 3.0, 0.0, 0.0, 0.3, 1.0)]
    agg = aggregate(rows)
    assert agg["n_success"] == 1 and agg["n_budget-exhausted"] == 1 and agg["runs"] == 2
    assert agg["steps_mean"] == 15.0 and agg["steps_var"] == 25.0


def test_suite_rejects_zero_repetitions():
    with pytest.raises(ValueError):
        run_scenario_suite(load_scenario("anomaly_free"), repetitions=0)


def test_straight_line_km_known_distance():
    # one degree of latitude on the mean sphere
    assert straight_line_km([GeoPosition(0, 0), GeoPosition(1, 0)]) == pytest.approx(111.195, abs=1e-3)


def test_model_save_keeps_reference(tmp_path, small_model):
    talstm.save_model(small_model, tmp_path / "m")
    back = talstm.load_model(tmp_path / "m")
    np.testing.assert_array_equal(back.reference_samples, small_model.reference_samples)


def test_anomaly_suite_calibrated_beats_analytic(trained_model):
    s = load_scenario("anomaly")
    s = replace(s, suite=replace(s.suite, origin_jitter_km=5.0))
    cal = run_scenario_suite(replace(s, policy=replace(s.policy, kind="calibrated")), 10, seed=1,
                             model=trained_model)
    ana = run_scenario_suite(replace(s, policy=replace(s.policy, kind="analytic")), 10, seed=1)
    assert cal.aggregate["deviation_mean"] < ana.aggregate["deviation_mean"]
    assert cal.aggregate["travelled_km_mean"] < ana.aggregate["travelled_km_mean"]
