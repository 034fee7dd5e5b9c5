import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mprbfn.models import AnalyticGenerator
from mprbfn.ocp import TimeGrid
from mprbfn.planner import (
    LOG_COLUMNS,
    CostWeights,
    Obstacle,
    PlannerError,
    SamplingSpec,
    Scenario,
    ScenarioError,
    anchor,
    emergency_trajectory,
    evaluate_cost,
    export_log_csv,
    export_trace_svg,
    load_scenario,
    plan_step,
    rect_clearance,
    rectangle,
    run_receding_horizon,
    sample_endpoints,
    save_scenario,
    symmetrized,
    to_local,
    to_world,
)
from mprbfn.vehicle import State, VehicleParams

G = TimeGrid()
finite = dict(allow_nan=False, allow_infinity=False)


def straight(v, y=0.0, x0=0.0):
    t = np.zeros((31, 5))
    t[:, 0] = x0 + v * G.times
    t[:, 1] = y
    t[:, 2] = v
    return t


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario(desired_speed_m_s=40.0)
    with pytest.raises(ValueError):
        Scenario(n_lanes=0)
    with pytest.raises(ValueError):
        CostWeights(velocity=-1.0)
    s = Scenario(n_lanes=-2)
    np.testing.assert_allclose(s.lane_centres(), [0, -3.5])
    assert s.road_bounds() == (-5.25, 1.75)


def test_scenario_round_trip(tmp_path):
    s = Scenario(obstacles=(Obstacle(30, 0, speed_m_s=10),), sampling=SamplingSpec(offsets_m=(0.0, 3.5)),
                 weights=CostWeights(offset=0.5))
    path = tmp_path / "s.json"
    save_scenario(s, path)
    assert load_scenario(path) == s


def test_scenario_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "n_lanes": 2,\n  "lane_width_m": ,\n}\n')
    with pytest.raises(ScenarioError, match="line 3"):
        load_scenario(bad)
    bad.write_text('{"unknown_key": 1}')
    with pytest.raises(ScenarioError):
        load_scenario(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ScenarioError, match="JSON object"):
        load_scenario(bad)


def test_to_world_examples():
    t = np.random.default_rng(0).normal(size=(31, 5))
    np.testing.assert_array_equal(to_world(t, (0.0, 0.0, 0.0)), t)
    p = to_world(np.array([[1.0, 0, 3.0, 0.1, 0.2]]), (5.0, 2.0, math.pi / 2))
    np.testing.assert_allclose(p[0], [5.0, 3.0, 3.0, 0.1, 0.2 + math.pi / 2], atol=1e-12)


@settings(max_examples=50)
@given(st.floats(-50, 50, **finite), st.floats(-50, 50, **finite), st.floats(-3, 3, **finite),
       st.floats(-30, 30, **finite), st.floats(-30, 30, **finite))
def test_frame_round_trip_and_mirror(x0, y0, th, px, py):
    pose = (x0, y0, th)
    local = np.array([[px, py, 1.0, 0.0, 0.3]])
    w = to_world(local, pose)
    np.testing.assert_allclose(to_local(w[:, :2], pose), local[:, :2], atol=1e-9)
    mirrored_local = local * [1, -1, 1, -1, -1]
    m = to_world(mirrored_local, (x0, -y0, -th))
    np.testing.assert_allclose(m, w * [1, -1, 1, -1, -1], atol=1e-9)


def test_sample_endpoints_on_reference():
    s = Scenario(sampling=SamplingSpec((-3.5, 0.0, 3.5), (40.0, 55.0, 70.0), (0.0,)), n_lanes=3)
    q, w = sample_endpoints(State(speed_m_s=20.0), s)
    assert q.shape == (9, 5)
    np.testing.assert_allclose(q[:, 2:4], w[:, :2])
    np.testing.assert_allclose(q[:, 3], np.repeat([-3.5, 0, 3.5], 3))
    assert np.all(q[:, 0] == 20.0)


def test_sample_endpoints_offset_ego_and_range():
    s = Scenario(sampling=SamplingSpec((0.0, 3.5), (40.0, 90.0), (0.0,)))
    ego = State(x_m=10.0, y_m=1.0, speed_m_s=10.0)
    q, w = sample_endpoints(ego, s)
    # 90 m is beyond r_max(10 m/s) = 68.3 m
    assert len(q) == 2
    np.testing.assert_allclose(q[:, 3], [-1.0, 2.5])
    np.testing.assert_allclose(w[:, 0], [50.0, 50.0])
    with pytest.raises(PlannerError):
        sample_endpoints(ego, replace(s, sampling=SamplingSpec((0.0,), (200.0,), (0.0,))))


def test_rect_clearance():
    a = rectangle(0, 0, 0, 4, 2)
    assert rect_clearance(a, rectangle(10, 0, 0, 4, 2)) == pytest.approx(6.0)
    assert rect_clearance(a, rectangle(0, 5, 0, 4, 2)) == pytest.approx(3.0)
    assert rect_clearance(a, rectangle(5, 4, 0, 4, 2)) == pytest.approx(math.hypot(1, 2))
    assert rect_clearance(a, rectangle(3, 0, 0, 4, 2)) == pytest.approx(-1.0)
    assert rect_clearance(a, rectangle(0, 0, 0.7, 4, 2)) < 0


def test_cost_zero_on_reference():
    s = Scenario()
    c = evaluate_cost(straight(20.0), s)
    assert c.total == 0.0 and not c.rejected


def test_cost_linear_in_offset_weight():
    s = Scenario(desired_speed_m_s=15.0, obstacles=(Obstacle(80, 3.5),))
    tr = straight(20.0, y=1.0)
    a = evaluate_cost(tr, s)
    b = evaluate_cost(tr, s, weights=replace(s.weights, offset=2 * s.weights.offset))
    assert b.offset == a.offset
    assert b.total - a.total == pytest.approx(s.weights.offset * a.offset)


def test_cost_rejects_collision_and_violation():
    s = Scenario(obstacles=(Obstacle(30, 0, speed_m_s=10),))
    hit = evaluate_cost(straight(20.0), s)
    assert hit.rejected and hit.reason == "collision" and hit.min_clearance <= 0
    free = evaluate_cost(straight(20.0, y=3.5), s)
    assert not free.rejected and free.min_clearance > 0
    jumpy = straight(20.0)
    jumpy[10:, 2] = 25.0
    assert evaluate_cost(jumpy, Scenario()).reason == "constraint"
    assert evaluate_cost(straight(20.0, y=8.0), Scenario()).reason == "off-road"
    assert evaluate_cost(np.zeros((5, 5)), Scenario()).reason == "malformed"


def test_anchor_fades_initial_error():
    tr = straight(20.0)
    start = np.array([0.0, 0.5, 20.0, 0.0, 0.0])
    out = anchor(tr, start, G)
    np.testing.assert_allclose(out[0], start)
    np.testing.assert_array_equal(out[-1], tr[-1])


def test_emergency_trajectory_stops():
    e = emergency_trajectory(State(x_m=5.0, speed_m_s=5.0), VehicleParams(), G)
    assert e[0, 0] == 5.0 and e[-1, 2] == 0.0
    assert np.all(np.diff(e[:, 0]) >= 0) and np.all(e[:, 1] == 0)


class Fixed:
    """Generator returning a given local trajectory per query row."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, q):
        return np.stack([self.fn(row) for row in q])


def endpoint_line(row):
    v0, _, xf, yf, _ = row
    t = np.zeros((31, 5))
    s = G.times / G.horizon_s
    t[:, 0] = v0 * G.times
    t[:, 1] = yf * (10 * s**3 - 15 * s**4 + 6 * s**5)
    t[:, 2] = v0
    return t


def test_plan_step_free_road_keeps_lane():
    s = Scenario(sampling=SamplingSpec((-3.5, 0.0, 3.5), (60.0,), (0.0,)), n_lanes=3)
    res = plan_step(State(speed_m_s=20.0), s, Fixed(endpoint_line))
    assert not res.emergency
    assert res.queries[res.chosen, 3] == 0.0


def test_plan_step_changes_lane_behind_slow_obstacle():
    s = Scenario(obstacles=(Obstacle(25, 0, speed_m_s=10),), sampling=SamplingSpec((0.0, 3.5), (60.0,), (0.0,)))
    res = plan_step(State(speed_m_s=20.0), s, AnalyticGenerator())
    assert res.costs[0].rejected
    assert res.queries[res.chosen, 3] == 3.5


def test_plan_step_tie_break_and_emergency():
    s = Scenario(sampling=SamplingSpec((0.0,), (60.0, 60.0), (0.0,)))
    res = plan_step(State(speed_m_s=20.0), s, Fixed(endpoint_line))
    assert res.chosen == 0 and res.costs[0].total == res.costs[1].total
    res = plan_step(State(speed_m_s=20.0), s, lambda q: np.zeros((0, 31, 5)))
    assert res.emergency and res.chosen == -1


def test_degenerate_generator_logs_emergency_every_step():
    log = run_receding_horizon(Scenario(), lambda q: np.zeros((len(q), 0, 5)), n_steps=5)
    assert log.emergency == [True] * 5


def test_empty_road_stays_on_reference():
    log = run_receding_horizon(Scenario(), AnalyticGenerator(), n_steps=60)
    ego = log.ego_array()
    assert np.max(np.abs(ego[:, 1])) <= 0.1
    assert not log.any_emergency
    assert log.times[-1] == pytest.approx(6.0)


def test_closed_loop_limits_determinism_and_mirror(tmp_path):
    s = Scenario(ego=State(y_m=0.3, speed_m_s=15.0), desired_speed_m_s=18.0,
                 sampling=SamplingSpec((0.0, 3.5), (40.0, 50.0, 60.0), (0.0,)))
    a = run_receding_horizon(s, AnalyticGenerator(), n_steps=20)
    b = run_receding_horizon(s, AnalyticGenerator(), n_steps=20)
    np.testing.assert_array_equal(a.ego_array(), b.ego_array())
    ego = a.ego_array()
    p = s.params
    assert np.all(ego[:, 3] <= p.max_speed_m_s)
    abar = np.where(ego[:, 3] > p.switching_speed_m_s, p.max_long_accel_m_s2 * p.switching_speed_m_s / ego[:, 3],
                    p.max_long_accel_m_s2)
    gg = (ego[:, 4] / abar) ** 2 + (ego[:, 3] ** 2 * np.tan(ego[:, 2]) / (p.wheelbase_m * p.max_lat_accel_m_s2)) ** 2
    assert np.all(gg <= 1 + 1e-3)
    m = run_receding_horizon(s.mirrored(), AnalyticGenerator(), n_steps=20).ego_array()
    np.testing.assert_allclose(m, ego * [1, -1, -1, 1, 1, -1], atol=1e-9)

    export_log_csv(a, tmp_path / "log.csv")
    rows = (tmp_path / "log.csv").read_text().splitlines()
    assert rows[0].split(",") == list(LOG_COLUMNS)
    assert len(rows) == 1 + sum(len(c) for c in a.candidate_costs)
    export_trace_svg(a, s, tmp_path / "trace.svg")
    assert (tmp_path / "trace.svg").read_text().startswith("<svg")


class Biased:
    """Analytic primitives with a left-leaning drift, as a trained network might have."""

    def __init__(self):
        self.base = AnalyticGenerator()

    def __call__(self, q):
        out = self.base(q)
        s = TimeGrid().times / 3.0
        out[..., 1] += 0.05 * s
        out[..., 4] += 0.004 * s
        return out


def test_symmetrized_cancels_odd_error():
    q = np.array([[20.0, 0.0, 60.0, 0.0, 0.0], [20.0, 0.01, 60.0, 2.0, 0.1]])
    out = symmetrized(Biased(), q)
    np.testing.assert_array_equal(out[0, :, [1, 3, 4]], 0.0)
    np.testing.assert_allclose(out[1], AnalyticGenerator()(q)[1:][0], atol=1e-12)
    with pytest.raises(ValueError):
        symmetrized(lambda q: np.zeros((len(q), 31, 4)), q)


def test_symmetrized_planner_holds_lane_and_mirrors_exactly():
    s = Scenario(sampling=SamplingSpec((0.0, 3.5), (40.0, 60.0), (0.0,)))
    drift = run_receding_horizon(s, Biased(), n_steps=30, symmetrize=False).ego_array()
    held = run_receding_horizon(s, Biased(), n_steps=30).ego_array()
    assert np.abs(drift[:, 1]).max() > 0.05
    np.testing.assert_array_equal(held[:, [1, 2, 5]], 0.0)

    s = replace(s, ego=State(y_m=0.4, speed_m_s=18.0, yaw_rad=0.02))
    a = run_receding_horizon(s, Biased(), n_steps=20).ego_array()
    m = run_receding_horizon(s.mirrored(), Biased(), n_steps=20).ego_array()
    np.testing.assert_array_equal(m, a * [1, -1, -1, 1, 1, -1])


def test_run_validation():
    with pytest.raises(ValueError):
        run_receding_horizon(Scenario(), AnalyticGenerator(), n_steps=0)
    with pytest.raises(ValueError):
        run_receding_horizon(Scenario(), AnalyticGenerator(), dt=0.0)
