import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microcal.errors import ParseError, ValidationError
from microcal.sensing import (
    MeasurementGrid, aggregate, detect, ingest_measurements, interval_edges, measurements_to_csv,
    parse_measurements, simulate_detectors,
)
from microcal.scenario import DetectorSpec

from conftest import cruise_log

D100 = DetectorSpec("d", 100.0, lanes=(0,), window=50.0)


def one_window(vehicles, spec=D100, horizon=50.0):
    return simulate_detectors(cruise_log(vehicles, horizon), [spec], horizon, domain=(0.0, 2000.0))


def test_single_crossing():
    g = one_window([(0, 0.0, 10.0, 0)])
    assert g.flow[0, 0] == pytest.approx(72.0, rel=1e-12)
    assert g.speed[0, 0] == pytest.approx(10.0, rel=1e-12)
    assert g.occupancy[0, 0] == pytest.approx(1.0, rel=1e-12)


def test_no_crossing_leaves_speed_and_occupancy_missing():
    g = one_window([(0, 150.0, 10.0, 0)])
    assert g.flow[0, 0] == 0.0
    assert np.isnan(g.speed[0, 0]) and np.isnan(g.occupancy[0, 0])


def test_time_mean_of_two():
    g = one_window([(0, 0.0, 10.0, 0), (1, -300.0, 20.0, 0)])
    assert g.speed[0, 0] == pytest.approx(15.0, rel=1e-12)


def test_other_lane_not_counted():
    g = one_window([(0, 0.0, 10.0, 1)])
    assert g.flow[0, 0] == 0.0


def test_crossing_is_binned_by_crossing_time():
    spec = DetectorSpec("d", 100.0, lanes=(0,), window=10.0)
    g = one_window([(0, 0.0, 8.0, 0)], spec=spec)  # crosses at 12.5 s
    assert np.flatnonzero(g.flow[0]).tolist() == [1]


def test_partial_last_interval():
    edges = interval_edges(125.0, 50.0)
    assert edges.tolist() == [0.0, 50.0, 100.0, 125.0]


def test_detector_outside_domain_rejected():
    with pytest.raises(ValidationError):
        simulate_detectors(cruise_log([(0, 0.0, 10.0, 0)], 10.0), [DetectorSpec("far", 5000.0, (0,))],
                           10.0, domain=(0.0, 2000.0))


def test_mixed_windows_rejected():
    specs = [DetectorSpec("a", 10.0, (0,), 30.0), DetectorSpec("b", 20.0, (0,), 60.0)]
    with pytest.raises(ValidationError):
        simulate_detectors(cruise_log([(0, 0.0, 10.0, 0)], 10.0), specs, 60.0, domain=(0.0, 100.0))


def test_platoon_occupancy_matches_covered_time():
    # ten vehicles, 25 m headway at 12.5 m/s: each covers the loop for 0.4 s
    g = one_window([(k, -25.0 * k, 12.5, 0) for k in range(10)])
    assert g.occupancy[0, 0] == pytest.approx(100.0 * 10 * 0.4 / 50.0, rel=1e-12)
    assert g.flow[0, 0] == pytest.approx(10 * 72.0, rel=1e-12)


def test_occupancy_clipped_at_full_coverage():
    g = one_window([(0, 99.9, 0.05, 0)], horizon=50.0)  # crawls onto the loop
    assert g.occupancy[0, 0] == 100.0


def test_flow_matches_crossing_count_on_synthetic_run(synth, gt_traj):
    g = detect(gt_traj, synth)
    for c, (pos, lane) in enumerate(zip(g.positions, g.lanes)):
        j, k = gt_traj.segments()
        x0, x1 = gt_traj.position[j], gt_traj.position[k]
        crossed = np.sum((x0 < pos) & (x1 >= pos) & (gt_traj.lane[k] == lane))
        counted = np.sum(g.flow[c] * g.durations / 3600.0)
        assert counted == pytest.approx(crossed, abs=1e-6)


# -- CSV ----------------------------------------------------------------------

THREE = """time_s,position_m,lane,flow_vph,speed_mps,occupancy_pct
30,100,0,600,25,4
60,100,0,720,,5
30,400,0,900,20,6
60,400,0,960,19,7
30,700,0,300,5,30
60,700,0,360,4,35
"""


def test_ingest_three_detectors(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(THREE)
    g = ingest_measurements(path)
    assert g.detector_positions().tolist() == [100.0, 400.0, 700.0]
    assert g.edges.tolist() == [0.0, 30.0, 60.0]
    assert np.isnan(g.speed[0, 1]) and g.missing("speed").sum() == 1


def test_occupancy_above_100_rejected():
    with pytest.raises(ValidationError) as err:
        parse_measurements(THREE.replace("30,700,0,300,5,30", "30,700,0,300,5,130"))
    assert err.value.field == "occupancy_pct"


@pytest.mark.parametrize("text", [
    "time,position,lane\n1,2,3\n",
    THREE.replace("30,100,0,600,25,4", "30,100,0,abc,25,4"),
    THREE.replace("30,100,0,600,25,4", "30,100,0,600,25"),
    THREE.replace("30,100,0,600,25,4", "30,100,x,600,25,4"),
])
def test_malformed_rows_rejected(text):
    with pytest.raises(ParseError):
        parse_measurements(text)


def test_non_increasing_times_rejected():
    bad = THREE.replace("60,100,0,720,,5", "30,100,0,720,,5")
    with pytest.raises(ValidationError):
        parse_measurements(bad)


def test_missing_file_is_parse_error(tmp_path):
    with pytest.raises(ParseError):
        ingest_measurements(tmp_path / "nope.csv")


def test_csv_round_trip(synth, gt_traj):
    g = detect(gt_traj, synth)
    back = parse_measurements(measurements_to_csv(g))
    assert np.array_equal(back.positions, g.positions) and np.array_equal(back.lanes, g.lanes)
    assert np.array_equal(back.edges, g.edges)
    for a, b in ((back.flow, g.flow), (back.speed, g.speed), (back.occupancy, g.occupancy)):
        assert np.array_equal(a, b, equal_nan=True)


# -- aggregation -------------------------------------------------------------------

def grid_of(flow, speed, occ, window=30.0):
    flow = np.atleast_2d(np.asarray(flow, dtype=float))
    edges = np.arange(flow.shape[1] + 1) * window
    return MeasurementGrid(np.full(flow.shape[0], 100.0), np.arange(flow.shape[0]), edges, flow,
                           np.atleast_2d(np.asarray(speed, dtype=float)),
                           np.atleast_2d(np.asarray(occ, dtype=float)))


def test_thirty_to_three_hundred_seconds(synth, gt_traj):
    g = detect(gt_traj, synth)
    coarse = aggregate(g, 300.0)
    # 480 s horizon: one full 300 s cell and a partial 180 s tail
    assert coarse.edges.tolist() == [0.0, 300.0, 480.0]
    m = int(round(300.0 / g.window))
    for k, part in enumerate((slice(0, m), slice(m, None))):
        w = g.durations[part]
        assert np.allclose(g.flow[:, part] @ w / w.sum(), coarse.flow[:, k], rtol=1e-12)


def test_same_window_is_identity():
    g = grid_of([[100.0, 200.0]], [[10.0, 20.0]], [[1.0, 2.0]])
    assert aggregate(g, 30.0).equals(g)


def test_flow_mean_of_two():
    g = grid_of([[1000.0, 2000.0]], [[10.0, 20.0]], [[1.0, 3.0]])
    out = aggregate(g, 60.0)
    assert out.flow[0, 0] == pytest.approx(1500.0)
    assert out.occupancy[0, 0] == pytest.approx(2.0)
    # count-weighted: (1000 * 10 + 2000 * 20) / 3000
    assert out.speed[0, 0] == pytest.approx(50.0 / 3.0)


def test_non_multiple_window_rejected():
    with pytest.raises(ValidationError):
        aggregate(grid_of([[1.0, 2.0]], [[1.0, 1.0]], [[1.0, 1.0]]), 45.0)


def test_missing_subcells_skipped():
    g = grid_of([[600.0, np.nan]], [[10.0, np.nan]], [[2.0, np.nan]])
    out = aggregate(g, 60.0)
    assert out.flow[0, 0] == 600.0 and out.speed[0, 0] == 10.0 and out.occupancy[0, 0] == 2.0


cells = st.lists(st.tuples(st.floats(1, 3000), st.floats(0.5, 40), st.floats(0, 100)), min_size=12, max_size=12)


@settings(max_examples=100, deadline=None)
@given(data=cells)
def test_aggregation_is_associative(data):
    q, v, o = (np.array([[d[i] for d in data]]) for i in range(3))
    g = grid_of(q, v, o, window=10.0)
    direct = aggregate(g, 120.0)
    staged = aggregate(aggregate(g, 30.0), 120.0)
    for a, b in ((direct.flow, staged.flow), (direct.speed, staged.speed), (direct.occupancy, staged.occupancy)):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(data=cells)
def test_aggregated_values_stay_within_subcell_range(data):
    q, v, o = (np.array([[d[i] for d in data]]) for i in range(3))
    out = aggregate(grid_of(q, v, o, window=10.0), 60.0)
    for agg, raw in ((out.flow, q), (out.speed, v), (out.occupancy, o)):
        assert np.all(agg >= raw.min() - 1e-9) and np.all(agg <= raw.max() + 1e-9)
