import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import microcal.microsim
from microcal.errors import SimulationFault, ValidationError
from microcal.macro import GridSpec, MacroField
from microcal.metrics import (
    PENALTY, Quantity, objective, report_unit, rmse, rmse_detectors, rmse_macro, simulate_measurements,
)
from microcal.sensing import MeasurementGrid
from microcal.units import HOUR, MILE, MPH


def test_identical_is_zero():
    a = np.array([[1.0, 2.0], [3.0, np.nan]])
    assert rmse(a, a) == 0.0


def test_hand_example():
    assert rmse([10.0, 20.0], [13.0, 16.0]) == pytest.approx(3.5355339, rel=1e-7)


def test_missing_cell_excluded():
    assert rmse([10.0, 20.0, np.nan], [13.0, 16.0, 100.0]) == pytest.approx(np.sqrt(12.5))
    assert rmse([10.0, 20.0, 5.0], [13.0, 16.0, np.nan]) == pytest.approx(np.sqrt(12.5))


def test_no_overlap_and_shape_errors():
    with pytest.raises(ValidationError) as err:
        rmse([np.nan, 1.0], [1.0, np.nan])
    assert err.value.field == "overlap"
    with pytest.raises(ValidationError):
        rmse([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-1e3, 1e3).map(lambda x: round(x, 6))] * 2), min_size=1, max_size=30))
def test_nonnegative_and_symmetric(pairs):
    a, b = np.array(pairs).T
    r = rmse(a, b)
    assert r >= 0.0
    assert r == pytest.approx(rmse(b, a), rel=1e-12, abs=1e-12)
    assert (r == 0.0) == bool(np.all(a == b))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20), st.integers(0, 19), st.floats(0.01, 50))
def test_monotone_in_single_cell_error(values, k, extra):
    obs = np.array(values)
    sim = obs + 1.0
    k %= obs.size
    worse = sim.copy()
    worse[k] += extra
    assert rmse(obs, worse) > rmse(obs, sim)


def field_of(speed, density):
    speed = np.asarray(speed, dtype=float)
    g = GridSpec(10.0 * speed.shape[1], 10.0 * speed.shape[0], 10.0, 10.0)
    valid = ~np.isnan(speed)
    return MacroField(g, np.asarray(density) * speed, np.asarray(density, dtype=float), speed, valid,
                      np.ones(speed.shape[1]))


def test_macro_constant_offset():
    base = np.full((4, 5), 20.0)
    obs, sim = field_of(base, np.full((4, 5), 0.02)), field_of(base + 0.7, np.full((4, 5), 0.02))
    assert rmse_macro(obs, sim, "speed", units="si") == pytest.approx(0.7)


def test_macro_checkerboard():
    base = np.full((6, 6), 20.0)
    sign = np.where(np.add.outer(np.arange(6), np.arange(6)) % 2, 1.0, -1.0)
    obs, sim = field_of(base, np.full((6, 6), 0.02)), field_of(base + sign, np.full((6, 6), 0.02))
    assert rmse_macro(obs, sim, "speed", units="si") == pytest.approx(1.0)


def test_macro_rejects_occupancy_and_grid_mismatch():
    a = field_of(np.full((2, 2), 20.0), np.full((2, 2), 0.01))
    b = field_of(np.full((2, 3), 20.0), np.full((2, 3), 0.01))
    with pytest.raises(ValidationError):
        rmse_macro(a, a, "occupancy")
    with pytest.raises(ValidationError):
        rmse_macro(a, b, "speed")


def det_grid(flow, speed):
    flow = np.asarray(flow, dtype=float)
    return MeasurementGrid(np.full(flow.shape[0], 100.0), np.arange(flow.shape[0]),
                           np.arange(flow.shape[1] + 1) * 30.0, flow, np.asarray(speed, dtype=float),
                           np.full(flow.shape, 5.0))


@pytest.mark.parametrize("z, factor", [("flow", HOUR), ("speed", 1 / MPH), ("density", MILE)])
def test_unit_round_trip(z, factor):
    rng = np.random.default_rng(0)
    obs = det_grid(rng.uniform(100, 2000, (3, 8)), rng.uniform(2, 30, (3, 8)))
    sim = det_grid(rng.uniform(100, 2000, (3, 8)), rng.uniform(2, 30, (3, 8)))
    si = rmse_detectors(obs, sim, z, units="si")
    assert rmse_detectors(obs, sim, z) == pytest.approx(si * factor, rel=1e-12)


def test_report_units():
    assert [report_unit(z) for z in ("q", "v", "o", "rho")] == ["vph", "mph", "%", "vpm"]
    assert Quantity.parse("k") is Quantity.DENSITY
    with pytest.raises(ValidationError):
        Quantity.parse("headway")


def test_detector_geometry_mismatch():
    with pytest.raises(ValidationError):
        rmse_detectors(det_grid([[1.0]], [[1.0]]), det_grid([[1.0, 2.0]], [[1.0, 2.0]]), "flow")


# -- objective -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def gt_obs(synth):
    return simulate_measurements(synth, synth.ground_truth, synth.seed)


def test_objective_zero_at_truth(synth, gt_obs):
    assert objective(gt_obs, synth, synth.ground_truth, "speed", synth.seed) == 0.0


def test_objective_defaults_worse_than_truth(synth, gt_obs):
    truth = objective(gt_obs, synth, synth.ground_truth, "speed", synth.seed + 1)
    default = objective(gt_obs, synth, synth.defaults, "speed", synth.seed + 1)
    assert default > truth > 0.0


def test_fault_scores_penalty(synth, gt_obs, monkeypatch):
    def crash(*args, **kwargs):
        raise SimulationFault("collision at t=1.0s between vehicles (1, 2)", 1.0, (1, 2))

    monkeypatch.setattr(microcal.microsim, "run", crash)
    assert objective(gt_obs, synth, synth.ground_truth, "speed") == PENALTY


def test_no_overlap_scores_penalty(synth):
    empty = simulate_measurements(synth, synth.ground_truth)
    empty = MeasurementGrid(empty.positions, empty.lanes, empty.edges, empty.flow * np.nan,
                            empty.speed * np.nan, empty.occupancy * np.nan)
    assert objective(empty, synth, synth.ground_truth, "speed") == PENALTY
