import numpy as np
import pytest

from microcal.microsim import World, run
from microcal.scenario import (
    DemandProfile, DetectorSpec, ParameterSet, RoadNetwork, ScenarioConfig, build_synthetic_merge,
)

GT = ParameterSet(vf=30.55, sj=2.5, tau=1.4, a=1.5, b=2.0, lc_assertive=0.5, lc_keep_right=0.5)


def straight_road(length=2000.0, lanes=1):
    return RoadNetwork(length, (0.0,), (lanes,))


def empty_world(length=2000.0, lanes=1, params=GT, dt=0.1):
    return World(straight_road(length, lanes), params, dt=dt)


def small_scenario(rate=0.0, horizon=60.0, **kw):
    net = RoadNetwork(600.0, (0.0,), (2,))
    demand = DemandProfile(horizon, {"mainline": (rate,)})
    dets = (DetectorSpec("d300", 300.0, window=30.0),)
    return ScenarioConfig(net, demand, dets, horizon, 0.1, 7, GT, **kw)


@pytest.fixture(scope="session")
def synth():
    return build_synthetic_merge()


@pytest.fixture(scope="session")
def gt_traj(synth):
    return run(synth, synth.ground_truth)


@pytest.fixture(scope="session")
def default_traj(synth):
    return run(synth, synth.defaults)


def cruise_log(vehicles, horizon, dt=0.1, length=5.0):
    """Constant-speed trajectories; ``vehicles`` holds (id, x0, speed, lane) tuples."""
    from microcal.microsim import TrajectoryLog

    t = np.round(np.arange(0.0, horizon + dt / 2, dt), 10)
    ids, times, xs, lanes, vs = [], [], [], [], []
    for vid, x0, v, lane in vehicles:
        ids.append(np.full(t.size, vid))
        times.append(t)
        xs.append(x0 + v * t)
        lanes.append(np.full(t.size, lane))
        vs.append(np.full(t.size, float(v)))
    return TrajectoryLog.from_samples(np.concatenate(ids), np.concatenate(times), np.concatenate(xs),
                                      np.concatenate(lanes), np.concatenate(vs), length, dt)


def mini_merge(horizon=120.0, mainline=2400.0, onramp=600.0):
    """A short two-lane corridor with one on-ramp; cheap enough for calibration tests."""
    from microcal.scenario import OnRamp

    synth = build_synthetic_merge()
    net = RoadNetwork(600.0, (0.0, 250.0, 400.0), (2, 3, 2), onramps=(OnRamp(250.0, 400.0),))
    rates = {"mainline": (mainline,), "onramp0": (onramp,)}
    dets = (DetectorSpec("up", 200.0, window=30.0), DetectorSpec("down", 500.0, window=30.0))
    return ScenarioConfig(net, DemandProfile(horizon, rates), dets, horizon, 0.1, 11, synth.defaults,
                          ground_truth=synth.ground_truth, bounds=synth.bounds, name="mini_merge")
