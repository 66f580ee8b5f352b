"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest

from microcal.calibrate import run_matrix, twin_data
from microcal.cli import BUILTIN, main
from microcal.macro import AsmParams, GridSpec, asm_kernel_averages, asm_reconstruct, edie_fields
from microcal.microsim import VehicleState, World, idm_acceleration, run
from microcal.optimizer import DEConfig, differential_evolution
from microcal.scenario import DetectorSpec, RoadNetwork, build_synthetic_merge
from microcal.sensing import MeasurementGrid, simulate_detectors

from conftest import cruise_log

CONGESTION_WINDOW = 240.0  # s, the final four minutes
UPSTREAM = 700.0  # m, detector upstream of the merge


def verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number} {'PASS' if ok else 'FAIL'}: {title}: {detail}")
    return ok


# -- criteria 1 and 2: twin calibration and congestion pattern ----------------------------

@pytest.fixture(scope="module")
def twin():
    scenario = build_synthetic_merge()
    _, observed, validation = twin_data(scenario)
    t0 = time.perf_counter()
    reports = run_matrix(scenario, observed, DEConfig(pop_size=15, max_generations=40), validation,
                         labels=["1.b", "3.b"])
    return scenario, reports, (time.perf_counter() - t0) / len(reports)


def upstream_speeds(scenario, params, seed):
    """Cross-section speeds at the upstream detector over the final window.

    Returns ``(space_mean, flow_weighted_mean, lane_mean)`` in m/s; the first is
    total flow over total density, sum(q) / sum(q / v).
    """
    lanes = scenario.detector_lanes(next(d for d in scenario.detectors if d.position == UPSTREAM))
    spec = DetectorSpec("congestion", UPSTREAM, lanes, CONGESTION_WINDOW)
    grid = simulate_detectors(run(scenario, params, seed), [spec], scenario.horizon,
                              domain=(0.0, scenario.network.length))
    assert grid.edges[-1] - grid.edges[-2] == CONGESTION_WINDOW
    q, v = grid.flow[:, -1], grid.speed[:, -1]
    ok = q > 0
    return q[ok].sum() / (q[ok] / v[ok]).sum(), q[ok] @ v[ok] / q[ok].sum(), float(np.mean(v[ok]))


@pytest.mark.slow
def test_criterion_1_twin_calibration_improvement(twin, capsys):
    _, reports, per_cell = twin
    lines, ok = [], True
    for rep in reports:
        det, base_det = rep.detector["v"], rep.baseline_detector["v"]
        mac, base_mac = rep.macro["v"], rep.baseline_macro["v"]
        cell_ok = rep.ok and det <= 0.6 * base_det and mac < base_mac
        ok &= cell_ok
        lines.append(f"{rep.label} detector v {det:.2f} mph (limit {0.6 * base_det:.2f}), "
                     f"macro v {mac:.2f} < {base_mac:.2f} mph, {rep.result.generations} generations")
    verdict(capsys, 1, "twin calibration improvement", ok,
            "; ".join(lines) + f"; {per_cell:.0f} s per cell")
    assert ok


@pytest.mark.slow
def test_criterion_2_congestion_pattern(twin, capsys):
    scenario, reports, _ = twin
    seed = scenario.seed
    checks = []
    for name, params, below in [("ground truth", scenario.ground_truth, True), ("defaults", scenario.defaults, False)] \
            + [(f"calibrated {r.label}", r.params, True) for r in reports]:
        space, flow_w, lane = upstream_speeds(scenario, params, seed)
        ratio = space / params.vf
        passed = ratio < 0.5 if below else ratio > 0.8
        checks.append((passed, f"{name} {ratio:.2f} vf (flow-weighted {flow_w / params.vf:.2f}, "
                               f"lane mean {lane / params.vf:.2f})"))
    ok = all(p for p, _ in checks)
    verdict(capsys, 2, "congestion at 700 m in the last 4 min", ok, "; ".join(d for _, d in checks))
    assert ok


# -- criterion 3: IDM equilibrium ------------------------------------------------------------

def test_criterion_3_idm_equilibrium(capsys):
    from conftest import GT as p

    v = 25.0
    s_e = (p.sj + v * p.tau) / np.sqrt(1.0 - (v / p.vf) ** p.delta)
    world = World(RoadNetwork(40_000.0, (0.0,), (1,)), p, dt=0.1)
    world.add_vehicle(VehicleState(0, 0, 400.0, v), scripted=True)
    world.add_vehicle(VehicleState(1, 0, 250.0, 12.0))
    t0 = time.perf_counter()
    world.run_steps(6000)
    elapsed = time.perf_counter() - t0
    gap = world.x[0] - world.length[0] - world.x[1]
    residual = idm_acceleration(world.v[1], world.v[1] - v, gap, True, p)
    ok = abs(gap - s_e) <= 1e-3 and abs(residual) <= 1e-4
    verdict(capsys, 3, "IDM equilibrium", ok,
            f"gap {gap:.6f} m vs {s_e:.6f} m, residual {residual:.2e} m/s^2, {elapsed:.1f} s")
    assert ok


# -- criterion 4: Edie consistency ------------------------------------------------------------

def test_criterion_4_edie_consistency(capsys):
    spacing, speed, horizon, length = 40.0, 20.0, 120.0, 1000.0
    starts = np.arange(-speed * horizon - spacing, length + spacing, spacing)
    traj = cruise_log([(k, x0, speed, 0) for k, x0 in enumerate(starts)], horizon)
    f = edie_fields(traj, GridSpec(length, horizon, 100.0, 10.0), lanes=1)
    inner = (slice(1, -1), slice(1, -1))
    rho_err = np.max(np.abs(f.density[inner] * spacing - 1.0))
    q_err = np.max(np.abs(f.flow[inner] / (speed / spacing) - 1.0))
    v = f.valid
    ident = np.max(np.abs(f.flow[v] - f.density[v] * f.speed[v]) / f.flow[v])
    ok = rho_err <= 0.02 and q_err <= 0.02 and ident <= 1e-9 and v.all()
    verdict(capsys, 4, "Edie consistency", ok,
            f"density error {rho_err:.2e}, flow error {q_err:.2e}, q = rho v error {ident:.1e}")
    assert ok


# -- criterion 5: detector oracle ---------------------------------------------------------------

def test_criterion_5_detector_oracle(capsys):
    # loop at 100 m, one 50 s window; crossings at 10 s, 15 s and 24 s
    vehicles = [(0, 0.0, 10.0, 0), (1, -200.0, 20.0, 0), (2, -500.0, 25.0, 0)]
    grid = simulate_detectors(cruise_log(vehicles, 50.0), [DetectorSpec("d", 100.0, (0,), 50.0)], 50.0,
                              domain=(0.0, 2000.0))
    want_q = 3 * 3600.0 / 50.0
    want_v = (10.0 + 20.0 + 25.0) / 3.0
    want_o = 100.0 * (5.0 / 10.0 + 5.0 / 20.0 + 5.0 / 25.0) / 50.0
    got = grid.flow[0, 0], grid.speed[0, 0], grid.occupancy[0, 0]
    errs = [abs(g - w) / w for g, w in zip(got, (want_q, want_v, want_o))]
    ok = max(errs) <= 1e-9
    verdict(capsys, 5, "detector oracle", ok,
            f"q {got[0]:.9g} veh/h, v {got[1]:.9g} m/s, o {got[2]:.9g} %, max relative error {max(errs):.1e}")
    assert ok


# -- criterion 6: DE benchmark --------------------------------------------------------------------

def test_criterion_6_de_benchmark(capsys):
    sphere = lambda x: float(np.sum(x * x))
    rosen = lambda x: float(100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2)
    t0 = time.perf_counter()
    s1 = differential_evolution(sphere, [(-5, 5)] * 5, DEConfig(pop_size=20, max_generations=200, seed=0))
    r1 = differential_evolution(rosen, [(-2, 2)] * 2, DEConfig(pop_size=20, max_generations=300, seed=0))
    elapsed = time.perf_counter() - t0
    s2 = differential_evolution(sphere, [(-5, 5)] * 5, DEConfig(pop_size=20, max_generations=200, seed=0))
    r2 = differential_evolution(rosen, [(-2, 2)] * 2, DEConfig(pop_size=20, max_generations=300, seed=0))
    same = s1.trace == s2.trace and r1.trace == r2.trace and np.array_equal(s1.x, s2.x) \
        and np.array_equal(r1.x, r2.x)
    monotone = all(np.all(np.diff(r.trace) <= 0) for r in (s1, r1))
    ok = s1.fun <= 1e-6 and r1.fun <= 1e-3 and same and monotone and elapsed <= 5.0
    verdict(capsys, 6, "DE benchmark", ok,
            f"sphere {s1.fun:.2e}, Rosenbrock {r1.fun:.2e}, deterministic {same}, "
            f"non-increasing {monotone}, {elapsed:.2f} s")
    assert ok


# -- criterion 7: ASM properties ---------------------------------------------------------------------

def _grid(positions, flow, speed, window=60.0):
    flow = np.asarray(flow, dtype=float)
    return MeasurementGrid(positions, np.zeros(len(positions), dtype=int),
                           np.arange(flow.shape[1] + 1) * window, flow, np.asarray(speed, dtype=float),
                           np.full(flow.shape, 5.0))


def test_criterion_7_asm_properties(capsys):
    out = GridSpec(3000.0, 900.0, 50.0, 30.0)
    t0 = time.perf_counter()
    single = asm_reconstruct(_grid([1000.0], [[1500.0]], [[17.0]]), out)
    single_err = np.max(np.abs(single.speed - 17.0))
    pos = [0.0, 750.0, 1500.0, 2250.0]
    uniform = asm_reconstruct(_grid(pos, np.full((4, 15), 1200.0), np.full((4, 15), 24.0)), out)
    uniform_err = np.max(np.abs(uniform.speed - 24.0))
    rng = np.random.default_rng(7)
    speed = np.where(np.arange(4)[:, None] < 2, rng.uniform(24, 30, (4, 15)), rng.uniform(3, 8, (4, 15)))
    two = asm_reconstruct(_grid(pos, rng.uniform(600, 1800, (4, 15)), speed), out)
    bounded = speed.min() - 1e-9 <= two.speed.min() and two.speed.max() <= speed.max() + 1e-9
    k = asm_kernel_averages(_grid(pos, rng.uniform(600, 1800, (4, 15)), speed), out,
                            AsmParams(c_free=12.0, c_cong=12.0))
    degenerate = max(np.max(np.abs(k["speed_free"] - k["speed_cong"])),
                     np.max(np.abs(k["flow_free"] - k["flow_cong"])))
    elapsed = time.perf_counter() - t0
    ok = single_err <= 1e-12 and uniform_err <= 1e-12 and bounded and degenerate <= 1e-12
    verdict(capsys, 7, "ASM properties", ok,
            f"single datum error {single_err:.1e}, uniform error {uniform_err:.1e}, bounded {bounded}, "
            f"equal-wave kernel gap {degenerate:.1e}, {elapsed:.2f} s")
    assert ok


# -- criterion 8: determinism and parallel safety -------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_parallel_determinism(tmp_path, capsys):
    truth, obs = tmp_path / "truth.csv", tmp_path / "obs.csv"
    assert main(["simulate", "--scenario", BUILTIN, "--params", "ground_truth", "--out", str(truth)]) == 0
    assert main(["detect", "--scenario", BUILTIN, "--traj", str(truth), "--out", str(obs)]) == 0
    manifest = tmp_path / "matrix.cfg"
    manifest.write_text("[de]\npop_size = 4\nmax_generations = 1\nseed = 5\n")
    outputs = {}
    for jobs in (1, 8):
        out = tmp_path / f"jobs{jobs}"
        code = main(["matrix", "--scenario", BUILTIN, "--obs", str(obs), "--validation", str(truth),
                     "--manifest", str(manifest), "--jobs", str(jobs), "--out", str(out)])
        assert code == 0
        outputs[jobs] = {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}
    names = sorted(outputs[1])
    reports = [n for n in names if n.endswith("_report.csv")]
    identical = names == sorted(outputs[8]) and all(outputs[1][n] == outputs[8][n] for n in names)
    ok = identical and len(reports) == 9
    verdict(capsys, 8, "determinism across --jobs 1 and --jobs 8", ok,
            f"{len(reports)} report CSVs plus results.csv, byte-identical {identical}")
    assert ok
