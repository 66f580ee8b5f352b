"""World state, the simulation step and full runs."""

from __future__ import annotations

from collections import deque

import numpy as np

from ..errors import SimulationFault
from ..scenario import MAINLINE, ParameterSet, RoadNetwork, ScenarioConfig, sample_arrivals, sample_destinations
from .kernel import accel_phase, find_conflict, integrate, lane_change_phase
from .models import LC_COOLDOWN, VehicleState, desired_gap
from .trajectory import TrajectoryLog


def _dest_code(dest: str) -> int:
    return -1 if dest == MAINLINE else int(dest[len("offramp"):])


class World:
    """Mutable simulation state for one run.

    ``arrivals`` maps an origin id to ``(times, destinations)``; vehicles are
    queued outside the network until their entry gap is safe.
    """

    def __init__(self, network: RoadNetwork, params: ParameterSet, dt: float = 0.1,
                 vehicle_length: float = 5.0, arrivals: dict | None = None, record: bool = True):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.network = network
        self.params = params
        self.dt = float(dt)
        self.vehicle_length = float(vehicle_length)
        self.record = record
        self._P = params.packed()
        self._n_main = network.n_main
        self._zs, self._ze = network.zone_arrays()
        self._off_pos, self._off_lane = network.offramp_arrays()

        self.ids = np.zeros(0, dtype=np.int64)
        self.lane = np.zeros(0, dtype=np.int64)  # global numbering, see kernel
        self.x = np.zeros(0)
        self.v = np.zeros(0)
        self.length = np.zeros(0)
        self.dest = np.zeros(0, dtype=np.int64)
        self.scripted = np.zeros(0, dtype=np.bool_)
        self.cooldown = np.zeros(0, dtype=np.int64)
        self.sg_left = np.zeros(0, dtype=np.int64)
        self.sg_right = np.zeros(0, dtype=np.int64)

        self.n_step = 0
        self.next_id = 0
        self.inserted = 0
        self.exited = 0
        self.entry_times = {}
        self.exit_times = {}
        self._rec = ([], [], [], [], [])  # ids, step, x, global lane, v

        self._origins = []
        for origin, (times, dests) in (arrivals or {}).items():
            if origin == MAINLINE:
                x_entry, lanes, zone = 0.0, list(range(1, self._n_main + 1)), None
            else:
                k = int(origin[len("onramp"):])
                x_entry, lanes, zone = self._zs[k], [0], k
            self._origins.append({
                "times": np.asarray(times, dtype=float),
                "dests": [_dest_code(d) for d in dests],
                "next": 0, "queue": deque(), "x": x_entry, "lanes": lanes, "zone": zone,
            })

    @classmethod
    def from_scenario(cls, scenario: ScenarioConfig, params: ParameterSet, seed: int | None = None,
                      record: bool = True) -> "World":
        seed = scenario.seed if seed is None else seed
        arrivals = {}
        for origin in sorted(scenario.demand.origins, key=lambda o: (o != MAINLINE, o)):
            times = sample_arrivals(scenario.demand, origin, seed)
            arrivals[origin] = (times, sample_destinations(scenario.demand, origin, len(times), seed))
        return cls(scenario.network, params, scenario.dt, scenario.vehicle_length, arrivals, record)

    @property
    def time(self) -> float:
        return self.n_step * self.dt

    @property
    def n_present(self) -> int:
        return self.ids.size

    @property
    def n_queued(self) -> int:
        return sum(len(o["queue"]) for o in self._origins)

    # -- vehicles --------------------------------------------------------------

    def _global_lane(self, local, x):
        in_zone = bool(self.network.in_merge_zone(x))
        return local if in_zone else local + 1

    def _local_lanes(self, lanes, x):
        return lanes - 1 + self.network.in_merge_zone(x).astype(np.int64)

    def add_vehicle(self, state: VehicleState, scripted: bool = False) -> int:
        """Place a vehicle directly (tests and hand-built scenes). Returns its id."""
        n_here = self.network.lane_count(min(state.position, self.network.length - 1e-9))
        if not 0 <= state.lane < n_here:
            raise ValueError(f"lane {state.lane} does not exist at {state.position} m")
        if state.speed < 0:
            raise ValueError("speed must be non-negative")
        vid = max(self.next_id, state.id)
        self.next_id = vid + 1
        self._append(vid, self._global_lane(state.lane, state.position), state.position, state.speed,
                     state.length, _dest_code(state.destination), scripted,
                     int(np.ceil(state.cooldown / self.dt - 1e-9)))
        return vid

    def _append(self, vid, lane, x, v, length, dest, scripted=False, cooldown=0):
        self.ids = np.append(self.ids, vid)
        self.lane = np.append(self.lane, lane)
        self.x = np.append(self.x, float(x))
        self.v = np.append(self.v, float(v))
        self.length = np.append(self.length, float(length))
        self.dest = np.append(self.dest, dest)
        self.scripted = np.append(self.scripted, scripted)
        self.cooldown = np.append(self.cooldown, cooldown)
        self.sg_left = np.append(self.sg_left, 0)
        self.sg_right = np.append(self.sg_right, 0)
        self.inserted += 1
        self.entry_times[int(vid)] = self.time
        if self.record:
            self._record(np.array([len(self.ids) - 1]))

    def vehicles(self) -> list:
        local = self._local_lanes(self.lane, self.x)
        out = []
        for k in range(self.ids.size):
            dest = MAINLINE if self.dest[k] < 0 else f"offramp{self.dest[k]}"
            out.append(VehicleState(
                int(self.ids[k]), int(local[k]), float(self.x[k]), float(self.v[k]), float(self.length[k]),
                dest, self.cooldown[k] * self.dt, self.sg_left[k] * self.dt, self.sg_right[k] * self.dt,
            ))
        return out

    # -- stepping ----------------------------------------------------------------

    def step(self) -> "World":
        """Advance one tick: lane changes, accelerations, motion, exits, insertions."""
        dt = self.dt
        if self.ids.size:
            new_lane, pending = lane_change_phase(
                self.lane, self.x, self.v, self.length, self.dest, self.scripted,
                self.cooldown, self.sg_left, self.sg_right, self._P, self._n_main,
                self._zs, self._ze, self._off_pos, self._off_lane, dt,
            )
            self.lane = new_lane
            acc = accel_phase(self.lane, self.x, self.v, self.length, self.scripted, pending,
                              self._P, self._n_main, self._zs, self._ze)
            integrate(self.x, self.v, acc, dt)
        self.n_step += 1
        if self.ids.size:
            f, l = find_conflict(self.lane, self.x, self.length, self._n_main, self._zs, self._ze)
            if f >= 0:
                ids = (int(self.ids[f]),) if l < 0 else (int(self.ids[f]), int(self.ids[l]))
                what = "left its lane" if l < 0 else "collision"
                raise SimulationFault(f"{what} at t={self.time:.1f}s between vehicles {ids}", self.time, ids)
            if self.record:
                self._record(np.arange(self.ids.size))
            self._remove()
        self._insert()
        return self

    def run_steps(self, n: int) -> "World":
        for _ in range(n):
            self.step()
        return self

    def _record(self, idx):
        ids, step, x, lane, v = self._rec
        ids.append(self.ids[idx])
        step.append(np.full(idx.size, self.n_step, dtype=np.int64))
        x.append(self.x[idx].copy())
        lane.append(self.lane[idx].copy())
        v.append(self.v[idx].copy())

    def _remove(self):
        gone = self.x >= self.network.length
        if self._off_pos.size:
            has_dest = self.dest >= 0
            d = np.where(has_dest, self.dest, 0)
            at_diverge = has_dest & (self.x >= self._off_pos[d])
            taken = at_diverge & (self.lane == self._off_lane[d])
            gone |= taken
            self.dest = np.where(at_diverge & ~taken, -1, self.dest)  # missed the exit
        if not gone.any():
            return
        for vid in self.ids[gone]:
            self.exit_times[int(vid)] = self.time
        self.exited += int(gone.sum())
        keep = ~gone
        for name in ("ids", "lane", "x", "v", "length", "dest", "scripted", "cooldown", "sg_left", "sg_right"):
            setattr(self, name, getattr(self, name)[keep])

    def _insert(self):
        t = self.time + 1e-9
        vf, sj, tau, a, b = self.params.vf, self.params.sj, self.params.tau, self.params.a, self.params.b
        for o in self._origins:
            times, queue = o["times"], o["queue"]
            while o["next"] < times.size and times[o["next"]] <= t:
                queue.append(o["dests"][o["next"]])
                o["next"] += 1
            if not queue:
                continue
            x_entry = o["x"]
            blocked = set()
            while queue:
                best, best_gap, best_v = None, -np.inf, vf
                for g in o["lanes"]:
                    if g in blocked:
                        continue
                    mask = (self.lane == g) & (self.x >= x_entry)
                    if o["zone"] is not None:
                        mask &= self.x < self._ze[o["zone"]]
                    if mask.any():
                        cand = np.nonzero(mask)[0]
                        j = cand[np.argmin(self.x[cand])]
                        gap = self.x[j] - self.length[j] - x_entry
                        v_entry = min(vf, self.v[j])
                        if gap <= 0 or gap < desired_gap(v_entry, 0.0, sj, tau, a, b):
                            blocked.add(g)
                            continue
                    else:
                        gap, v_entry = np.inf, vf
                    if gap > best_gap:
                        best, best_gap, best_v = g, gap, v_entry
                if best is None:
                    break
                blocked.add(best)
                vid = self.next_id
                self.next_id += 1
                self._append(vid, best, x_entry, best_v, self.vehicle_length, queue.popleft())

    # -- output ------------------------------------------------------------------

    def trajectory(self) -> TrajectoryLog:
        ids, step, x, lane, v = self._rec
        if not ids:
            return TrajectoryLog.empty(self.vehicle_length, self.dt)
        ids = np.concatenate(ids)
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        x = np.concatenate(x)[order]
        lane = self._local_lanes(np.concatenate(lane)[order], x)
        vehicles = np.unique(ids)
        entry = np.array([self.entry_times[int(i)] for i in vehicles])
        exits = np.array([self.exit_times.get(int(i), np.nan) for i in vehicles])
        return TrajectoryLog(
            ids, np.concatenate(step)[order] * self.dt, x, lane, np.concatenate(v)[order],
            vehicles, entry, exits, self.vehicle_length, self.dt,
        )


def run(scenario: ScenarioConfig, params: ParameterSet, seed: int | None = None) -> TrajectoryLog:
    """Simulate ``scenario`` from 0 to its horizon; deterministic for a given seed."""
    world = World.from_scenario(scenario, params, seed)
    world.run_steps(scenario.n_steps)
    return world.trajectory()


__all__ = ["World", "run", "LC_COOLDOWN"]
