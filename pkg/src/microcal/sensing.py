"""Virtual loop detectors: per-lane flow, time-mean speed and occupancy.

A :class:`MeasurementGrid` stores one *channel* per (detector position, lane)
pair and one column per aggregation interval. Missing values are NaN.
Internally flow is veh/h, speed m/s and occupancy percent.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError
from .microsim.trajectory import TrajectoryLog
from .units import HOUR

MEASUREMENT_COLUMNS = ("time_s", "position_m", "lane", "flow_vph", "speed_mps", "occupancy_pct")


def interval_edges(horizon: float, window: float) -> np.ndarray:
    """Edges 0, w, 2w, ... ending exactly at ``horizon`` (last interval may be shorter)."""
    if not window > 0 or not horizon > 0:
        raise ValueError("window and horizon must be positive")
    n_full = int(math.floor(horizon / window + 1e-9))
    edges = np.arange(n_full + 1) * float(window)
    if horizon - edges[-1] > 1e-9 * max(1.0, horizon):
        edges = np.append(edges, float(horizon))
    else:
        edges[-1] = float(horizon)
    return edges


@dataclass(eq=False)
class MeasurementGrid:
    """Aggregated detector data, shape ``(n_channels, n_intervals)``.

    ``positions`` and ``lanes`` label the channels; ``edges`` are the interval
    boundaries. The weight arrays record how much data backs each value (hours
    of covered time for flow and occupancy, vehicle count for speed) so that
    :func:`aggregate` composes exactly; they default to what a complete
    interval implies.
    """

    positions: np.ndarray
    lanes: np.ndarray
    edges: np.ndarray
    flow: np.ndarray
    speed: np.ndarray
    occupancy: np.ndarray
    names: tuple = ()
    w_flow: np.ndarray | None = field(default=None, repr=False)
    w_speed: np.ndarray | None = field(default=None, repr=False)
    w_occ: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.lanes = np.asarray(self.lanes, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=float)
        shape = (self.positions.size, self.edges.size - 1)
        if self.lanes.shape != self.positions.shape:
            raise ValidationError("lanes", "one lane index per channel required")
        if self.edges.size < 2 or np.any(np.diff(self.edges) <= 0):
            raise ValidationError("time_s", "interval boundaries must be strictly increasing")
        for name in ("flow", "speed", "occupancy"):
            arr = np.array(getattr(self, name), dtype=float).reshape(shape)
            setattr(self, name, arr)
        if np.any(self.flow < 0):
            raise ValidationError("flow_vph", "flow must be non-negative")
        if np.any(self.speed < 0):
            raise ValidationError("speed_mps", "speed must be non-negative")
        if np.any((self.occupancy < 0) | (self.occupancy > 100)):
            raise ValidationError("occupancy_pct", "occupancy must lie in [0, 100]")
        dur = np.broadcast_to(self.durations, shape)
        if self.w_flow is None:
            self.w_flow = np.where(np.isnan(self.flow), 0.0, dur)
        if self.w_occ is None:
            self.w_occ = np.where(np.isnan(self.occupancy), 0.0, dur)
        if self.w_speed is None:
            # vehicle counts; a speed reported without a flow gets unit weight
            counts = np.where(np.isnan(self.flow), 1.0, self.flow * dur / HOUR)
            self.w_speed = np.where(np.isnan(self.speed), 0.0, counts)
        if not self.names:
            self.names = tuple(f"{p:g}m/lane{l}" for p, l in zip(self.positions, self.lanes))

    @property
    def shape(self):
        return self.flow.shape

    @property
    def n_channels(self) -> int:
        return self.positions.size

    @property
    def n_intervals(self) -> int:
        return self.edges.size - 1

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def window(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def counts(self) -> np.ndarray:
        return self.flow * self.durations / HOUR

    def detector_positions(self) -> np.ndarray:
        return np.unique(self.positions)

    def missing(self, quantity: str) -> np.ndarray:
        return np.isnan(getattr(self, quantity))

    def is_empty(self) -> bool:
        """True when no quantity has a single present cell."""
        return all(np.isnan(getattr(self, q)).all() for q in ("flow", "speed", "occupancy"))

    def same_geometry(self, other: "MeasurementGrid") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.lanes, other.lanes)
            and np.allclose(self.edges, other.edges, rtol=0, atol=1e-9)
        )

    def equals(self, other: "MeasurementGrid") -> bool:
        return self.same_geometry(other) and all(
            np.array_equal(getattr(self, q), getattr(other, q), equal_nan=True)
            for q in ("flow", "speed", "occupancy")
        )

    def copy(self) -> "MeasurementGrid":
        return MeasurementGrid(
            self.positions.copy(), self.lanes.copy(), self.edges.copy(), self.flow.copy(),
            self.speed.copy(), self.occupancy.copy(), self.names,
            self.w_flow.copy(), self.w_speed.copy(), self.w_occ.copy(),
        )

    def cross_section(self):
        """Lane-combined values per detector position.

        Returns ``(positions, flow_per_lane, speed)`` with shapes ``(n_pos,)``,
        ``(n_pos, n_int)``: the lane-averaged flow (veh/h/lane) and the
        count-weighted speed across lanes. Missing lanes are excluded.
        """
        pos = self.detector_positions()
        q = np.full((pos.size, self.n_intervals), np.nan)
        v = np.full_like(q, np.nan)
        for k, p in enumerate(pos):
            sel = self.positions == p
            fq = self.flow[sel]
            have_q = ~np.isnan(fq)
            nq = have_q.sum(axis=0)
            q[k] = np.where(nq > 0, np.nansum(fq, axis=0) / np.maximum(nq, 1), np.nan)
            fv, wv = self.speed[sel], self.w_speed[sel]
            wv = np.where(np.isnan(fv), 0.0, wv)
            wsum = wv.sum(axis=0)
            v[k] = np.where(wsum > 0, np.nansum(np.nan_to_num(fv) * wv, axis=0) / np.where(wsum > 0, wsum, 1), np.nan)
        return pos, q, v


def _crossings(traj: TrajectoryLog, position: float):
    j0, j1 = traj.segments()
    x0, x1 = traj.position[j0], traj.position[j1]
    hit = (x0 < position) & (x1 >= position)
    j0, j1, x0, x1 = j0[hit], j1[hit], x0[hit], x1[hit]
    frac = (position - x0) / (x1 - x0)
    t0, t1 = traj.time[j0], traj.time[j1]
    t = t0 + frac * (t1 - t0)
    v = traj.speed[j0] + frac * (traj.speed[j1] - traj.speed[j0])
    # a vehicle that crossed cannot have been standing: fall back to the segment mean speed
    v = np.where(v > 0, v, (x1 - x0) / (t1 - t0))
    return t, v, traj.lane[j1]


def simulate_detectors(traj: TrajectoryLog, specs, horizon: float, lanes=None,
                       domain: tuple | None = None) -> MeasurementGrid:
    """Point-detector measurements over ``[0, horizon]`` for each spec.

    ``lanes`` maps a spec to its lane tuple when ``spec.lanes`` is empty (use
    ``ScenarioConfig.detector_lanes``). ``domain`` is the longitudinal extent
    the trajectories cover; positions outside it are rejected. All specs must
    share one aggregation window.
    """
    specs = list(specs)
    if not specs:
        raise ValidationError("detectors", "at least one detector is required")
    windows = {float(s.window) for s in specs}
    if len(windows) != 1:
        raise ValidationError("detectors.window", "all detectors must share one aggregation window")
    if domain is None and not traj.is_empty():
        domain = (0.0, float(traj.position.max()))
    if domain is not None:
        for s in specs:
            if not domain[0] <= s.position <= domain[1]:
                raise ValidationError(f"detectors.{s.name}.position",
                                      f"{s.position} m outside trajectory domain [{domain[0]}, {domain[1]}]")
    edges = interval_edges(horizon, windows.pop())
    dur = np.diff(edges)
    positions, lane_ids, names, rows = [], [], [], []
    for s in specs:
        lane_set = tuple(s.lanes) if s.lanes else tuple(lanes(s) if callable(lanes) else ())
        if not lane_set:
            raise ValidationError(f"detectors.{s.name}.lanes", "no lanes given or derivable")
        t, v, ln = _crossings(traj, s.position)
        interval = np.searchsorted(edges, t, side="left") - 1
        keep = (interval >= 0) & (interval < dur.size)
        t, v, ln, interval = t[keep], v[keep], ln[keep], interval[keep]
        for lane in lane_set:
            sel = ln == lane
            n = np.bincount(interval[sel], minlength=dur.size).astype(float)
            vsum = np.bincount(interval[sel], weights=v[sel], minlength=dur.size)
            occ_time = np.bincount(interval[sel], weights=traj.length / v[sel], minlength=dur.size)
            with np.errstate(invalid="ignore", divide="ignore"):
                speed = np.where(n > 0, vsum / n, np.nan)
                occ = np.where(n > 0, np.minimum(100.0, 100.0 * occ_time / dur), np.nan)
            positions.append(s.position)
            lane_ids.append(lane)
            names.append(f"{s.name}/lane{lane}")
            rows.append((n * HOUR / dur, speed, occ))
    flow, speed, occ = (np.array([r[k] for r in rows]) for k in range(3))
    return MeasurementGrid(positions, lane_ids, edges, flow, speed, occ, tuple(names))


def detect(traj: TrajectoryLog, scenario) -> MeasurementGrid:
    """Measurements for all detectors of ``scenario``."""
    return simulate_detectors(traj, scenario.detectors, scenario.horizon,
                              lanes=scenario.detector_lanes, domain=(0.0, scenario.network.length))


# -- CSV ------------------------------------------------------------------------

def _fmt(value: float) -> str:
    return "" if np.isnan(value) else repr(float(value))


def write_measurements_csv(grid: MeasurementGrid, path_or_buf) -> None:
    """One row per channel per interval; ``time_s`` is the interval end."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        fh.write(",".join(MEASUREMENT_COLUMNS) + "\n")
        for c in range(grid.n_channels):
            for k in range(grid.n_intervals):
                fh.write(f"{float(grid.edges[k + 1])!r},{float(grid.positions[c])!r},{grid.lanes[c]},"
                         f"{_fmt(grid.flow[c, k])},{_fmt(grid.speed[c, k])},{_fmt(grid.occupancy[c, k])}\n")
    finally:
        if own:
            fh.close()


def measurements_to_csv(grid: MeasurementGrid) -> str:
    buf = io.StringIO()
    write_measurements_csv(grid, buf)
    return buf.getvalue()


def _cell(text, column, line):
    text = text.strip()
    if not text:
        return np.nan
    try:
        value = float(text)
    except ValueError as exc:
        raise ParseError(f"line {line}: {column} is not a number: {text!r}") from exc
    if not math.isfinite(value):
        raise ParseError(f"line {line}: {column} must be finite")
    return value


def parse_measurements(text: str) -> MeasurementGrid:
    """Parse the measurement CSV schema (see :data:`MEASUREMENT_COLUMNS`)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != MEASUREMENT_COLUMNS:
        raise ParseError(f"expected columns {', '.join(MEASUREMENT_COLUMNS)}")
    records = []
    for line, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(MEASUREMENT_COLUMNS):
            raise ParseError(f"line {line}: expected {len(MEASUREMENT_COLUMNS)} fields, got {len(row)}")
        t, x = (_cell(row[i], MEASUREMENT_COLUMNS[i], line) for i in (0, 1))
        if np.isnan(t) or np.isnan(x):
            raise ParseError(f"line {line}: time_s and position_m are required")
        try:
            lane = int(row[2])
        except ValueError as exc:
            raise ParseError(f"line {line}: lane must be an integer") from exc
        values = [_cell(row[i], MEASUREMENT_COLUMNS[i], line) for i in (3, 4, 5)]
        records.append((t, x, lane, *values, line))
    if not records:
        raise ValidationError("measurements", "file contains no rows")

    channels = list(dict.fromkeys((r[1], r[2]) for r in records))
    last = {}
    for r in records:
        key = (r[1], r[2])
        if key in last and r[0] <= last[key]:
            raise ValidationError("time_s", f"line {r[6]}: interval end times must increase per detector lane")
        last[key] = r[0]
    ends = np.unique([r[0] for r in records])
    if ends[0] <= 0:
        raise ValidationError("time_s", "interval end times must be positive")
    first = ends[0] - (ends[1] - ends[0]) if ends.size > 1 else 0.0
    edges = np.concatenate([[max(first, 0.0)], ends])
    shape = (len(channels), ends.size)
    data = [np.full(shape, np.nan) for _ in range(3)]
    index = {key: c for c, key in enumerate(channels)}
    for r in records:
        c, k = index[(r[1], r[2])], int(np.searchsorted(ends, r[0]))
        for arr, value in zip(data, r[3:6]):
            arr[c, k] = value
    return MeasurementGrid([c[0] for c in channels], [c[1] for c in channels], edges, *data)


def ingest_measurements(path) -> MeasurementGrid:
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    try:
        return parse_measurements(text)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


# -- aggregation ----------------------------------------------------------------

def _combine(values, weights, groups, n_groups):
    present = ~np.isnan(values)
    w = np.where(present, weights, 0.0)
    num = np.zeros((values.shape[0], n_groups))
    den = np.zeros_like(num)
    np.add.at(num.T, groups, (np.where(present, values, 0.0) * w).T)
    np.add.at(den.T, groups, w.T)
    out = np.full_like(num, np.nan)
    np.divide(num, den, out=out, where=den > 0)
    return out, den


def aggregate(grid: MeasurementGrid, window: float) -> MeasurementGrid:
    """Re-aggregate to a coarser window that is an integer multiple of the current one.

    Flow and occupancy are time-weighted means, speed is count-weighted;
    missing sub-cells are skipped. A trailing partial interval is kept.
    """
    ratio = window / grid.window
    m = int(round(ratio))
    if m < 1 or abs(ratio - m) > 1e-9:
        raise ValidationError("window", f"{window} s is not an integer multiple of {grid.window} s")
    if m == 1:
        return grid.copy()
    groups = np.arange(grid.n_intervals) // m
    n_groups = int(groups[-1]) + 1
    edges = np.append(grid.edges[:-1:m], grid.edges[-1])
    flow, wq = _combine(grid.flow, grid.w_flow, groups, n_groups)
    occ, wo = _combine(grid.occupancy, grid.w_occ, groups, n_groups)
    speed, wv = _combine(grid.speed, grid.w_speed, groups, n_groups)
    return MeasurementGrid(grid.positions.copy(), grid.lanes.copy(), edges, flow, speed,
                           np.clip(occ, 0.0, 100.0), grid.names, wq, wv, wo)


__all__ = [
    "MEASUREMENT_COLUMNS", "MeasurementGrid", "aggregate", "detect", "ingest_measurements",
    "interval_edges", "measurements_to_csv", "parse_measurements", "simulate_detectors",
    "write_measurements_csv",
]
