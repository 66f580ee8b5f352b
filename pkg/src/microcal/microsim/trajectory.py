"""Trajectory storage and CSV export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ..errors import ParseError

TRAJECTORY_COLUMNS = ("time_s", "vehicle_id", "lane", "position_m", "speed_mps")


@dataclass
class TrajectoryLog:
    """Flat per-sample arrays sorted by (vehicle_id, time).

    ``lane`` is the local lane index (0 = rightmost) at the sampled position.
    Entry and exit times are per vehicle, aligned with ``vehicles``; a vehicle
    still on the network at the horizon has exit time NaN.
    """

    vehicle_id: np.ndarray
    time: np.ndarray
    position: np.ndarray
    lane: np.ndarray
    speed: np.ndarray
    vehicles: np.ndarray
    entry_time: np.ndarray
    exit_time: np.ndarray
    length: float = 5.0
    dt: float | None = None

    def __len__(self):
        return self.vehicle_id.size

    @property
    def n_vehicles(self) -> int:
        return self.vehicles.size

    def is_empty(self) -> bool:
        return self.vehicle_id.size == 0

    def segments(self):
        """Index pairs (j, j+1) of consecutive samples belonging to one vehicle."""
        same = self.vehicle_id[1:] == self.vehicle_id[:-1]
        j = np.nonzero(same)[0]
        return j, j + 1

    def vehicle(self, vid):
        sel = self.vehicle_id == vid
        return self.time[sel], self.position[sel], self.lane[sel], self.speed[sel]

    def equals(self, other: "TrajectoryLog") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f), equal_nan=f in ("exit_time",))
            for f in ("vehicle_id", "time", "position", "lane", "speed", "vehicles", "entry_time", "exit_time")
        )

    @classmethod
    def empty(cls, length=5.0, dt=None):
        f, i = np.zeros(0), np.zeros(0, dtype=np.int64)
        return cls(i, f, f, i, f, i, f, f, length, dt)

    @classmethod
    def from_samples(cls, vehicle_id, time, position, lane, speed, length=5.0, dt=None,
                     exit_time=None):
        """Build a log from unsorted samples; entry is each vehicle's first sample time."""
        vehicle_id = np.asarray(vehicle_id, dtype=np.int64)
        time = np.asarray(time, dtype=float)
        order = np.lexsort((time, vehicle_id))
        vehicle_id = vehicle_id[order]
        time = time[order]
        vehicles, first = np.unique(vehicle_id, return_index=True)
        entry = time[first]
        if exit_time is None:
            exit_time = np.full(vehicles.size, np.nan)
        return cls(
            vehicle_id, time,
            np.asarray(position, dtype=float)[order],
            np.asarray(lane, dtype=np.int64)[order],
            np.asarray(speed, dtype=float)[order],
            vehicles, entry, np.asarray(exit_time, dtype=float), length, dt,
        )


def write_trajectory_csv(log: TrajectoryLog, path_or_buf, decimate: int = 1) -> None:
    """One row per vehicle per kept sample, ordered by time then vehicle."""
    order = np.lexsort((log.vehicle_id, log.time))
    if decimate > 1:
        if log.dt is None:
            raise ValueError("decimation needs the log's time step")
        step = np.rint(log.time[order] / log.dt).astype(np.int64)
        order = order[step % decimate == 0]
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        fh.write(",".join(TRAJECTORY_COLUMNS) + "\n")
        for t, vid, lane, x, v in zip(log.time[order], log.vehicle_id[order], log.lane[order],
                                      log.position[order], log.speed[order]):
            fh.write(f"{t:.3f},{vid},{lane},{x:.6f},{v:.6f}\n")
    finally:
        if own:
            fh.close()


def read_trajectory_csv(path, length=5.0) -> TrajectoryLog:
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != TRAJECTORY_COLUMNS:
        raise ParseError(f"{path}: expected columns {', '.join(TRAJECTORY_COLUMNS)}")
    rows = [r for r in reader if r]
    if not rows:
        return TrajectoryLog.empty(length)
    try:
        data = np.array(rows, dtype=float)
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric trajectory field") from exc
    times = np.unique(data[:, 0])
    dt = float(np.min(np.diff(times))) if times.size > 1 else None
    return TrajectoryLog.from_samples(data[:, 1], data[:, 0], data[:, 3], data[:, 2], data[:, 4],
                                      length=length, dt=dt)
