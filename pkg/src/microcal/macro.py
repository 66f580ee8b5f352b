"""Spatiotemporal traffic fields: Edie's generalized definitions and ASM.

Fields are arrays of shape ``(n_t, n_x)`` (time rows, space columns). Internal
units are SI and per lane: flow veh/s/lane, density veh/m/lane, speed m/s.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .microsim.trajectory import TrajectoryLog
from .sensing import MeasurementGrid
from .units import HOUR, MILE, MPH

FIELD_COLUMNS = ("t_s", "x_m", "q_vphpl", "rho_vpmpl", "v_mph", "valid")


def _edges(extent: float, step: float, origin: float = 0.0) -> np.ndarray:
    n = int(math.ceil(extent / step - 1e-9))
    edges = origin + np.arange(n + 1) * step
    edges[-1] = origin + extent
    return edges


@dataclass(frozen=True)
class GridSpec:
    """Cells of ``dx`` x ``dt`` over ``[x0, x0+length] x [t0, t0+horizon]``.

    When a cell size does not divide the extent the last cell is shorter.
    """

    length: float
    horizon: float
    dx: float
    dt: float
    x0: float = 0.0
    t0: float = 0.0

    def __post_init__(self):
        for name in ("length", "horizon", "dx", "dt"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"grid.{name}", "must be positive")

    @property
    def x_edges(self) -> np.ndarray:
        return _edges(self.length, self.dx, self.x0)

    @property
    def t_edges(self) -> np.ndarray:
        return _edges(self.horizon, self.dt, self.t0)

    @property
    def shape(self):
        return self.t_edges.size - 1, self.x_edges.size - 1

    @property
    def x_centers(self) -> np.ndarray:
        e = self.x_edges
        return 0.5 * (e[1:] + e[:-1])

    @property
    def t_centers(self) -> np.ndarray:
        e = self.t_edges
        return 0.5 * (e[1:] + e[:-1])

    def areas(self) -> np.ndarray:
        return np.outer(np.diff(self.t_edges), np.diff(self.x_edges))

    def matches(self, other: "GridSpec") -> bool:
        return (self.shape == other.shape
                and np.allclose(self.x_edges, other.x_edges, rtol=0, atol=1e-6)
                and np.allclose(self.t_edges, other.t_edges, rtol=0, atol=1e-6))


@dataclass(eq=False)
class MacroField:
    """Flow, density and space-mean speed per cell, per lane.

    ``lanes`` holds the lane count used to normalize each column (all ones for
    a total field). ``distance``/``time_spent`` are Edie's raw totals when the
    field came from trajectories, else None. Invalid cells carry NaN speed.
    """

    grid: GridSpec
    flow: np.ndarray
    density: np.ndarray
    speed: np.ndarray
    valid: np.ndarray
    lanes: np.ndarray
    distance: np.ndarray | None = None
    time_spent: np.ndarray | None = None

    def quantity(self, name: str) -> np.ndarray:
        return {"flow": self.flow, "density": self.density, "speed": self.speed}[name]

    def coarsen(self, fx: int, ft: int) -> "MacroField":
        """Merge ``ft`` x ``fx`` blocks by summing Edie totals (requires divisible shapes)."""
        if self.distance is None:
            raise ValueError("coarsening needs the Edie distance and time totals")
        n_t, n_x = self.grid.shape
        if n_t % ft or n_x % fx:
            raise ValueError("block factors must divide the grid shape")
        if np.any(self.lanes.reshape(n_x // fx, fx) != self.lanes.reshape(n_x // fx, fx)[:, :1]):
            raise ValueError("lane count varies inside a merged block")
        grid = GridSpec(self.grid.length, self.grid.horizon, self.grid.dx * fx, self.grid.dt * ft,
                        self.grid.x0, self.grid.t0)
        d = self.distance.reshape(n_t // ft, ft, n_x // fx, fx).sum(axis=(1, 3))
        t = self.time_spent.reshape(n_t // ft, ft, n_x // fx, fx).sum(axis=(1, 3))
        return _edie_from_totals(grid, d, t, self.lanes[::fx].copy())


def _edie_from_totals(grid: GridSpec, d, t, lanes) -> MacroField:
    norm = grid.areas() * lanes[None, :]
    valid = t > 0
    speed = np.full(d.shape, np.nan)
    np.divide(d, t, out=speed, where=valid)
    return MacroField(grid, d / norm, t / norm, speed, valid, np.asarray(lanes, dtype=float), d, t)


def _lane_column(lanes, grid: GridSpec) -> np.ndarray:
    centers = grid.x_centers
    if lanes is None:
        return np.ones(centers.size)
    if callable(lanes):
        return np.asarray(lanes(centers), dtype=float) * np.ones(centers.size)
    return np.asarray(lanes, dtype=float) * np.ones(centers.size)


def edie_fields(traj: TrajectoryLog, grid: GridSpec, lanes=None) -> MacroField:
    """Edie flow, density and space-mean speed on ``grid``.

    Each trajectory segment (linear between consecutive samples) is split at
    the cell boundaries it crosses. ``lanes`` is a lane-count function of
    position (e.g. ``RoadNetwork.lane_count``), a constant, or None for a
    total (not per-lane) field.
    """
    xe, te = grid.x_edges, grid.t_edges
    n_t, n_x = grid.shape
    d_tot = np.zeros(n_t * n_x)
    t_tot = np.zeros(n_t * n_x)
    j0, j1 = traj.segments()
    x0, x1 = traj.position[j0], traj.position[j1]
    t0, t1 = traj.time[j0], traj.time[j1]
    inside = (np.maximum(x0, x1) > xe[0]) & (np.minimum(x0, x1) < xe[-1]) & (t1 > te[0]) & (t0 < te[-1])
    x0, x1, t0, t1 = x0[inside], x1[inside], t0[inside], t1[inside]
    if x0.size:
        # fractions along each segment where it meets a cell boundary
        lo_x, hi_x = np.minimum(x0, x1), np.maximum(x0, x1)
        kx0 = np.searchsorted(xe, lo_x, side="right")
        nx = np.searchsorted(xe, hi_x, side="left") - kx0
        kt0 = np.searchsorted(te, t0, side="right")
        nt = np.searchsorted(te, t1, side="left") - kt0
        width = int(max(nx.max(initial=0), 0) + max(nt.max(initial=0), 0))
        fr = np.full((x0.size, width + 2), np.nan)
        fr[:, 0], fr[:, 1] = 0.0, 1.0
        col = 2
        dx_seg, dt_seg = x1 - x0, t1 - t0
        for k in range(int(nx.max(initial=0))):
            has = nx > k
            e = xe[np.minimum(kx0 + k, xe.size - 1)]
            with np.errstate(invalid="ignore", divide="ignore"):
                fr[has, col] = ((e - x0) / dx_seg)[has]
            col += 1
        for k in range(int(nt.max(initial=0))):
            has = nt > k
            e = te[np.minimum(kt0 + k, te.size - 1)]
            fr[has, col] = ((e - t0) / dt_seg)[has]
            col += 1
        fr.sort(axis=1)  # NaN padding sorts last
        a, b = fr[:, :-1], fr[:, 1:]
        ok = ~np.isnan(b) & (b > a)
        seg = np.broadcast_to(np.arange(x0.size)[:, None], a.shape)[ok]
        a, b = a[ok], b[ok]
        mid = 0.5 * (a + b)
        xm = x0[seg] + mid * dx_seg[seg]
        tm = t0[seg] + mid * dt_seg[seg]
        ix = np.searchsorted(xe, xm, side="right") - 1
        it = np.searchsorted(te, tm, side="right") - 1
        keep = (ix >= 0) & (ix < n_x) & (it >= 0) & (it < n_t)
        cell = it[keep] * n_x + ix[keep]
        span = (b - a)[keep]
        d_tot = np.bincount(cell, weights=np.abs(dx_seg[seg][keep]) * span, minlength=n_t * n_x)
        t_tot = np.bincount(cell, weights=dt_seg[seg][keep] * span, minlength=n_t * n_x)
    return _edie_from_totals(grid, d_tot.reshape(n_t, n_x), t_tot.reshape(n_t, n_x), _lane_column(lanes, grid))


# -- adaptive smoothing -----------------------------------------------------------

@dataclass(frozen=True)
class AsmParams:
    """Adaptive smoothing settings (m, s, m/s).

    ``sigma`` / ``tau`` of None resolve to half the mean detector spacing and
    half the input aggregation window. ``truncate`` limits the kernel support
    to that many widths (plus the wave shift); None keeps every input.
    """

    c_free: float = 21.4
    c_cong: float = -4.5
    sigma: float | None = None
    tau: float | None = None
    v_thr: float = 15.6
    dv: float = 4.5
    truncate: float | None = None

    def __post_init__(self):
        # free waves normally run downstream and congested ones upstream; only a zero
        # speed is meaningless, and equal speeds give a plain symmetric smoother
        for name in ("c_free", "c_cong"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value != 0):
                raise ValidationError(f"asm.{name}", "must be finite and non-zero")
        for name in ("sigma", "tau", "truncate"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValidationError(f"asm.{name}", "must be positive")
        if not self.dv > 0:
            raise ValidationError("asm.dv", "must be positive")

    def resolved(self, grid_in: MeasurementGrid) -> "AsmParams":
        sigma, tau = self.sigma, self.tau
        if sigma is None:
            pos = grid_in.detector_positions()
            sigma = 0.5 * float(np.mean(np.diff(pos))) if pos.size > 1 else SINGLE_DETECTOR_SIGMA
        if tau is None:
            tau = 0.5 * grid_in.window
        return AsmParams(self.c_free, self.c_cong, sigma, tau, self.v_thr, self.dv, self.truncate)


SINGLE_DETECTOR_SIGMA = 100.0  # m, spatial width when spacing is undefined
_CHUNK = 4096


def _kernel_average(xs, ts, values, targets_x, targets_t, c, sigma, tau, truncate):
    """Normalized kernel average of ``values`` at every target point.

    Exponents are shifted by their per-target maximum so the weights never
    underflow to all zeros.
    """
    out = np.empty(targets_x.size)
    for lo in range(0, targets_x.size, _CHUNK):
        tx = targets_x[lo:lo + _CHUNK, None]
        tt = targets_t[lo:lo + _CHUNK, None]
        ddx = tx - xs[None, :]
        ddt = tt - ts[None, :]
        lag = np.abs(ddt - ddx / c)
        expo = -np.abs(ddx) / sigma - lag / tau
        if truncate is not None:
            expo = np.where((np.abs(ddx) <= truncate * sigma) & (lag <= truncate * tau), expo, -np.inf)
        peak = expo.max(axis=1, keepdims=True)
        w = np.where(np.isfinite(peak), np.exp(expo - np.where(np.isfinite(peak), peak, 0.0)), 0.0)
        wsum = w.sum(axis=1)
        avg = np.full(tx.shape[0], np.nan)
        np.divide(w @ values, wsum, out=avg, where=wsum > 0)
        out[lo:lo + _CHUNK] = avg
    return out


def _asm_inputs(grid_in: MeasurementGrid):
    pos, q, v = grid_in.cross_section()
    t_mid = 0.5 * (grid_in.edges[1:] + grid_in.edges[:-1])
    xs = np.repeat(pos, t_mid.size)
    ts = np.tile(t_mid, pos.size)
    return xs, ts, q.ravel() / HOUR, v.ravel()


def asm_kernel_averages(grid_in: MeasurementGrid, grid: GridSpec, p: AsmParams = AsmParams()) -> dict:
    """Free-flow and congested kernel averages of flow and speed on ``grid``.

    Returns ``{"flow_free", "flow_cong", "speed_free", "speed_cong"}`` arrays of
    shape ``grid.shape`` (flow in veh/s/lane).
    """
    p = p.resolved(grid_in)
    xs, ts, q, v = _asm_inputs(grid_in)
    tt, xx = np.meshgrid(grid.t_centers, grid.x_centers, indexing="ij")
    out = {}
    for name, values in (("flow", q), ("speed", v)):
        have = ~np.isnan(values)
        if not have.any():
            raise ValidationError(f"asm.{name}", "every input cell is missing")
        for regime, c in (("free", p.c_free), ("cong", p.c_cong)):
            avg = _kernel_average(xs[have], ts[have], values[have], xx.ravel(), tt.ravel(),
                                  c, p.sigma, p.tau, p.truncate)
            out[f"{name}_{regime}"] = avg.reshape(grid.shape)
    return out


def asm_reconstruct(grid_in: MeasurementGrid, grid: GridSpec, p: AsmParams = AsmParams(),
                    lanes=None) -> MacroField:
    """Adaptive smoothing of lane-averaged detector data onto ``grid``.

    Each detector position contributes one input per interval (flow averaged
    over lanes, speed count-weighted), placed at the interval midpoint. The
    result is per lane; ``lanes`` only annotates the field.
    """
    k = asm_kernel_averages(grid_in, grid, p)
    p = p.resolved(grid_in)
    v_min = np.fmin(k["speed_free"], k["speed_cong"])
    w = 0.5 * (1.0 + np.tanh((p.v_thr - v_min) / p.dv))
    flow = w * k["flow_cong"] + (1.0 - w) * k["flow_free"]
    speed = w * k["speed_cong"] + (1.0 - w) * k["speed_free"]
    valid = np.isfinite(speed) & (speed > 0) & np.isfinite(flow)
    density = np.full(flow.shape, np.nan)
    np.divide(flow, speed, out=density, where=valid)
    return MacroField(grid, flow, density, np.where(valid, speed, np.nan), valid, _lane_column(lanes, grid))


def density_from_grid(grid: MeasurementGrid) -> np.ndarray:
    """Per-cell density (veh/m) as ``q / v``; NaN where speed is missing or zero."""
    ok = ~np.isnan(grid.speed) & (grid.speed > 0) & ~np.isnan(grid.flow)
    rho = np.full(grid.shape, np.nan)
    np.divide(grid.flow / HOUR, grid.speed, out=rho, where=ok)
    return rho


# -- CSV ----------------------------------------------------------------------------

def write_field_csv(field: MacroField, path_or_buf) -> None:
    """Rows ordered by time then space, at cell centers, in reporting units."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    tc, xc = field.grid.t_centers, field.grid.x_centers
    try:
        fh.write(",".join(FIELD_COLUMNS) + "\n")
        for i, t in enumerate(tc):
            for j, x in enumerate(xc):
                ok = bool(field.valid[i, j])
                q = float(field.flow[i, j] * HOUR)
                rho = float(field.density[i, j] * MILE)
                v = float(field.speed[i, j] / MPH) if ok else math.nan
                fh.write(f"{float(t)!r},{float(x)!r},{q!r},{rho!r},{v!r},{int(ok)}\n")
    finally:
        if own:
            fh.close()


def _edges_from_centers(c: np.ndarray) -> np.ndarray:
    first = c[0] - (c[1] - c[0]) / 2 if c.size > 1 else 0.0
    edges = [first]
    for x in c:
        edges.append(2 * x - edges[-1])
    return np.array(edges)


def parse_field_csv(text: str) -> MacroField:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != FIELD_COLUMNS:
        raise ParseError(f"expected columns {', '.join(FIELD_COLUMNS)}")
    rows = [r for r in reader if r]
    if not rows:
        raise ParseError("field file has no rows")
    try:
        data = np.array(rows, dtype=float)
    except ValueError as exc:
        raise ParseError("non-numeric field value") from exc
    tc, xc = np.unique(data[:, 0]), np.unique(data[:, 1])
    if data.shape[0] != tc.size * xc.size:
        raise ParseError("field rows do not form a complete grid")
    order = np.lexsort((data[:, 1], data[:, 0]))
    data = data[order]
    te, xe = _edges_from_centers(tc), _edges_from_centers(xc)
    dx = xe[1] - xe[0]
    dt = te[1] - te[0]
    grid = GridSpec(xe[-1] - xe[0], te[-1] - te[0], dx, dt, xe[0], te[0])
    shape = (tc.size, xc.size)
    valid = data[:, 5].reshape(shape) > 0.5
    speed = np.where(valid, data[:, 4].reshape(shape) * MPH, np.nan)
    return MacroField(grid, data[:, 2].reshape(shape) / HOUR, data[:, 3].reshape(shape) / MILE,
                      speed, valid, np.ones(xc.size))


def read_field_csv(path) -> MacroField:
    try:
        with open(path, newline="") as fh:
            return parse_field_csv(fh.read())
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc


__all__ = [
    "AsmParams", "FIELD_COLUMNS", "GridSpec", "MacroField", "asm_kernel_averages", "asm_reconstruct",
    "density_from_grid", "edie_fields", "parse_field_csv", "read_field_csv", "write_field_csv",
]
