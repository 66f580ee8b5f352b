"""Scenario definitions: parameters, network, demand, detectors.

Scenario files are INI-style text (see ``docs/scenario_format.md``). All units
in the files are SI except demand rates, which are veh/h.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

CF_NAMES = ("vf", "sj", "tau", "a", "b")
LC_NAMES = ("lc_strategic", "lc_cooperative", "lc_assertive", "lc_speed_gain", "lc_keep_right")
PARAM_NAMES = CF_NAMES + LC_NAMES

MAINLINE = "mainline"


@dataclass(frozen=True)
class ParameterSet:
    """Behavioural parameters shared by every vehicle of a run."""

    vf: float  # free-flow speed [m/s]
    sj: float  # jam space gap [m]
    tau: float  # desired time headway [s]
    a: float  # maximum acceleration [m/s^2]
    b: float  # desired deceleration [m/s^2]
    lc_strategic: float = 1.0
    lc_cooperative: float = 1.0
    lc_assertive: float = 1.0
    lc_speed_gain: float = 1.0
    lc_keep_right: float = 1.0
    delta: float = 4.0

    def __post_init__(self):
        for name in PARAM_NAMES + ("delta",):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValidationError(name, f"must be a finite number, got {value!r}")
        for name in CF_NAMES:
            if getattr(self, name) <= 0:
                raise ValidationError(name, "must be positive")
        for name in LC_NAMES:
            if getattr(self, name) < 0:
                raise ValidationError(name, "must be non-negative")
        if self.lc_cooperative > 1:
            raise ValidationError("lc_cooperative", "must lie in [0, 1]")
        if self.delta != 4.0:
            raise ValidationError("delta", "the acceleration exponent is fixed at 4")

    def replace(self, **changes) -> "ParameterSet":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return {name: float(getattr(self, name)) for name in PARAM_NAMES}

    def vector(self, names=PARAM_NAMES) -> np.ndarray:
        return np.array([getattr(self, n) for n in names], dtype=float)

    def packed(self) -> np.ndarray:
        """Layout consumed by the compiled simulation kernels."""
        return np.array(
            [self.vf, self.sj, self.tau, self.a, self.b, self.delta,
             self.lc_strategic, self.lc_cooperative, self.lc_assertive,
             self.lc_speed_gain, self.lc_keep_right],
            dtype=float,
        )


@dataclass(frozen=True)
class ParameterBounds:
    """Closed search interval per parameter plus the set of free parameters."""

    intervals: dict
    free: tuple = PARAM_NAMES

    def __post_init__(self):
        for name in PARAM_NAMES:
            if name not in self.intervals:
                raise ValidationError(f"bounds.{name}", "missing interval")
            lo, hi = self.intervals[name]
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValidationError(f"bounds.{name}", "interval must be finite")
            if name in self.free and not lo < hi:
                raise ValidationError(f"bounds.{name}", f"lower {lo} must be below upper {hi}")
        unknown = set(self.free) - set(PARAM_NAMES)
        if unknown:
            raise ValidationError("bounds.free", f"unknown parameters {sorted(unknown)}")

    def with_free(self, names) -> "ParameterBounds":
        return ParameterBounds(self.intervals, tuple(names))

    def box(self, names=None) -> list:
        names = self.free if names is None else names
        return [tuple(self.intervals[n]) for n in names]

    def contains(self, params: ParameterSet, names=None) -> bool:
        names = self.free if names is None else names
        return all(self.intervals[n][0] <= getattr(params, n) <= self.intervals[n][1] for n in names)


# Calibration ranges for the synthetic corridor. The deceleration range is widened
# to 4.5 so that the uncalibrated default lies inside the box.
DEFAULT_BOUNDS = ParameterBounds({
    "vf": (30.0, 35.0),
    "sj": (1.0, 3.0),
    "tau": (0.5, 2.0),
    "a": (1.0, 4.0),
    "b": (1.0, 4.5),
    "lc_strategic": (0.0, 5.0),
    "lc_cooperative": (0.0, 1.0),
    "lc_assertive": (0.0, 5.0),
    "lc_speed_gain": (0.0, 5.0),
    "lc_keep_right": (0.0, 5.0),
})


@dataclass(frozen=True)
class OnRamp:
    merge_start: float
    merge_end: float
    accel_lane: int = 0


@dataclass(frozen=True)
class OffRamp:
    position: float
    exit_lane: int = 0


@dataclass(frozen=True)
class RoadNetwork:
    """A single mainline with right-hand acceleration lanes and off-ramps.

    Lane indices are local to a position with 0 the rightmost lane. Inside a
    merge zone the acceleration lane is lane 0 and mainline lanes shift up by one.
    """

    length: float
    lane_breaks: tuple  # start positions of constant lane-count sections, first is 0
    lane_counts: tuple
    onramps: tuple = ()
    offramps: tuple = ()

    def __post_init__(self):
        if not self.length > 0:
            raise ValidationError("network.length", "must be positive")
        if len(self.lane_breaks) != len(self.lane_counts) or not self.lane_breaks:
            raise ValidationError("network.lanes", "need one lane count per section")
        if self.lane_breaks[0] != 0:
            raise ValidationError("network.lanes", "first section must start at 0")
        if any(b2 <= b1 for b1, b2 in zip(self.lane_breaks, self.lane_breaks[1:])):
            raise ValidationError("network.lanes", "section starts must increase")
        if self.lane_breaks[-1] >= self.length:
            raise ValidationError("network.lanes", "section start beyond network end")
        if any(c < 1 for c in self.lane_counts):
            raise ValidationError("network.lanes", "lane counts must be >= 1")
        zones = sorted((r.merge_start, r.merge_end) for r in self.onramps)
        for k, r in enumerate(self.onramps):
            name = f"network.onramp{k}"
            if not 0 < r.merge_start < r.merge_end <= self.length:
                raise ValidationError(name, "need 0 < merge_start < merge_end <= length")
            if r.accel_lane != 0:
                raise ValidationError(name, "only right-hand acceleration lanes (lane 0) are supported")
        for (s1, e1), (s2, e2) in zip(zones, zones[1:]):
            if s2 < e1:
                raise ValidationError("network.onramps", "merge zones overlap")
        n_main = self.lane_counts[0]
        for k, r in enumerate(self.offramps):
            name = f"network.offramp{k}"
            if not 0 < r.position <= self.length:
                raise ValidationError(name, "diverge position outside the network")
            if not 0 <= r.exit_lane < n_main:
                raise ValidationError(name, "exit lane must be a mainline lane")
            if any(s <= r.position < e for s, e in zones):
                raise ValidationError(name, "diverge inside a merge zone is not supported")
        # lane-count function must equal mainline lanes plus active acceleration lanes
        probes = sorted(set(self.lane_breaks) | {p for z in zones for p in z})
        for x in probes:
            if x >= self.length:
                continue
            expected = n_main + int(any(s <= x < e for s, e in zones))
            if self.lane_count(x) != expected:
                raise ValidationError(
                    "network.lanes",
                    f"lane count {self.lane_count(x)} at {x} m inconsistent with ramps (expected {expected})",
                )

    @property
    def n_main(self) -> int:
        return self.lane_counts[0]

    def lane_count(self, x):
        idx = np.searchsorted(np.asarray(self.lane_breaks, dtype=float), x, side="right") - 1
        counts = np.asarray(self.lane_counts)[np.clip(idx, 0, None)]
        return int(counts) if np.ndim(counts) == 0 else counts

    def in_merge_zone(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape, dtype=bool)
        for r in self.onramps:
            out |= (x >= r.merge_start) & (x < r.merge_end)
        return out

    def zone_arrays(self):
        starts = np.array([r.merge_start for r in self.onramps], dtype=float)
        ends = np.array([r.merge_end for r in self.onramps], dtype=float)
        return starts, ends

    def offramp_arrays(self):
        pos = np.array([r.position for r in self.offramps], dtype=float)
        # mainline lanes are 1..n_main in the kernels' global numbering
        lanes = np.array([r.exit_lane + 1 for r in self.offramps], dtype=np.int64)
        return pos, lanes


@dataclass(frozen=True)
class DemandProfile:
    """Piecewise-constant arrival rates per origin and destination splits.

    ``rates`` maps an origin id (``"mainline"``, ``"onramp0"``, ...) to per-bin
    rates in veh/h; ``splits`` maps an origin to ``{destination: fraction}``.
    """

    bin_width: float
    rates: dict
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ValidationError("demand.bin_width", "must be positive")
        lengths = {len(r) for r in self.rates.values()}
        if len(lengths) > 1:
            raise ValidationError("demand", "all origins need the same number of bins")
        for origin, rates in self.rates.items():
            for k, r in enumerate(rates):
                if not math.isfinite(r) or r < 0:
                    raise ValidationError(f"demand.{origin}[{k}]", f"rate {r} veh/h must be >= 0")
        for origin, split in self.splits.items():
            if origin not in self.rates:
                raise ValidationError(f"demand.split.{origin}", "unknown origin")
            for dest, frac in split.items():
                if not 0 <= frac <= 1:
                    raise ValidationError(f"demand.split.{origin}.{dest}", "fraction must be in [0, 1]")
            if abs(sum(split.values()) - 1.0) > 1e-9:
                raise ValidationError(f"demand.split.{origin}", "fractions must sum to 1")

    @property
    def n_bins(self) -> int:
        return len(next(iter(self.rates.values()), ()))

    @property
    def origins(self) -> tuple:
        return tuple(self.rates)

    def split(self, origin) -> dict:
        return self.splits.get(origin, {MAINLINE: 1.0})


@dataclass(frozen=True)
class DetectorSpec:
    name: str
    position: float
    lanes: tuple = ()  # empty: every lane present at the position
    window: float = 50.0


@dataclass(frozen=True)
class ScenarioConfig:
    network: RoadNetwork
    demand: DemandProfile
    detectors: tuple
    horizon: float
    dt: float
    seed: int
    defaults: ParameterSet
    vehicle_length: float = 5.0
    ground_truth: ParameterSet | None = None
    bounds: ParameterBounds = DEFAULT_BOUNDS
    name: str = "scenario"

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValidationError("simulation.horizon", "must be positive")
        if not 0 < self.dt <= 0.5:
            raise ValidationError("simulation.dt", "must lie in (0, 0.5]")
        if not self.vehicle_length > 0:
            raise ValidationError("simulation.vehicle_length", "must be positive")
        n_steps = self.horizon / self.dt
        if abs(n_steps - round(n_steps)) > 1e-6:
            raise ValidationError("simulation.dt", "must divide the horizon")
        if self.demand.n_bins:
            covered = self.demand.n_bins * self.demand.bin_width
            if abs(covered - self.horizon) > 1e-6:
                raise ValidationError("demand.bin_width", f"bins cover {covered} s, horizon is {self.horizon} s")
        n_ramps = len(self.network.onramps)
        for origin in self.demand.origins:
            if origin == MAINLINE:
                continue
            if not origin.startswith("onramp") or not origin[6:].isdigit() or int(origin[6:]) >= n_ramps:
                raise ValidationError(f"demand.{origin}", "origin does not match a network on-ramp")
        n_off = len(self.network.offramps)
        for origin in self.demand.origins:
            for dest in self.demand.split(origin):
                if dest != MAINLINE and not (dest.startswith("offramp") and dest[7:].isdigit() and int(dest[7:]) < n_off):
                    raise ValidationError(f"demand.split.{origin}", f"unknown destination {dest!r}")
        names = set()
        for det in self.detectors:
            key = f"detectors.{det.name}"
            if det.name in names:
                raise ValidationError(key, "duplicate detector name")
            names.add(det.name)
            if not 0 <= det.position <= self.network.length:
                raise ValidationError(f"{key}.position", f"{det.position} m outside [0, {self.network.length}]")
            if not det.window > 0:
                raise ValidationError(f"{key}.window", "must be positive")
            n_lanes = self.network.lane_count(min(det.position, self.network.length - 1e-9))
            if any(not 0 <= lane < n_lanes for lane in det.lanes):
                raise ValidationError(f"{key}.lanes", f"lane index outside 0..{n_lanes - 1}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def detector_lanes(self, det: DetectorSpec) -> tuple:
        if det.lanes:
            return tuple(det.lanes)
        return tuple(range(self.network.lane_count(min(det.position, self.network.length - 1e-9))))

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


# -- arrivals -----------------------------------------------------------------

def _origin_key(origin: str) -> int:
    return zlib.crc32(origin.encode())


def sample_arrivals(demand: DemandProfile, origin: str, seed: int) -> list:
    """Poisson insertion times (s) for one origin, sorted, deterministic in ``seed``."""
    if origin not in demand.rates:
        raise KeyError(f"unknown origin {origin!r}")
    rng = np.random.default_rng([int(seed), _origin_key(origin)])
    times = []
    for k, rate in enumerate(demand.rates[origin]):
        start = k * demand.bin_width
        n = rng.poisson(rate / 3600.0 * demand.bin_width)
        times.append(start + np.sort(rng.random(n)) * demand.bin_width)
    if not times:
        return []
    return np.concatenate(times).tolist()


def sample_destinations(demand: DemandProfile, origin: str, n: int, seed: int) -> list:
    """Destination id for each of ``n`` arrivals of ``origin``."""
    split = demand.split(origin)
    dests = sorted(split)
    probs = np.array([split[d] for d in dests])
    rng = np.random.default_rng([int(seed), _origin_key(origin), 1])
    idx = rng.choice(len(dests), size=n, p=probs / probs.sum()) if n else np.array([], dtype=int)
    return [dests[i] for i in idx]


# -- file format --------------------------------------------------------------

def _floats(text, key):
    try:
        return tuple(float(t) for t in text.replace(",", " ").split())
    except ValueError as exc:
        raise ParseError(f"{key}: expected numbers, got {text!r}") from exc


def _float(text, key):
    try:
        return float(text)
    except ValueError as exc:
        raise ParseError(f"{key}: expected a number, got {text!r}") from exc


def _keyvals(text, key):
    out = {}
    for token in text.split():
        if "=" not in token:
            raise ParseError(f"{key}: expected name=value tokens, got {token!r}")
        k, v = token.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _parse_params(section, key) -> ParameterSet:
    known = set(PARAM_NAMES) | {"delta"}
    values = {}
    for name, text in section.items():
        if name not in known:
            raise ParseError(f"[{key}] unknown parameter {name!r}")
        values[name] = _float(text, f"{key}.{name}")
    missing = [n for n in CF_NAMES if n not in values]
    if missing:
        raise ParseError(f"[{key}] missing parameters {missing}")
    return ParameterSet(**values)


def parse_scenario(text: str, name: str = "scenario") -> ScenarioConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParseError(f"malformed scenario file: {exc}") from exc
    for sec in ("network", "demand", "detectors", "simulation", "defaults"):
        if not cp.has_section(sec):
            raise ParseError(f"missing section [{sec}]")

    net = cp["network"]
    if "length" not in net or "lanes" not in net:
        raise ParseError("[network] needs 'length' and 'lanes'")
    breaks, counts = [], []
    for part in net["lanes"].split(","):
        try:
            x, c = part.split(":")
            breaks.append(float(x))
            counts.append(int(c))
        except ValueError as exc:
            raise ParseError(f"network.lanes: bad section {part.strip()!r}") from exc
    onramps, offramps = [], []
    for k in range(100):
        if f"onramp{k}" in net:
            kv = _keyvals(net[f"onramp{k}"], f"network.onramp{k}")
            try:
                onramps.append(OnRamp(float(kv["merge_start"]), float(kv["merge_end"]), int(kv.get("lane", 0))))
            except (KeyError, ValueError) as exc:
                raise ParseError(f"network.onramp{k}: need merge_start, merge_end[, lane]") from exc
        if f"offramp{k}" in net:
            kv = _keyvals(net[f"offramp{k}"], f"network.offramp{k}")
            try:
                offramps.append(OffRamp(float(kv["position"]), int(kv.get("lane", 0))))
            except (KeyError, ValueError) as exc:
                raise ParseError(f"network.offramp{k}: need position[, lane]") from exc
    network = RoadNetwork(
        _float(net["length"], "network.length"), tuple(breaks), tuple(counts),
        tuple(onramps), tuple(offramps),
    )

    dem = cp["demand"]
    if "bin_width" not in dem:
        raise ParseError("[demand] needs 'bin_width'")
    rates, splits = {}, {}
    for key, text in dem.items():
        if key == "bin_width":
            continue
        if key.startswith("split."):
            origin = key[len("split."):]
            split = {}
            for part in text.split(","):
                try:
                    dest, frac = part.split(":")
                    split[dest.strip()] = float(frac)
                except ValueError as exc:
                    raise ParseError(f"demand.{key}: expected dest:fraction list") from exc
            splits[origin] = split
        else:
            rates[key] = _floats(text, f"demand.{key}")
    demand = DemandProfile(_float(dem["bin_width"], "demand.bin_width"), rates, splits)

    detectors = []
    for det_name, text in cp["detectors"].items():
        kv = _keyvals(text, f"detectors.{det_name}")
        if "position" not in kv:
            raise ParseError(f"detectors.{det_name}: missing position")
        lanes = tuple(int(t) for t in kv.get("lanes", "").replace(",", " ").split())
        detectors.append(DetectorSpec(
            det_name, _float(kv["position"], f"detectors.{det_name}.position"),
            lanes, _float(kv.get("window", "50"), f"detectors.{det_name}.window"),
        ))

    sim = cp["simulation"]
    for key in ("horizon", "dt", "seed"):
        if key not in sim:
            raise ParseError(f"[simulation] missing {key!r}")
    try:
        seed = int(sim["seed"])
    except ValueError as exc:
        raise ParseError("simulation.seed: expected an integer") from exc

    ground_truth = _parse_params(cp["ground_truth"], "ground_truth") if cp.has_section("ground_truth") else None
    bounds = DEFAULT_BOUNDS
    if cp.has_section("bounds"):
        intervals = dict(DEFAULT_BOUNDS.intervals)
        for key, text in cp["bounds"].items():
            if key not in PARAM_NAMES:
                raise ParseError(f"[bounds] unknown parameter {key!r}")
            lohi = _floats(text, f"bounds.{key}")
            if len(lohi) != 2:
                raise ParseError(f"bounds.{key}: expected 'lower, upper'")
            intervals[key] = lohi
        bounds = ParameterBounds(intervals)

    return ScenarioConfig(
        network=network,
        demand=demand,
        detectors=tuple(detectors),
        horizon=_float(sim["horizon"], "simulation.horizon"),
        dt=_float(sim["dt"], "simulation.dt"),
        seed=seed,
        defaults=_parse_params(cp["defaults"], "defaults"),
        vehicle_length=_float(sim.get("vehicle_length", "5.0"), "simulation.vehicle_length"),
        ground_truth=ground_truth,
        bounds=bounds,
        name=sim.get("name", name),
    )


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return parse_scenario(text, name=path.stem)


def _params_lines(params: ParameterSet) -> list:
    return [f"{n} = {getattr(params, n)!r}" for n in PARAM_NAMES]


def serialize_scenario(cfg: ScenarioConfig) -> str:
    net = cfg.network
    lines = ["[network]", f"length = {net.length!r}",
             "lanes = " + ", ".join(f"{b!r}:{c}" for b, c in zip(net.lane_breaks, net.lane_counts))]
    for k, r in enumerate(net.onramps):
        lines.append(f"onramp{k} = merge_start={r.merge_start!r} merge_end={r.merge_end!r} lane={r.accel_lane}")
    for k, r in enumerate(net.offramps):
        lines.append(f"offramp{k} = position={r.position!r} lane={r.exit_lane}")
    lines += ["", "[demand]", f"bin_width = {cfg.demand.bin_width!r}"]
    for origin, rates in cfg.demand.rates.items():
        lines.append(f"{origin} = " + ", ".join(repr(float(r)) for r in rates))
    for origin, split in cfg.demand.splits.items():
        lines.append(f"split.{origin} = " + ", ".join(f"{d}:{f!r}" for d, f in split.items()))
    lines += ["", "[detectors]"]
    for det in cfg.detectors:
        lanes = f" lanes={','.join(str(l) for l in det.lanes)}" if det.lanes else ""
        lines.append(f"{det.name} = position={det.position!r}{lanes} window={det.window!r}")
    lines += ["", "[simulation]", f"name = {cfg.name}", f"horizon = {cfg.horizon!r}", f"dt = {cfg.dt!r}",
              f"seed = {cfg.seed}", f"vehicle_length = {cfg.vehicle_length!r}"]
    lines += ["", "[defaults]"] + _params_lines(cfg.defaults)
    if cfg.ground_truth is not None:
        lines += ["", "[ground_truth]"] + _params_lines(cfg.ground_truth)
    lines += ["", "[bounds]"]
    lines += [f"{n} = {lo!r}, {hi!r}" for n, (lo, hi) in cfg.bounds.intervals.items()]
    return "\n".join(lines) + "\n"


def save_scenario(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(serialize_scenario(cfg))


def parse_params(text: str) -> ParameterSet:
    """Read a parameter file: a single ``[params]`` section of ``name = value``."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParseError(f"malformed parameter file: {exc}") from exc
    if not cp.has_section("params"):
        raise ParseError("missing section [params]")
    return _parse_params(cp["params"], "params")


def serialize_params(params: ParameterSet) -> str:
    return "\n".join(["[params]"] + _params_lines(params)) + "\n"


SYNTHETIC_MERGE_FILE = "synthetic_merge.cfg"


def build_synthetic_merge() -> ScenarioConfig:
    """The 1300 m two-lane corridor with an on-ramp merge over 800-1100 m."""
    text = resources.files("microcal.data").joinpath(SYNTHETIC_MERGE_FILE).read_text()
    return parse_scenario(text, name="synthetic_merge")
