"""Calibration experiments: objective construction, DE runs and dual-RMSE reports.

Experiment labels combine a parameter family (1 = car following, 2 = lane
change, 3 = both) with the calibration quantity (a = flow, b = speed,
c = occupancy), e.g. ``"3.b"``.
"""

from __future__ import annotations

import configparser
import json
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError
from .macro import GridSpec, MacroField, edie_fields
from .metrics import Quantity, objective, report_unit, rmse_detectors, rmse_macro
from .microsim import run
from .optimizer import DEConfig, OptResult, differential_evolution
from .scenario import CF_NAMES, LC_NAMES, PARAM_NAMES, ParameterSet, ScenarioConfig
from .sensing import MeasurementGrid, detect

SUBSETS = {"CF": CF_NAMES, "LC": LC_NAMES, "CF+LC": PARAM_NAMES}
_FAMILY_OF = {"1": "CF", "2": "LC", "3": "CF+LC"}
_QUANTITY_OF = {"a": Quantity.FLOW, "b": Quantity.SPEED, "c": Quantity.OCCUPANCY}
LABELS = tuple(f"{f}.{q}" for f in "123" for q in "abc")
REPORT_QUANTITIES = (Quantity.FLOW, Quantity.SPEED, Quantity.DENSITY)
MACRO_DX = 10.0  # m
MACRO_DT = 10.0  # s


def parse_label(label: str):
    """``"2.c"`` -> ``("LC", Quantity.OCCUPANCY)``."""
    try:
        family, letter = label.split(".")
        return _FAMILY_OF[family], _QUANTITY_OF[letter]
    except (ValueError, KeyError):
        raise ValidationError("experiment", f"unknown label {label!r}; expected one of {', '.join(LABELS)}") from None


def label_for(subset: str, quantity) -> str:
    family = {v: k for k, v in _FAMILY_OF.items()}[subset]
    letter = {v: k for k, v in _QUANTITY_OF.items()}[Quantity.parse(quantity)]
    return f"{family}.{letter}"


def cell_seed(seed: int, label: str) -> int:
    """Independent DE seed per experiment cell, derived from a base seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(label.encode())]).generate_state(1)[0])


@dataclass
class ExperimentSpec:
    """One calibration cell.

    ``calib_seed`` is the demand seed used for every candidate evaluation and
    for the final re-simulation; it defaults to the scenario seed + 1, i.e. a
    demand realization different from the one that produced ``observed``.
    """

    label: str
    scenario: ScenarioConfig
    observed: MeasurementGrid
    de: DEConfig = DEConfig()
    validation: MacroField | None = None
    calib_seed: int | None = None
    data_seed: int | None = None

    def __post_init__(self):
        self.subset, self.quantity = parse_label(self.label)
        if self.observed.n_channels == 0 or self.observed.n_intervals == 0:
            raise ValidationError("observed", "measurement grid is empty")
        if self.calib_seed is None:
            self.calib_seed = self.scenario.seed + 1
        if self.data_seed is None:
            self.data_seed = self.scenario.seed

    @property
    def names(self) -> tuple:
        return SUBSETS[self.subset]

    @property
    def bounds(self) -> list:
        return self.scenario.bounds.box(self.names)

    def params_for(self, vector) -> ParameterSet:
        return params_from_vector(self.scenario.defaults, self.names, vector)


def params_from_vector(base: ParameterSet, names, vector) -> ParameterSet:
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (len(names),):
        raise ValidationError("vector", f"expected {len(names)} values for {', '.join(names)}")
    return base.replace(**{n: float(x) for n, x in zip(names, vector)})


class Objective:
    """Detector RMSE of the free-parameter vector; other parameters stay at defaults."""

    def __init__(self, spec: ExperimentSpec):
        self.scenario = spec.scenario
        self.observed = spec.observed
        self.quantity = spec.quantity
        self.names = spec.names
        self.base = spec.scenario.defaults
        self.seed = spec.calib_seed

    def params(self, vector) -> ParameterSet:
        return params_from_vector(self.base, self.names, vector)

    def __call__(self, vector) -> float:
        return objective(self.observed, self.scenario, self.params(vector), self.quantity, self.seed)


def make_objective(spec: ExperimentSpec) -> Objective:
    return Objective(spec)


@dataclass
class CalibrationReport:
    label: str
    subset: str
    quantity: str
    params: ParameterSet | None
    result: OptResult | None
    detector: dict = field(default_factory=dict)  # quantity symbol -> RMSE in reporting units
    macro: dict = field(default_factory=dict)
    baseline_detector: dict = field(default_factory=dict)
    baseline_macro: dict = field(default_factory=dict)
    data_seed: int = 0
    calib_seed: int = 0
    trivial: bool = False
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


# -- evaluation -----------------------------------------------------------------------

def validation_grid(scenario: ScenarioConfig) -> GridSpec:
    return GridSpec(scenario.network.length, scenario.horizon, MACRO_DX, MACRO_DT)


def _safe(fn, *args):
    try:
        return fn(*args)
    except ValidationError as exc:
        if exc.field == "overlap":
            return math.nan
        raise


def evaluate_params(scenario: ScenarioConfig, params: ParameterSet, observed: MeasurementGrid,
                    validation: MacroField | None, seed: int):
    """Detector and macro RMSE triples (q, v, rho) of one re-simulation."""
    traj = run(scenario, params, seed)
    sim = detect(traj, scenario)
    det = {z.symbol: _safe(rmse_detectors, observed, sim, z) for z in REPORT_QUANTITIES}
    mac = {}
    if validation is not None:
        field_ = edie_fields(traj, validation.grid, scenario.network.lane_count)
        mac = {z.symbol: _safe(rmse_macro, validation, field_, z) for z in REPORT_QUANTITIES}
    return det, mac


def _has_traffic(grid: MeasurementGrid) -> bool:
    return bool(np.nansum(grid.flow) > 0 or (~np.isnan(grid.speed)).any())


def _trivial_report(spec: ExperimentSpec) -> CalibrationReport:
    zeros = {z.symbol: 0.0 for z in REPORT_QUANTITIES}
    mac = dict(zeros) if spec.validation is not None else {}
    return CalibrationReport(spec.label, spec.subset, spec.quantity.value, spec.scenario.defaults, None,
                             dict(zeros), dict(mac), dict(zeros), dict(mac),
                             spec.data_seed, spec.calib_seed, trivial=True)


class _RunLog:
    def __init__(self, path):
        self.fh = open(path, "w") if path else None

    def write(self, **record):
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def run_experiment(spec: ExperimentSpec, baseline=None, log_path=None, ledger_path=None) -> CalibrationReport:
    """Calibrate one cell and evaluate calibrated and default parameters.

    The DE population always contains the default vector, so the calibrated
    objective never exceeds the default one. ``baseline`` may pass a
    precomputed ``(detector, macro)`` pair for the defaults.
    """
    log = _RunLog(log_path)
    try:
        log.write(event="start", label=spec.label, subset=spec.subset, quantity=spec.quantity.value,
                  free=list(spec.names), data_seed=spec.data_seed, calib_seed=spec.calib_seed,
                  pop_size=spec.de.pop_size, max_generations=spec.de.max_generations, de_seed=spec.de.seed)
        if not _has_traffic(spec.observed):
            report = _trivial_report(spec)
            log.write(event="trivial", label=spec.label)
            return report
        f = make_objective(spec)
        x_default = spec.scenario.defaults.vector(spec.names)

        def progress(gen, x, fx):
            log.write(event="generation", generation=gen, best=fx, x=[float(v) for v in x])

        result = differential_evolution(f, spec.bounds, spec.de, x0=x_default, ledger=ledger_path,
                                        callback=progress)
        params = spec.params_for(result.x)
        det, mac = evaluate_params(spec.scenario, params, spec.observed, spec.validation, spec.calib_seed)
        if baseline is None:
            baseline = evaluate_params(spec.scenario, spec.scenario.defaults, spec.observed,
                                       spec.validation, spec.calib_seed)
        report = CalibrationReport(spec.label, spec.subset, spec.quantity.value, params, result, det, mac,
                                   dict(baseline[0]), dict(baseline[1]), spec.data_seed, spec.calib_seed)
        log.write(event="done", label=spec.label, objective=result.fun, generations=result.generations,
                  evaluations=result.evaluations, converged=result.converged, params=params.as_dict(),
                  detector=det, macro=mac)
        return report
    finally:
        log.close()


def _failed(label, spec_seed, calib_seed, exc) -> CalibrationReport:
    subset, quantity = parse_label(label)
    return CalibrationReport(label, subset, quantity.value, None, None, data_seed=spec_seed,
                             calib_seed=calib_seed, error=f"{type(exc).__name__}: {exc}")


def _matrix_cell(args):
    label, scenario, observed, de, validation, calib_seed, baseline, log_dir = args
    try:
        spec = ExperimentSpec(label, scenario, observed, de, validation, calib_seed)
        log_path = os.path.join(log_dir, f"{label}_log.jsonl") if log_dir else None
        return run_experiment(spec, baseline, log_path)
    except Exception as exc:  # partial-failure policy: record and continue
        return _failed(label, scenario.seed, calib_seed, exc)


def run_matrix(scenario: ScenarioConfig, observed: MeasurementGrid, de: DEConfig = DEConfig(),
               validation: MacroField | None = None, labels=LABELS, overrides: dict | None = None,
               calib_seed: int | None = None, jobs: int = 1, log_dir=None) -> list:
    """Run the labelled cells; a failing cell yields a report with ``error`` set.

    Each cell's DE seed derives from ``de.seed`` and its label. With
    ``jobs > 1`` cells run in separate processes and their evaluations are
    serial, so results do not depend on ``jobs``.
    """
    if observed.n_channels == 0 or observed.n_intervals == 0:
        raise ValidationError("observed", "measurement grid is empty")
    labels = list(labels)
    for label in labels:
        parse_label(label)
    overrides = overrides or {}
    calib_seed = scenario.seed + 1 if calib_seed is None else calib_seed
    baseline = None
    if _has_traffic(observed):
        baseline = evaluate_params(scenario, scenario.defaults, observed, validation, calib_seed)
    cells = []
    for label in labels:
        cfg = de.replace(seed=cell_seed(de.seed, label), **overrides.get(label, {}))
        if jobs > 1:
            cfg = cfg.replace(workers=1)
        cells.append((label, scenario, observed, cfg, validation, calib_seed, baseline, log_dir))
    if jobs <= 1:
        return [_matrix_cell(c) for c in cells]
    import multiprocessing as mp

    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(min(jobs, len(cells)), mp_context=ctx) as pool:
        return list(pool.map(_matrix_cell, cells))


def twin_data(scenario: ScenarioConfig, params: ParameterSet | None = None, seed: int | None = None):
    """Synthetic observations: ``(trajectory, detector grid, Edie validation field)``."""
    params = scenario.ground_truth if params is None else params
    if params is None:
        raise ValidationError("ground_truth", "scenario has no ground-truth parameters")
    traj = run(scenario, params, seed)
    return traj, detect(traj, scenario), edie_fields(traj, validation_grid(scenario), scenario.network.lane_count)


# -- output ------------------------------------------------------------------------------

RESULT_COLUMNS = ("experiment", "family", "quantity", "value", "unit")
_UNITS = {z.symbol: report_unit(z) for z in REPORT_QUANTITIES}


def _num(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def _result_rows(name, detector, macro):
    rows = []
    for family, values in (("detector", detector), ("macro", macro)):
        for sym in ("q", "v", "rho"):
            if sym in values:
                rows.append((name, family, sym, _num(values[sym]), _UNITS[sym]))
    return rows


def results_csv(reports) -> str:
    """Long-format table: default-parameter rows first, then each experiment."""
    rows = [",".join(RESULT_COLUMNS)]
    base = next((r for r in reports if r.ok), None)
    if base is not None:
        rows += [",".join(r) for r in _result_rows("default", base.baseline_detector, base.baseline_macro)]
    for rep in reports:
        if rep.ok:
            rows += [",".join(r) for r in _result_rows(rep.label, rep.detector, rep.macro)]
        else:
            rows += [",".join((rep.label, fam, sym, "", _UNITS[sym])) for fam in ("detector", "macro")
                     for sym in ("q", "v", "rho")]
    return "\n".join(rows) + "\n"


REPORT_COLUMNS = ("section", "name", "value", "unit")


def report_csv(rep: CalibrationReport) -> str:
    """Everything about one cell: metadata, parameters and both RMSE families."""
    res = rep.result
    meta = [
        ("label", rep.label, ""), ("subset", rep.subset, ""), ("quantity", rep.quantity, ""),
        ("data_seed", str(rep.data_seed), ""), ("calib_seed", str(rep.calib_seed), ""),
        ("objective", _num(res.fun) if res else "", report_unit(rep.quantity)),
        ("generations", str(res.generations) if res else "", ""),
        ("evaluations", str(res.evaluations) if res else "", ""),
        ("converged", str(res.converged).lower() if res else "", ""),
        ("trivial", str(rep.trivial).lower(), ""),
        ("error", (rep.error or "").replace(",", ";").replace("\n", " "), ""),
    ]
    lines = [",".join(REPORT_COLUMNS)]
    lines += [f"meta,{n},{v},{u}" for n, v, u in meta]
    if rep.params is not None:
        free = set(SUBSETS[rep.subset])
        for name, value in rep.params.as_dict().items():
            if name in PARAM_NAMES:
                lines.append(f"{'param' if name in free else 'fixed'},{name},{_num(value)},")
    for section, values in (("detector", rep.detector), ("macro", rep.macro),
                            ("default_detector", rep.baseline_detector), ("default_macro", rep.baseline_macro)):
        for sym in ("q", "v", "rho"):
            if sym in values:
                lines.append(f"{section},{sym},{_num(values[sym])},{_UNITS[sym]}")
    return "\n".join(lines) + "\n"


# -- manifest ---------------------------------------------------------------------------

_DE_FIELDS = {"pop_size": int, "F": float, "CR": float, "max_generations": int, "tol": float,
              "seed": int, "workers": int}


def _de_overrides(section, where) -> dict:
    out = {}
    for key, text in section.items():
        if key not in _DE_FIELDS:
            raise ParseError(f"{where}: unknown DE setting {key!r}")
        try:
            out[key] = _DE_FIELDS[key](text)
        except ValueError as exc:
            raise ParseError(f"{where}.{key}: {exc}") from exc
    return out


def parse_manifest(text: str):
    """``(base DEConfig, labels, per-label overrides)`` from a manifest.

    Format: an optional ``[de]`` section with DEConfig fields, then one
    ``[experiment <label>]`` section per cell, optionally with overrides.
    """
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParseError(f"manifest: {exc}") from exc
    base = DEConfig(**_de_overrides(cp["de"], "de")) if cp.has_section("de") else DEConfig()
    labels, overrides = [], {}
    for name in cp.sections():
        if name == "de":
            continue
        kind, _, label = name.partition(" ")
        if kind != "experiment":
            raise ParseError(f"manifest: unknown section [{name}]")
        parse_label(label)
        labels.append(label)
        ov = _de_overrides(cp[name], name)
        if ov:
            base.replace(**ov)  # validate
            overrides[label] = ov
    return base, labels or list(LABELS), overrides


def manifest_text(de: DEConfig, labels=LABELS, overrides: dict | None = None) -> str:
    overrides = overrides or {}
    lines = ["[de]"] + [f"{k} = {getattr(de, k)}" for k in _DE_FIELDS] + [""]
    for label in labels:
        lines.append(f"[experiment {label}]")
        lines += [f"{k} = {v}" for k, v in overrides.get(label, {}).items()]
        lines.append("")
    return "\n".join(lines)


__all__ = [
    "CalibrationReport", "ExperimentSpec", "LABELS", "Objective", "REPORT_QUANTITIES", "SUBSETS",
    "cell_seed", "evaluate_params", "label_for", "make_objective", "manifest_text", "params_from_vector",
    "parse_label", "parse_manifest", "report_csv", "results_csv", "run_experiment", "run_matrix",
    "twin_data", "validation_grid",
]
