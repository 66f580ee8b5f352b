"""Command-line interface: ``microcal <subcommand> ...``.

Exit codes: 0 success, 1 invalid input (bad flags, unreadable or invalid
files), 2 runtime fault (simulation fault, unwritable output).
"""

from __future__ import annotations

import argparse
import io
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .calibrate import (
    LABELS, ExperimentSpec, evaluate_params, manifest_text, parse_manifest, report_csv, results_csv,
    run_experiment, run_matrix, validation_grid,
)
from .errors import ParseError, SimulationFault, ValidationError
from .heatmap import SCALES, ppm_bytes, render
from .macro import FIELD_COLUMNS, AsmParams, GridSpec, asm_reconstruct, edie_fields, parse_field_csv, write_field_csv
from .metrics import Quantity
from .microsim import read_trajectory_csv, run, write_trajectory_csv
from .optimizer import DEConfig
from .scenario import build_synthetic_merge, load_scenario, parse_params, serialize_params
from .sensing import aggregate, detect, ingest_measurements, write_measurements_csv

BUILTIN = "builtin:synthetic-merge"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- file helpers ---------------------------------------------------------------

def atomic_write(path, data) -> None:
    """Write text or bytes via a temporary file in the target directory, then rename."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _render(writer, obj, **kw) -> str:
    buf = io.StringIO()
    writer(obj, buf, **kw)
    return buf.getvalue()


def _out_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _scenario(text):
    return build_synthetic_merge() if text == BUILTIN else load_scenario(text)


def _params(text, scenario):
    if text in (None, "default"):
        return scenario.defaults
    if text == "ground_truth":
        if scenario.ground_truth is None:
            raise ValidationError("params", "scenario has no [ground_truth] section")
        return scenario.ground_truth
    try:
        return parse_params(Path(text).read_text())
    except OSError as exc:
        raise ParseError(f"cannot read {text}: {exc}") from exc


def _validation(path, scenario):
    """Validation field from a trajectory CSV (via Edie) or a field CSV."""
    if path is None:
        return None
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if text.split("\n", 1)[0].strip() == ",".join(FIELD_COLUMNS):
        return parse_field_csv(text)
    traj = read_trajectory_csv(path, scenario.vehicle_length)
    return edie_fields(traj, validation_grid(scenario), scenario.network.lane_count)


def _de_config(args, base: DEConfig = DEConfig()) -> DEConfig:
    changes = {k: getattr(args, k) for k in ("pop_size", "F", "CR", "max_generations", "tol", "workers")
               if getattr(args, k) is not None}
    if args.de_seed is not None:
        changes["seed"] = args.de_seed
    return base.replace(**changes)


# -- subcommands -----------------------------------------------------------------

def cmd_simulate(args):
    if args.decimate < 1:
        raise ValidationError("decimate", "must be at least 1")
    scenario = _scenario(args.scenario)
    traj = run(scenario, _params(args.params, scenario), args.seed)
    atomic_write(args.out, _render(write_trajectory_csv, traj, decimate=args.decimate))


def cmd_detect(args):
    scenario = _scenario(args.scenario)
    traj = read_trajectory_csv(args.traj, scenario.vehicle_length)
    grid = detect(traj, scenario)
    if args.window is not None:
        grid = aggregate(grid, args.window)
    atomic_write(args.out, _render(write_measurements_csv, grid))


def cmd_edie(args):
    scenario = _scenario(args.scenario)
    traj = read_trajectory_csv(args.traj, scenario.vehicle_length)
    grid = GridSpec(scenario.network.length, scenario.horizon, args.dx, args.dt)
    lanes = None if args.total else scenario.network.lane_count
    atomic_write(args.out, _render(write_field_csv, edie_fields(traj, grid, lanes)))


def cmd_asm(args):
    obs = ingest_measurements(args.obs)
    if args.scenario:
        scenario = _scenario(args.scenario)
        x0, length = 0.0, scenario.network.length
    else:
        pos = obs.detector_positions()
        x0, length = float(pos.min()), float(pos.max() - pos.min())
    if args.length is not None:
        length = args.length
    if not length > 0:
        raise ValidationError("length", "spatial extent is empty; pass --length or --scenario")
    t0 = float(obs.edges[0])
    grid = GridSpec(length, float(obs.edges[-1]) - t0, args.dx, args.dt, x0, t0)
    p = AsmParams(args.c_free, args.c_cong, args.sigma, args.tau, args.v_thr, args.dv_width, args.truncate)
    atomic_write(args.out, _render(write_field_csv, asm_reconstruct(obs, grid, p)))


def _spec_kwargs(args, scenario):
    obs = ingest_measurements(args.obs)
    return obs, _validation(args.validation, scenario)


def cmd_calibrate(args):
    scenario = _scenario(args.scenario)
    obs, validation = _spec_kwargs(args, scenario)
    out = _out_dir(args.out)
    spec = ExperimentSpec(args.experiment, scenario, obs, _de_config(args), validation, args.calib_seed)
    log = out / f"{args.experiment}_log.jsonl"
    ledger = out / f"{args.experiment}_evaluations.csv" if args.ledger else None
    if ledger is not None and ledger.exists():
        ledger.unlink()
    rep = run_experiment(spec, log_path=log, ledger_path=ledger)
    atomic_write(out / f"{rep.label}_report.csv", report_csv(rep))
    atomic_write(out / f"{rep.label}_params.cfg", serialize_params(rep.params))


def cmd_matrix(args):
    scenario = _scenario(args.scenario)
    obs, validation = _spec_kwargs(args, scenario)
    out = _out_dir(args.out)
    base, labels, overrides = DEConfig(), list(LABELS), {}
    if args.manifest:
        try:
            base, labels, overrides = parse_manifest(Path(args.manifest).read_text())
        except OSError as exc:
            raise ParseError(f"cannot read {args.manifest}: {exc}") from exc
    de = _de_config(args, base)
    reports = run_matrix(scenario, obs, de, validation, labels, overrides, args.calib_seed, args.jobs, out)
    for rep in reports:
        atomic_write(out / f"{rep.label}_report.csv", report_csv(rep))
    atomic_write(out / "results.csv", results_csv(reports))
    atomic_write(out / "manifest.cfg", manifest_text(de, labels, overrides))
    failed = [r for r in reports if not r.ok]
    for rep in failed:
        print(f"microcal: experiment {rep.label} failed: {rep.error}", file=sys.stderr)
    if failed and len(failed) == len(reports):
        raise SimulationFault("every experiment failed")


def cmd_evaluate(args):
    scenario = _scenario(args.scenario)
    obs, validation = _spec_kwargs(args, scenario)
    seed = scenario.seed + 1 if args.seed is None else args.seed
    det, mac = evaluate_params(scenario, _params(args.params, scenario), obs, validation, seed)
    lines = ["family,quantity,value,unit"]
    units = {"q": "vph", "v": "mph", "rho": "vpm"}
    for family, values in (("detector", det), ("macro", mac)):
        for sym, value in values.items():
            lines.append(f"{family},{sym},{'' if value != value else repr(float(value))},{units[sym]}")
    atomic_write(args.out, "\n".join(lines) + "\n")


def cmd_heatmap(args):
    if args.pixels < 1:
        raise ValidationError("pixels", "must be at least 1")
    try:
        field = parse_field_csv(Path(args.field).read_text())
    except OSError as exc:
        raise ParseError(f"cannot read {args.field}: {exc}") from exc
    quantities = list(SCALES) if args.quantity == "all" else [Quantity.parse(args.quantity)]
    if any(q not in SCALES for q in quantities):
        raise ValidationError("quantity", "heatmaps exist for speed, flow and density")
    out = Path(args.out)
    if out.suffix.lower() != ".ppm" or len(quantities) > 1:
        out = _out_dir(out)
    for q in quantities:
        target = out / f"{q.value}_heatmap.ppm" if out.is_dir() else out
        atomic_write(target, ppm_bytes(render(field, q, args.pixels)))


# -- parser ----------------------------------------------------------------------------

def _add_scenario(p, required=True):
    p.add_argument("--scenario", required=required, metavar="PATH",
                   help=f"scenario file, or {BUILTIN} for the bundled merge corridor")


def _add_de(p):
    g = p.add_argument_group("differential evolution")
    g.add_argument("--pop-size", dest="pop_size", type=int, help="population size (default 15)")
    g.add_argument("--generations", dest="max_generations", type=int, help="maximum generations (default 100)")
    g.add_argument("--tol", type=float, help="relative spread of population objectives that stops a run (default 0.01)")
    g.add_argument("--F", dest="F", type=float, help="differential weight (default 0.8)")
    g.add_argument("--CR", dest="CR", type=float, help="crossover rate (default 0.9)")
    g.add_argument("--de-seed", dest="de_seed", type=int, help="optimizer seed (default 0)")
    g.add_argument("--workers", type=int, help="parallel objective evaluations per experiment (default 1)")
    p.add_argument("--calib-seed", dest="calib_seed", type=int,
                   help="demand seed for calibration runs (default: scenario seed + 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="microcal", description="Freeway microsimulation and calibration against detector data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="run the simulator and write a trajectory CSV")
    _add_scenario(p)
    p.add_argument("--params", default="default", metavar="SPEC",
                   help="default, ground_truth, or a parameter file (default: default)")
    p.add_argument("--seed", type=int, help="demand seed (default: scenario seed)")
    p.add_argument("--decimate", type=int, default=1, help="keep every k-th time step (default 1)")
    p.add_argument("--out", required=True, metavar="PATH", help="trajectory CSV to write")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("detect", help="virtual loop detectors over a trajectory CSV")
    _add_scenario(p)
    p.add_argument("--traj", required=True, metavar="PATH", help="trajectory CSV")
    p.add_argument("--window", type=float, help="re-aggregate to this window in seconds")
    p.add_argument("--out", required=True, metavar="PATH", help="measurement CSV to write")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("edie", help="Edie flow/density/speed field from a trajectory CSV")
    _add_scenario(p)
    p.add_argument("--traj", required=True, metavar="PATH", help="trajectory CSV")
    p.add_argument("--dx", type=float, default=10.0, help="cell length in m (default 10)")
    p.add_argument("--dt", type=float, default=10.0, help="cell duration in s (default 10)")
    p.add_argument("--total", action="store_true", help="all-lane totals instead of per-lane values")
    p.add_argument("--out", required=True, metavar="PATH", help="field CSV to write")
    p.set_defaults(func=cmd_edie)

    p = sub.add_parser("asm", help="adaptive smoothing reconstruction from a measurement CSV")
    p.add_argument("--obs", required=True, metavar="PATH", help="measurement CSV")
    _add_scenario(p, required=False)
    p.add_argument("--dx", type=float, required=True, help="cell length in m")
    p.add_argument("--dt", type=float, required=True, help="cell duration in s")
    p.add_argument("--length", type=float, help="spatial extent in m (default: scenario length or detector span)")
    p.add_argument("--c-free", dest="c_free", type=float, default=21.4, help="free-flow wave speed, m/s (default 21.4)")
    p.add_argument("--c-cong", dest="c_cong", type=float, default=-4.5, help="congested wave speed, m/s (default -4.5)")
    p.add_argument("--sigma", type=float, help="spatial kernel width, m (default: half the detector spacing)")
    p.add_argument("--tau", type=float, help="temporal kernel width, s (default: half the input window)")
    p.add_argument("--v-thr", dest="v_thr", type=float, default=15.6, help="crossover speed, m/s (default 15.6)")
    p.add_argument("--dv", dest="dv_width", type=float, default=4.5, help="crossover width, m/s (default 4.5)")
    p.add_argument("--truncate", type=float, help="ignore inputs beyond this many kernel widths")
    p.add_argument("--out", required=True, metavar="PATH", help="field CSV to write")
    p.set_defaults(func=cmd_asm)

    for name, helptext in (("calibrate", "calibrate one experiment cell"),
                           ("matrix", "calibrate every experiment cell")):
        p = sub.add_parser(name, help=helptext)
        _add_scenario(p)
        p.add_argument("--obs", required=True, metavar="PATH", help="observed measurement CSV")
        p.add_argument("--validation", metavar="PATH",
                       help="ground-truth trajectory CSV or field CSV for the macroscopic RMSE")
        if name == "calibrate":
            p.add_argument("--experiment", required=True, choices=LABELS, help="experiment label")
            p.add_argument("--ledger", action="store_true", help="also write every evaluation to a CSV")
        else:
            p.add_argument("--manifest", metavar="PATH", help="experiment manifest with per-cell DE settings")
            p.add_argument("--jobs", type=int, default=1, help="experiments run in parallel (default 1)")
        _add_de(p)
        p.add_argument("--out", required=True, metavar="DIR", help="output directory")
        p.set_defaults(func=cmd_calibrate if name == "calibrate" else cmd_matrix)

    p = sub.add_parser("evaluate", help="detector and macroscopic RMSE of one parameter set")
    _add_scenario(p)
    p.add_argument("--obs", required=True, metavar="PATH", help="observed measurement CSV")
    p.add_argument("--validation", metavar="PATH", help="ground-truth trajectory CSV or field CSV")
    p.add_argument("--params", default="default", metavar="SPEC",
                   help="default, ground_truth, or a parameter file (default: default)")
    p.add_argument("--seed", type=int, help="demand seed (default: scenario seed + 1)")
    p.add_argument("--out", required=True, metavar="PATH", help="report CSV to write")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", help="render a field CSV as PPM images")
    p.add_argument("--field", required=True, metavar="PATH", help="field CSV")
    p.add_argument("--quantity", default="speed", choices=["speed", "flow", "density", "all"],
                   help="quantity to draw (default speed)")
    p.add_argument("--pixels", type=int, default=1, help="pixels per cell side (default 1)")
    p.add_argument("--out", required=True, metavar="PATH",
                   help="directory (writes <quantity>_heatmap.ppm) or .ppm file")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
            raise ValidationError("jobs", "must be at least 1")
        args.func(args)
    except (ParseError, ValidationError) as exc:
        print(f"microcal: {exc}", file=sys.stderr)
        return 1
    except (SimulationFault, OSError) as exc:
        print(f"microcal: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
