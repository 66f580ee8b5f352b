"""Goodness of fit: detector RMSE, macroscopic-field RMSE and the calibration objective."""

from __future__ import annotations

import enum

import numpy as np

from .errors import SimulationFault, ValidationError
from .macro import MacroField, density_from_grid
from .sensing import MeasurementGrid, detect
from .units import HOUR, MILE, MPH

PENALTY = 1e9  # objective value for runs that fault or share no data with the observations


class Quantity(str, enum.Enum):
    FLOW = "flow"
    SPEED = "speed"
    OCCUPANCY = "occupancy"
    DENSITY = "density"

    @classmethod
    def parse(cls, value) -> "Quantity":
        if isinstance(value, cls):
            return value
        aliases = {"q": "flow", "v": "speed", "o": "occupancy", "rho": "density", "k": "density"}
        key = str(value).strip().lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValidationError("quantity", f"unknown quantity {value!r}") from None

    @property
    def symbol(self) -> str:
        return {"flow": "q", "speed": "v", "occupancy": "o", "density": "rho"}[self.value]


# SI value -> reporting unit multiplier and label
_REPORT = {
    Quantity.FLOW: (HOUR, "vph"),
    Quantity.SPEED: (1.0 / MPH, "mph"),
    Quantity.OCCUPANCY: (1.0, "%"),
    Quantity.DENSITY: (MILE, "vpm"),
}
_SI_LABEL = {Quantity.FLOW: "veh/s", Quantity.SPEED: "m/s", Quantity.OCCUPANCY: "%", Quantity.DENSITY: "veh/m"}


def report_unit(z) -> str:
    return _REPORT[Quantity.parse(z)][1]


def detector_values(grid: MeasurementGrid, z) -> np.ndarray:
    """SI values of one quantity on a measurement grid (density via q/v)."""
    z = Quantity.parse(z)
    if z is Quantity.FLOW:
        return grid.flow / HOUR
    if z is Quantity.SPEED:
        return grid.speed
    if z is Quantity.OCCUPANCY:
        return grid.occupancy
    return density_from_grid(grid)


def rmse(obs, sim) -> float:
    """RMSE over cells present in both arrays; ValidationError("overlap") when none do."""
    obs, sim = np.asarray(obs, dtype=float), np.asarray(sim, dtype=float)
    if obs.shape != sim.shape:
        raise ValidationError("geometry", f"shape mismatch {obs.shape} vs {sim.shape}")
    both = ~np.isnan(obs) & ~np.isnan(sim)
    n = int(both.sum())
    if n == 0:
        raise ValidationError("overlap", "no cell is present in both inputs")
    diff = obs[both] - sim[both]
    return float(np.sqrt(np.dot(diff, diff) / n))


def rmse_detectors(obs: MeasurementGrid, sim: MeasurementGrid, z, units: str = "report") -> float:
    """Element-wise RMSE over detector-lane-interval cells present in both grids.

    ``units="report"`` gives vph, mph, % or veh/mile; ``"si"`` keeps SI.
    """
    z = Quantity.parse(z)
    if not obs.same_geometry(sim):
        raise ValidationError("geometry", "grids differ in detectors, lanes or intervals")
    value = rmse(detector_values(obs, z), detector_values(sim, z))
    return value * _REPORT[z][0] if units == "report" else value


def rmse_macro(obs: MacroField, sim: MacroField, z, units: str = "report") -> float:
    """Element-wise RMSE over cells valid in both fields (flow per lane, density per lane)."""
    z = Quantity.parse(z)
    if z is Quantity.OCCUPANCY:
        raise ValidationError("quantity", "occupancy is not defined on macroscopic fields")
    if not obs.grid.matches(sim.grid):
        raise ValidationError("geometry", "fields are defined on different grids")
    a = np.where(obs.valid, obs.quantity(z.value), np.nan)
    b = np.where(sim.valid, sim.quantity(z.value), np.nan)
    value = rmse(a, b)
    return value * _REPORT[z][0] if units == "report" else value


def simulate_measurements(scenario, params, seed=None) -> MeasurementGrid:
    from .microsim import run

    return detect(run(scenario, params, seed), scenario)


def objective(obs: MeasurementGrid, scenario, params, z, seed=None) -> float:
    """Detector RMSE (reporting units) of a simulation with ``params`` against ``obs``.

    Simulation faults and runs without any comparable cell score ``PENALTY``.
    """
    try:
        sim = simulate_measurements(scenario, params, seed)
        return rmse_detectors(obs, sim, z)
    except SimulationFault:
        return PENALTY
    except ValidationError as exc:
        if exc.field == "overlap":
            return PENALTY
        raise


__all__ = [
    "PENALTY", "Quantity", "detector_values", "objective", "report_unit", "rmse", "rmse_detectors",
    "rmse_macro", "simulate_measurements",
]
