"""Exception types shared across the package."""


class ParseError(ValueError):
    """A configuration or data file could not be parsed."""


class ValidationError(ValueError):
    """A value violates a documented invariant.

    ``field`` names the offending entry (``"demand.mainline[2]"``,
    ``"detectors.upstream.position"``, ...).
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class SimulationFault(RuntimeError):
    """Unrecoverable inconsistency inside a simulation run (e.g. a collision).

    This signals a logic or integration problem, not bad user input.
    """

    def __init__(self, message, time=None, vehicle_ids=()):
        self.time = time
        self.vehicle_ids = tuple(vehicle_ids)
        super().__init__(message)
