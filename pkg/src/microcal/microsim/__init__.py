"""Discrete-time IDM car-following with motivation-based lane changes."""

from .models import (
    EMERGENCY_DECEL,
    AdjacentLane,
    LaneChangeDecision,
    LeaderContext,
    Neighborhood,
    VehicleState,
    idm_acceleration,
    lane_change_decide,
)
from .trajectory import TrajectoryLog, read_trajectory_csv, write_trajectory_csv
from .world import World, run

__all__ = [
    "EMERGENCY_DECEL", "AdjacentLane", "LaneChangeDecision", "LeaderContext", "Neighborhood",
    "VehicleState", "idm_acceleration", "lane_change_decide", "TrajectoryLog",
    "read_trajectory_csv", "write_trajectory_csv", "World", "run",
]
