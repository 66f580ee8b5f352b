"""Car-following (IDM) and lane-change decision models.

The scalar cores are compiled with numba so that the step kernel and the
public Python wrappers share one implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from ..scenario import MAINLINE, ParameterSet, RoadNetwork

EMERGENCY_DECEL = 8.0  # m/s^2, hard floor on any acceleration
LOOKAHEAD_TIME = 30.0  # s, strategic urgency horizon
LC_COOLDOWN = 5.0  # s between two lane changes of one vehicle
SPEED_GAIN_THRESHOLD = 1.0  # m/s, divided by lc_speed_gain
SPEED_GAIN_SUSTAIN = 3.0  # s the speed-gain incentive must persist
KEEP_RIGHT_THRESHOLD = 0.5  # m/s, multiplied by lc_keep_right
ANTICIPATION_DISTANCE = 100.0  # m, leaders farther than this do not limit anticipated speed

# packed parameter layout, see ParameterSet.packed()
VF, SJ, TAU, A, B, DELTA, LC_S, LC_C, LC_A, LC_SG, LC_KR = range(11)

# neighbour rows: [has_leader, leader_gap, leader_speed, has_follower, follower_gap, follower_speed]
LEFT, RIGHT = 0, 1


@njit(cache=True)
def desired_gap(v, dv, sj, tau, a, b):
    """Desired bumper-to-bumper gap; the dynamic part is floored at zero."""
    return sj + max(0.0, v * tau + v * dv / (2.0 * math.sqrt(a * b)))


@njit(cache=True)
def idm(v, dv, s, has_leader, P):
    acc = 1.0 - (v / P[VF]) ** P[DELTA]
    if has_leader:
        if s <= 0.0:
            return -EMERGENCY_DECEL
        ratio = desired_gap(v, dv, P[SJ], P[TAU], P[A], P[B]) / s
        acc -= ratio * ratio
    return max(P[A] * acc, -EMERGENCY_DECEL)


@njit(cache=True)
def anticipated_speed(has_leader, gap, v_leader, vf):
    if has_leader and gap < ANTICIPATION_DISTANCE:
        return min(vf, v_leader)
    return vf


@njit(cache=True)
def _kinematic_margin(dv):
    # closing distance when braking at the emergency rate
    if dv <= 0.0:
        return 0.0
    return dv * dv / (2.0 * EMERGENCY_DECEL)


@njit(cache=True)
def admissible(v, row, P):
    """Gap acceptance against the target-lane leader and follower in ``row``."""
    lc_a = P[LC_A]
    if row[0] > 0.5:
        gap, vl = row[1], row[2]
        if gap <= _kinematic_margin(v - vl):
            return False
        if gap * lc_a < desired_gap(v, v - vl, P[SJ], P[TAU], P[A], P[B]):
            return False
    if row[3] > 0.5:
        gap, vf_ = row[4], row[5]
        if gap <= _kinematic_margin(vf_ - v):
            return False
        if gap * lc_a < desired_gap(vf_, vf_ - v, P[SJ], P[TAU], P[A], P[B]):
            return False
    return True


@njit(cache=True)
def is_mandatory(v, need_dir, n_need, dist, P):
    if need_dir == 0:
        return False
    urgency = P[LC_S] * n_need * v * LOOKAHEAD_TIME / max(dist, 1.0)
    if urgency >= 1.0:
        return True
    # last chance: the mandatory point is within comfortable stopping distance
    return dist <= v * v / (2.0 * P[B]) + P[SJ]


@njit(cache=True)
def decide(v, cooldown_steps, sg_left, sg_right, dt, can_left, can_right,
           need_dir, n_need, dist, v_ant_cur, nb, P):
    """Lane-change decision for one vehicle.

    Returns ``(decision, mandatory, sg_left, sg_right)`` with decision +1 (left),
    -1 (right) or 0 (stay); ``mandatory`` is the required direction when a
    mandatory change is pending (0 otherwise). The speed-gain counters count
    consecutive steps with a sufficient incentive.
    """
    mandatory = is_mandatory(v, need_dir, n_need, dist, P)
    vf = P[VF]
    v_ant_l = anticipated_speed(nb[LEFT, 0] > 0.5, nb[LEFT, 1], nb[LEFT, 2], vf)
    v_ant_r = anticipated_speed(nb[RIGHT, 0] > 0.5, nb[RIGHT, 1], nb[RIGHT, 2], vf)
    gain_l = v_ant_l - v_ant_cur
    gain_r = v_ant_r - v_ant_cur
    lc_sg = P[LC_SG]
    if lc_sg > 0.0 and can_left and gain_l > SPEED_GAIN_THRESHOLD / lc_sg:
        sg_left += 1
    else:
        sg_left = 0
    if lc_sg > 0.0 and can_right and gain_r > SPEED_GAIN_THRESHOLD / lc_sg:
        sg_right += 1
    else:
        sg_right = 0
    pending = need_dir if mandatory else 0

    if cooldown_steps > 0:
        return 0, pending, sg_left, sg_right
    if mandatory:
        if need_dir > 0 and can_left and admissible(v, nb[LEFT], P):
            return 1, pending, 0, 0
        if need_dir < 0 and can_right and admissible(v, nb[RIGHT], P):
            return -1, pending, 0, 0
        return 0, pending, sg_left, sg_right

    sustain = int(round(SPEED_GAIN_SUSTAIN / dt))
    want_l = sg_left >= sustain and need_dir >= 0
    want_r = sg_right >= sustain and need_dir <= 0
    keep_right = (P[LC_KR] > 0.0 and can_right and need_dir <= 0
                  and v_ant_cur - v_ant_r < KEEP_RIGHT_THRESHOLD * P[LC_KR])
    # speed gain (larger gain first, left on ties) beats keep-right
    first, second = 0, 0
    if want_l and want_r:
        if gain_r > gain_l:
            first, second = -1, 1
        else:
            first, second = 1, -1
    elif want_l:
        first = 1
    elif want_r:
        first = -1
    for cand in (first, second, -1 if keep_right else 0):
        if cand > 0 and admissible(v, nb[LEFT], P):
            return 1, 0, 0, 0
        if cand < 0 and admissible(v, nb[RIGHT], P):
            return -1, 0, 0, 0
    return 0, 0, sg_left, sg_right


# -- public Python API ----------------------------------------------------------

def _check_finite(**values):
    for name, value in values.items():
        if not np.all(np.isfinite(value)):
            raise ValueError(f"{name} must be finite, got {value!r}")


def idm_acceleration(v, dv, s, leader_exists, p: ParameterSet) -> float:
    """IDM acceleration clamped at the emergency deceleration.

    ``dv`` is follower minus leader speed and ``s`` the bumper-to-bumper gap.
    Without a leader the interaction term is dropped.
    """
    _check_finite(v=v, dv=dv, s=s)
    if leader_exists and s <= 0:
        raise ValueError("gap must be positive when a leader exists")
    return float(idm(float(v), float(dv), float(s), bool(leader_exists), p.packed()))


@dataclass(frozen=True)
class LeaderContext:
    gap: float = math.inf
    dv: float = 0.0  # follower speed minus leader speed
    exists: bool = False

    def __post_init__(self):
        if self.exists and not self.gap > 0:
            raise ValueError("gap must be positive when a leader exists")


@dataclass(frozen=True)
class VehicleState:
    id: int
    lane: int  # local index, 0 = rightmost
    position: float  # front bumper [m]
    speed: float
    length: float = 5.0
    destination: str = MAINLINE
    cooldown: float = 0.0  # s until another lane change is allowed
    speed_gain_left: float = 0.0  # s the left speed-gain incentive has persisted
    speed_gain_right: float = 0.0


@dataclass(frozen=True)
class AdjacentLane:
    """Nearest leader and follower in one adjacent lane.

    ``leader_gap`` is from the ego's front to the leader's rear and
    ``follower_gap`` from the follower's front to the ego's rear.
    """

    leader_gap: float | None = None
    leader_speed: float = 0.0
    follower_gap: float | None = None
    follower_speed: float = 0.0

    def row(self):
        return np.array([
            self.leader_gap is not None, self.leader_gap or 0.0, self.leader_speed,
            self.follower_gap is not None, self.follower_gap or 0.0, self.follower_speed,
        ], dtype=float)


@dataclass(frozen=True)
class Neighborhood:
    """What the ego sees: its own-lane leader and both adjacent lanes (None = no lane)."""

    leader: LeaderContext = LeaderContext()
    left: AdjacentLane | None = None
    right: AdjacentLane | None = None


@dataclass(frozen=True)
class LaneChangeDecision:
    direction: str  # "stay", "left" or "right"
    cooperation: bool = False  # a mandatory change is pending and blocked


def strategic_need(ego: VehicleState, network: RoadNetwork):
    """``(direction, n_changes, distance)`` to the next mandatory point; direction +1 is left."""
    zone = None
    for ramp in network.onramps:
        if ramp.merge_start <= ego.position < ramp.merge_end:
            zone = ramp
    if zone is not None and ego.lane == zone.accel_lane:
        return 1, 1, zone.merge_end - ego.position
    if ego.destination != MAINLINE:
        ramp = network.offramps[int(ego.destination[len("offramp"):])]
        if ego.position < ramp.position:
            offset = 1 if zone is not None else 0
            target = ramp.exit_lane + offset
            n = abs(ego.lane - target)
            if n:
                return (1 if target > ego.lane else -1), n, ramp.position - ego.position
    return 0, 0, 0.0


def lane_change_decide(ego: VehicleState, neighborhood: Neighborhood, network: RoadNetwork,
                       p: ParameterSet, dt: float = 0.1) -> LaneChangeDecision:
    """Decide stay/left/right for one vehicle from its surroundings.

    Adjacent lanes that do not exist, or acceleration lanes (never a target),
    should be passed as ``None``.
    """
    P = p.packed()
    need_dir, n_need, dist = strategic_need(ego, network)
    nb = np.zeros((2, 6))
    if neighborhood.left is not None:
        nb[LEFT] = neighborhood.left.row()
    if neighborhood.right is not None:
        nb[RIGHT] = neighborhood.right.row()
    lead = neighborhood.leader
    v_leader = ego.speed - lead.dv
    v_ant = anticipated_speed(lead.exists, lead.gap if lead.exists else 0.0, v_leader, p.vf)
    if need_dir > 0 and any(r.merge_start <= ego.position < r.merge_end for r in network.onramps):
        # the acceleration lane ends: a standing obstacle at the merge end
        if dist < ANTICIPATION_DISTANCE:
            v_ant = 0.0
    cooldown_steps = int(math.ceil(ego.cooldown / dt - 1e-9))
    decision, pending, _, _ = decide(
        float(ego.speed), cooldown_steps,
        int(round(ego.speed_gain_left / dt)), int(round(ego.speed_gain_right / dt)), dt,
        neighborhood.left is not None, neighborhood.right is not None,
        need_dir, n_need, float(dist), float(v_ant), nb, P,
    )
    direction = {1: "left", -1: "right", 0: "stay"}[int(decision)]
    return LaneChangeDecision(direction, cooperation=bool(pending) and decision == 0)
