"""Compiled per-step kernels.

Vehicles are stored in parallel arrays sorted by id. Lanes use a global
numbering: lane 0 is the acceleration lane (it only exists inside merge zones)
and mainline lanes are 1..n_main.
"""

import numpy as np
from numba import njit

from .models import (
    B, LC_A, LC_C, LC_COOLDOWN, LEFT, RIGHT, SJ, TAU, A, VF,
    ANTICIPATION_DISTANCE, admissible, anticipated_speed, decide, desired_gap, idm,
)


STANDSTILL = 0.1  # m/s


@njit(cache=True)
def lane_sort(lane, x, n_lanes):
    """Indices ordered by (lane, position) and per-lane start offsets."""
    by_x = np.argsort(x, kind="mergesort")
    counts = np.zeros(n_lanes + 1, dtype=np.int64)
    for i in range(x.size):
        counts[lane[i] + 1] += 1
    starts = np.cumsum(counts)
    fill = starts[:-1].copy()
    order = np.empty(x.size, dtype=np.int64)
    for k in range(x.size):
        i = by_x[k]
        order[fill[lane[i]]] = i
        fill[lane[i]] += 1
    return order, starts


@njit(cache=True)
def zone_of(xi, zs, ze):
    for k in range(zs.size):
        if zs[k] <= xi < ze[k]:
            return k
    return -1


@njit(cache=True)
def _first_ahead(xs, lo, hi, xq):
    # first sorted slot in [lo, hi) with position > xq
    return lo + np.searchsorted(xs[lo:hi], xq, side="right")


@njit(cache=True)
def _fill_row(row, xi, li, order, xs, starts, g, x, v, length):
    row[:] = 0.0
    lo, hi = starts[g], starts[g + 1]
    k = _first_ahead(xs, lo, hi, xi)
    if k < hi:
        j = order[k]
        row[0] = 1.0
        row[1] = x[j] - length[j] - xi
        row[2] = v[j]
    if k - 1 >= lo:
        j = order[k - 1]
        row[3] = 1.0
        row[4] = xi - li - x[j]
        row[5] = v[j]


@njit(cache=True)
def _strategic(i, lane, x, dest, zs, ze, off_pos, off_lane):
    g = lane[i]
    if g == 0:
        z = zone_of(x[i], zs, ze)
        return 1, 1, ze[z] - x[i]
    d = dest[i]
    if d >= 0 and x[i] < off_pos[d]:
        target = off_lane[d]
        if target != g:
            n = abs(target - g)
            return (1 if target > g else -1), n, off_pos[d] - x[i]
    return 0, 0, 0.0


@njit(cache=True)
def lane_change_phase(lane, x, v, length, dest, scripted, cooldown, sg_left, sg_right,
                      P, n_main, zs, ze, off_pos, off_lane, dt):
    """Decide from the current state, then apply changes in id order.

    Each change is re-checked against the lanes already updated this step.
    Mutates ``cooldown`` and the speed-gain counters. Returns the new lanes and
    the pending mandatory direction per vehicle (0 if none or if it changed).
    """
    n = x.size
    n_lanes = n_main + 1
    order, starts = lane_sort(lane, x, n_lanes)
    xs = x[order]
    decision = np.zeros(n, dtype=np.int64)
    pending = np.zeros(n, dtype=np.int64)
    nb = np.zeros((2, 6))
    for i in range(n):
        if cooldown[i] > 0:
            cooldown[i] -= 1
        if scripted[i]:
            continue
        g = lane[i]
        xi = x[i]
        lo, hi = starts[g], starts[g + 1]
        k = _first_ahead(xs, lo, hi, xi)
        if k < hi:
            j = order[k]
            v_ant = anticipated_speed(True, x[j] - length[j] - xi, v[j], P[VF])
        else:
            v_ant = P[VF]
        if g == 0:
            z = zone_of(xi, zs, ze)
            if ze[z] - xi < ANTICIPATION_DISTANCE:
                v_ant = 0.0
        need_dir, n_need, dist = _strategic(i, lane, x, dest, zs, ze, off_pos, off_lane)
        can_left = g + 1 <= n_main
        can_right = g - 1 >= 1
        nb[:] = 0.0
        if can_left:
            _fill_row(nb[LEFT], xi, length[i], order, xs, starts, g + 1, x, v, length)
        if can_right:
            _fill_row(nb[RIGHT], xi, length[i], order, xs, starts, g - 1, x, v, length)
        dec, pend, sl, sr = decide(v[i], cooldown[i], sg_left[i], sg_right[i], dt,
                                   can_left, can_right, need_dir, n_need, dist, v_ant, nb, P)
        decision[i] = dec
        pending[i] = pend
        sg_left[i] = sl
        sg_right[i] = sr

    new_lane = lane.copy()
    row = np.zeros(6)
    cooldown_steps = int(round(LC_COOLDOWN / dt))
    for i in range(n):
        if decision[i] == 0:
            continue
        target = lane[i] + decision[i]
        row[:] = 0.0
        best_lead, best_foll = np.inf, -np.inf
        for j in range(n):
            if j == i or new_lane[j] != target:
                continue
            if x[j] > x[i]:
                if x[j] < best_lead:
                    best_lead = x[j]
                    row[0] = 1.0
                    row[1] = x[j] - length[j] - x[i]
                    row[2] = v[j]
            elif x[j] > best_foll:
                best_foll = x[j]
                row[3] = 1.0
                row[4] = x[i] - length[i] - x[j]
                row[5] = v[j]
        if admissible(v[i], row, P):
            new_lane[i] = target
            cooldown[i] = cooldown_steps
            sg_left[i] = 0
            sg_right[i] = 0
            pending[i] = 0
    return new_lane, pending


@njit(cache=True)
def accel_phase(lane, x, v, length, scripted, pending, P, n_main, zs, ze):
    """Accelerations from the post-change state, including merge interactions.

    A vehicle with a pending mandatory change slows (down to -b) to fall in
    behind the target-lane leader. The target-lane follower that blocks it
    treats it as a leader at the real gap and brakes with at most
    lc_cooperative * b, unless it is alongside or has stopped too close to
    ever open an acceptable gap.
    """
    n = x.size
    order, starts = lane_sort(lane, x, n_main + 1)
    xs = x[order]
    acc = np.zeros(n)
    for i in range(n):
        if scripted[i]:
            continue
        g = lane[i]
        lo, hi = starts[g], starts[g + 1]
        k = _first_ahead(xs, lo, hi, x[i])
        if k < hi:
            j = order[k]
            acc[i] = idm(v[i], v[i] - v[j], x[j] - length[j] - x[i], True, P)
        else:
            acc[i] = idm(v[i], 0.0, 1.0, False, P)
        if g == 0:
            z = zone_of(x[i], zs, ze)
            acc[i] = min(acc[i], idm(v[i], v[i], ze[z] - x[i], True, P))

    b = P[B]
    coop_floor = -P[LC_C] * b
    for i in range(n):
        if pending[i] == 0 or scripted[i]:
            continue
        target = lane[i] + pending[i]
        if target < 0 or target > n_main:
            continue
        lo, hi = starts[target], starts[target + 1]
        k = _first_ahead(xs, lo, hi, x[i])
        if k < hi:
            j = order[k]
            gap = x[j] - length[j] - x[i]
            # aim for the gap the merger accepts, not the car-following gap
            if gap > 0.0:
                align = idm(v[i], v[i] - v[j], gap * P[LC_A], True, P)
            else:
                align = -b
            acc[i] = min(acc[i], max(-b, align))
        if k - 1 >= lo:
            j = order[k - 1]
            if scripted[j]:
                continue
            gap = x[i] - length[i] - x[j]
            if gap <= 0.0 or (v[j] < STANDSTILL and gap * P[LC_A] < P[SJ]):
                continue  # stopped too close to ever open an acceptable gap: pass instead
            s_req = desired_gap(v[j], v[j] - v[i], P[SJ], P[TAU], P[A], b)
            if gap * P[LC_A] >= s_req:
                continue  # not the blocker
            coop = idm(v[j], v[j] - v[i], gap, True, P)  # the merger as a virtual leader
            acc[j] = min(acc[j], max(coop, coop_floor))
    return acc


@njit(cache=True)
def integrate(x, v, acc, dt):
    """Ballistic update; acceleration is limited so that speeds stay >= 0."""
    for i in range(x.size):
        a = max(acc[i], -v[i] / dt)
        x[i] += v[i] * dt + 0.5 * a * dt * dt
        v[i] = max(0.0, v[i] + a * dt)


@njit(cache=True)
def find_conflict(lane, x, length, n_main, zs, ze):
    """First (follower, leader) pair overlapping in a lane, or a vehicle past its lane end."""
    order, starts = lane_sort(lane, x, n_main + 1)
    for g in range(n_main + 1):
        for k in range(starts[g], starts[g + 1] - 1):
            f = order[k]
            l = order[k + 1]
            if x[l] - length[l] - x[f] <= 0.0:
                return f, l
    for k in range(starts[0], starts[1]):
        i = order[k]
        if zone_of(x[i], zs, ze) < 0:
            return i, -1
    return -1, -1
