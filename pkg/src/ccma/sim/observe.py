"""Local observation extraction and time-to-collision."""

from __future__ import annotations

import math
from typing import Optional

from ccma.errors import InputError
from ccma.sim.lanes import LaneIndex, bumper_gap
from ccma.sim.types import Observation, VehicleState, WorldState

MAX_NEIGHBORS = 8
R_OBS = 50.0


def distance(world: WorldState, a: VehicleState, b: VehicleState) -> float:
    w = world.geometry.lane_width
    return math.hypot(a.pos - b.pos, (a.lane + a.lat - b.lane - b.lat) * w)


def observe(world: WorldState, vid: int, r_obs: float = R_OBS, k: int = MAX_NEIGHBORS) -> Observation:
    if r_obs <= 0:
        raise InputError("r_obs must be > 0")
    ego = world.get(vid)
    if ego is None:
        raise InputError(f"unknown vehicle id {vid}")
    found = []
    for v in world.vehicles:
        if v.id == vid:
            continue
        d = distance(world, ego, v)
        if d <= r_obs:
            found.append((d, v.id, v))
    found.sort(key=lambda t: (t[0], t[1]))
    found = found[:k]
    return Observation(
        ego=ego,
        neighbors=[t[2] for t in found],
        distances=[t[0] for t in found],
        dist_to_ramp_end=dist_to_ramp_end(world, ego),
        time=world.time,
    )


def on_ramp(world: WorldState, v: VehicleState) -> bool:
    return v.lane == world.geometry.ramp_lane and not v.merged


def dist_to_ramp_end(world: WorldState, v: VehicleState) -> Optional[float]:
    if not on_ramp(world, v):
        return None
    return world.geometry.merge_end - v.pos


def ttc_front(world: WorldState, v: VehicleState, index: Optional[LaneIndex] = None) -> float:
    """Time to collision with the nearest leader in the lanes ``v`` occupies.

    While on the ramp the ramp end behaves as a stationary obstacle.
    Returns ``math.inf`` when nothing is closing in.
    """
    if index is None:
        index = LaneIndex(world.vehicles, world.geometry.main_lane_count + 1)
    ttc = math.inf
    leader = index.leader(v)
    if leader is not None:
        gap = bumper_gap(v, leader)
        closing = v.speed - leader.speed
        if gap <= 0:
            return 0.0
        if closing > 0:
            ttc = gap / closing
    if v.lane == world.geometry.ramp_lane and v.lc_to is None and not v.frozen:
        gap = world.geometry.merge_end - v.pos - 0.5 * v.length
        if gap <= 0:
            return 0.0
        if v.speed > 0:
            ttc = min(ttc, gap / v.speed)
    return ttc
