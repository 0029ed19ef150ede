"""Per-lane ordering used for leader/follower queries."""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from typing import Iterable, Optional

from ccma.sim.types import VehicleState


def bumper_gap(follower: VehicleState, leader: VehicleState) -> float:
    return leader.pos - follower.pos - 0.5 * (leader.length + follower.length)


class LaneIndex:
    """Vehicles sorted by (pos, id) for every lane they occupy.

    A vehicle changing lanes occupies both its origin and destination lane,
    so it is visible as leader/follower in both.
    """

    __slots__ = ("lanes", "keys")

    def __init__(self, vehicles: Iterable[VehicleState], n_lanes: int):
        lanes: list[list[VehicleState]] = [[] for _ in range(n_lanes)]
        for v in vehicles:
            for lane in v.occupied_lanes():
                lanes[lane].append(v)
        for members in lanes:
            members.sort(key=lambda u: (u.pos, u.id))
        self.lanes = lanes
        self.keys = [[(u.pos, u.id) for u in members] for members in lanes]

    def ahead_in_lane(self, lane: int, v: VehicleState) -> Optional[VehicleState]:
        keys = self.keys[lane]
        i = bisect_right(keys, (v.pos, v.id))
        return self.lanes[lane][i] if i < len(keys) else None

    def behind_in_lane(self, lane: int, v: VehicleState) -> Optional[VehicleState]:
        keys = self.keys[lane]
        i = bisect_left(keys, (v.pos, v.id))
        return self.lanes[lane][i - 1] if i > 0 else None

    def leader(self, v: VehicleState, physical_only: bool = False,
               notice_progress: int = 5) -> Optional[VehicleState]:
        """Nearest vehicle ahead in any lane ``v`` occupies.

        With ``physical_only`` a vehicle changing into the lane counts only
        once its lane change has progressed ``notice_progress`` substeps
        (human drivers react late).
        """
        if physical_only:
            return self._ahead_physical(v.lane, v, notice_progress)
        if v.lc_to is None:
            return self.ahead_in_lane(v.lane, v)
        best = None
        for lane in (v.lc_from, v.lc_to):
            cand = self.ahead_in_lane(lane, v)
            if cand is not None and (best is None or (cand.pos, cand.id) < (best.pos, best.id)):
                best = cand
        return best

    def _ahead_physical(self, lane: int, v: VehicleState, notice_progress: int) -> Optional[VehicleState]:
        keys = self.keys[lane]
        members = self.lanes[lane]
        i = bisect_right(keys, (v.pos, v.id))
        while i < len(keys):
            u = members[i]
            if u.lc_to != lane and u.lane == lane:
                return u
            if u.lc_to == lane and u.lc_progress >= notice_progress:
                return u
            i += 1
        return None

    def follower(self, v: VehicleState) -> Optional[VehicleState]:
        if v.lc_to is None:
            return self.behind_in_lane(v.lane, v)
        best = None
        for lane in (v.lc_from, v.lc_to):
            cand = self.behind_in_lane(lane, v)
            if cand is not None and (best is None or (cand.pos, cand.id) > (best.pos, best.id)):
                best = cand
        return best
