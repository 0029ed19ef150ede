"""Core value types of the merge simulator."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional

from ccma.errors import ConfigError

SPEED_CAP = 35.0
SPEED_STEP = 5.0
ACCEL_LIMIT = 5.0
DECISION_DT = 1.0
SUBSTEPS = 10
SUBSTEP_DT = DECISION_DT / SUBSTEPS


@dataclass(frozen=True)
class RoadGeometry:
    """Straight highway with a single right-hand on-ramp.

    Main lanes are indexed 0 (leftmost) .. main_lane_count - 1; the ramp is
    lane ``main_lane_count``. Longitudinal positions share one axis: the ramp
    runs from ``pre_merge_len - ramp_len`` to the end of the merge zone.
    """

    main_lane_count: int = 2
    lane_width: float = 4.0
    pre_merge_len: float = 220.0
    merge_zone_len: float = 100.0
    post_merge_len: float = 180.0
    ramp_len: float = 150.0

    def __post_init__(self) -> None:
        if self.main_lane_count < 1:
            raise ConfigError("main_lane_count must be >= 1")
        for name in ("lane_width", "pre_merge_len", "merge_zone_len", "post_merge_len", "ramp_len"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")

    @property
    def ramp_lane(self) -> int:
        return self.main_lane_count

    @property
    def merge_start(self) -> float:
        return self.pre_merge_len

    @property
    def merge_end(self) -> float:
        return self.pre_merge_len + self.merge_zone_len

    @property
    def ramp_start(self) -> float:
        return self.pre_merge_len - self.ramp_len

    @property
    def road_end(self) -> float:
        return self.pre_merge_len + self.merge_zone_len + self.post_merge_len

    def lane_center(self, lane: int) -> float:
        return lane * self.lane_width

    def to_dict(self) -> dict:
        return asdict(self)

    def stable_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class DrivingStyle:
    label: str
    headway_mult: float
    accel_mult: float
    politeness: float

    def __post_init__(self) -> None:
        if self.headway_mult <= 0 or self.accel_mult <= 0:
            raise ConfigError("style multipliers must be > 0")
        if not 0.0 <= self.politeness <= 1.0:
            raise ConfigError("politeness must lie in [0, 1]")


STYLES: dict[str, DrivingStyle] = {
    "aggressive": DrivingStyle("aggressive", 0.7, 1.3, 0.1),
    "normal": DrivingStyle("normal", 1.0, 1.0, 0.3),
    "conservative": DrivingStyle("conservative", 1.4, 0.8, 0.6),
}
STYLE_ORDER = ("aggressive", "normal", "conservative")


class VehicleKind(str, Enum):
    CAV = "CAV"
    HDV = "HDV"


class MetaAction(Enum):
    """Discrete meta-actions; the value is the canonical column index."""

    LANE_LEFT = 0
    IDLE = 1
    LANE_RIGHT = 2
    FASTER = 3
    SLOWER = 4

    @classmethod
    def from_name(cls, name: str) -> "MetaAction":
        return cls[name]


ACTIONS: tuple[MetaAction, ...] = tuple(MetaAction)
# Preference order used to break exact ties between equally valued actions.
TIE_ORDER: tuple[MetaAction, ...] = (
    MetaAction.IDLE,
    MetaAction.FASTER,
    MetaAction.SLOWER,
    MetaAction.LANE_LEFT,
    MetaAction.LANE_RIGHT,
)


@dataclass(slots=True)
class VehicleState:
    id: int
    kind: VehicleKind
    lane: int
    pos: float
    speed: float
    target_speed: float
    desired_speed: float = 0.0
    lat: float = 0.0
    accel: float = 0.0
    prev_accel: float = 0.0
    length: float = 5.0
    width: float = 2.0
    style: DrivingStyle = STYLES["normal"]
    merged: bool = False
    merge_enter_time: Optional[float] = None
    merge_done_time: Optional[float] = None
    # lane change bookkeeping: destination lane and completed substeps
    lc_from: Optional[int] = None
    lc_to: Optional[int] = None
    lc_progress: int = 0
    status: str = "active"  # active | crashed | failed
    cooperative: bool = False

    @property
    def frozen(self) -> bool:
        return self.status != "active"

    @property
    def changing(self) -> bool:
        return self.lc_to is not None

    @property
    def is_cav(self) -> bool:
        return self.kind is VehicleKind.CAV

    def copy(self) -> "VehicleState":
        return VehicleState(
            self.id, self.kind, self.lane, self.pos, self.speed, self.target_speed,
            self.desired_speed, self.lat, self.accel, self.prev_accel, self.length,
            self.width, self.style, self.merged, self.merge_enter_time,
            self.merge_done_time, self.lc_from, self.lc_to, self.lc_progress,
            self.status, self.cooperative,
        )

    def occupied_lanes(self) -> tuple[int, ...]:
        if self.lc_to is None:
            return (self.lane,)
        return (self.lc_from, self.lc_to)

    def to_log(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "lane": self.lane,
            "pos": round(self.pos, 6),
            "lat": round(self.lat, 6),
            "speed": round(self.speed, 6),
            "accel": round(self.accel, 6),
            "merged": self.merged,
            "v0": round(self.desired_speed, 6),
            "status": self.status,
        }


@dataclass(frozen=True, slots=True)
class Event:
    """Something that happened during a substep.

    kind is one of collision, merge_enter, merge_done, ramp_fail, exit.
    """

    kind: str
    time: float
    ids: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"type": self.kind, "time": self.time, "ids": list(self.ids)}


@dataclass
class WorldState:
    geometry: RoadGeometry
    vehicles: list[VehicleState] = field(default_factory=list)
    tick: int = 0
    seed: int = 0
    events: list[Event] = field(default_factory=list)
    last_events: list[Event] = field(default_factory=list)
    exited: list[int] = field(default_factory=list)
    # memo of one-step lookaheads keyed by (agent id, action); worlds are
    # never mutated after construction so the cache stays valid
    lookahead_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def time(self) -> float:
        return self.tick / SUBSTEPS

    def copy(self) -> "WorldState":
        return WorldState(
            self.geometry,
            [v.copy() for v in self.vehicles],
            self.tick,
            self.seed,
            list(self.events),
            [],
            list(self.exited),
        )

    def get(self, vid: int) -> Optional[VehicleState]:
        for v in self.vehicles:
            if v.id == vid:
                return v
        return None

    def cavs(self) -> list[VehicleState]:
        return [v for v in self.vehicles if v.kind is VehicleKind.CAV]

    def active_cavs(self) -> list[VehicleState]:
        return [v for v in self.vehicles if v.kind is VehicleKind.CAV and not v.frozen]

    def y(self, v: VehicleState) -> float:
        return (v.lane + v.lat) * self.geometry.lane_width

    def to_log(self) -> dict:
        return {
            "time": self.time,
            "vehicles": [v.to_log() for v in self.vehicles],
            "events": [e.to_dict() for e in self.last_events],
        }


@dataclass
class Observation:
    ego: VehicleState
    neighbors: list[VehicleState]
    distances: list[float]
    dist_to_ramp_end: Optional[float]
    time: float
