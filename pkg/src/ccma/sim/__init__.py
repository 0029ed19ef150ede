"""Highway on-ramp merge simulator."""

from ccma.sim.models import DEFAULT_IDM, IDMParams, idm_accel
from ccma.sim.observe import R_OBS, observe, ttc_front
from ccma.sim.types import (
    ACTIONS,
    SPEED_CAP,
    STYLES,
    TIE_ORDER,
    DrivingStyle,
    Event,
    MetaAction,
    Observation,
    RoadGeometry,
    VehicleKind,
    VehicleState,
    WorldState,
)
from ccma.sim.world import (
    DENSITIES,
    check_collision,
    lane_change_valid,
    mobil_lane_change,
    spawn_scenario,
    step,
)
