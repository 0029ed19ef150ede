import random

import pytest

from ccma.agent import PolicyArtifact
from ccma.cli import default_policy_path
from ccma.sim.types import STYLES, RoadGeometry, VehicleKind, VehicleState, WorldState

GEO = RoadGeometry()

# pass/fail lines of the acceptance suite, printed at the end of the session
ACCEPTANCE_RESULTS: dict[int, str] = {}


def cav(vid, lane, pos, speed, **kw):
    kw.setdefault("target_speed", speed)
    kw.setdefault("desired_speed", 35.0)
    return VehicleState(vid, VehicleKind.CAV, lane, pos, speed, **kw)


def hdv(vid, lane, pos, speed, **kw):
    kw.setdefault("target_speed", speed)
    kw.setdefault("desired_speed", max(speed, 1.0))
    return VehicleState(vid, VehicleKind.HDV, lane, pos, speed, **kw)


def world_of(*vehicles, geometry=GEO, tick=0):
    return WorldState(geometry=geometry, vehicles=sorted(vehicles, key=lambda v: v.id), tick=tick)


def random_world(rng: random.Random, n_max: int = 12, geometry: RoadGeometry = GEO) -> WorldState:
    """Non-overlapping vehicles on every lane, some mid lane change; vehicle 0 is a CAV."""
    n = rng.randint(1, n_max)
    taken: list[tuple[int, float]] = []
    vehicles = []
    lanes = geometry.main_lane_count + 1
    for vid in range(n):
        for _ in range(50):
            lane = rng.randrange(lanes)
            if lane == geometry.ramp_lane:
                pos = rng.uniform(geometry.ramp_start + 5, geometry.merge_end - 5)
            else:
                pos = rng.uniform(0.0, geometry.road_end - 10)
            if all(l != lane or abs(p - pos) > 7.0 for l, p in taken):
                break
        else:
            continue
        taken.append((lane, pos))
        speed = rng.uniform(0.0, 33.0)
        kind = VehicleKind.CAV if vid == 0 or rng.random() < 0.3 else VehicleKind.HDV
        v = VehicleState(vid, kind, lane, pos, speed, target_speed=rng.choice([speed, rng.uniform(0, 35)]),
                         desired_speed=35.0 if kind is VehicleKind.CAV else rng.uniform(24, 30),
                         style=STYLES[rng.choice(list(STYLES))])
        if lane < geometry.main_lane_count and rng.random() < 0.15:
            dest = lane - 1 if lane > 0 else lane + 1
            if 0 <= dest < geometry.main_lane_count:
                v.lc_from, v.lc_to = lane, dest
                v.lc_progress = rng.randint(1, 9)
                d = dest - lane
                k = v.lc_progress
                if 2 * k < 10:
                    v.lat = d * k / 10
                else:
                    v.lane = dest
                    v.lat = -d * (10 - k) / 10
        vehicles.append(v)
    return WorldState(geometry=geometry, vehicles=vehicles, tick=rng.randrange(0, 300))


@pytest.fixture(scope="session")
def policy() -> PolicyArtifact:
    return PolicyArtifact.load(default_policy_path())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
