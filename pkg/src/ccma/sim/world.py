"""Scenario spawning and the deterministic transition function."""

from __future__ import annotations

import math
import random
from typing import Mapping, Optional

from ccma.errors import ConfigError, InputError
from ccma.sim.lanes import LaneIndex, bumper_gap
from ccma.sim.models import DEFAULT_IDM, IDMParams, idm_accel, style_params
from ccma.sim.types import (
    ACCEL_LIMIT,
    SPEED_CAP,
    SPEED_STEP,
    STYLE_ORDER,
    STYLES,
    SUBSTEP_DT,
    SUBSTEPS,
    Event,
    MetaAction,
    RoadGeometry,
    VehicleKind,
    VehicleState,
    WorldState,
)

HDV_PER_LANE = {"easy": 4, "medium": 7, "hard": 10}
# HDV spawn window relative to the merge zone, and speed ranges
HDV_SPAN = (-320.0, 80.0)
HDV_DESIRED = (24.0, 30.0)
CAV_START_SPEED = (12.0, 18.0)
DENSITIES = ("easy", "medium", "hard")
K_P = 2.0
# target-speed change applied to a cooperative HDV per SLOWER advisory, and
# the rate at which it relaxes back to its desired speed afterwards
HDV_NUDGE = 2.5
MOBIL_THRESHOLD = 0.1
CAV_GAP_MIN = 20.0
HDV_NOTICE = 10  # substeps into a cut-in before a human driver reacts


def _pick_style(rng: random.Random, style_mix: Mapping[str, float]) -> str:
    total = sum(style_mix.get(k, 0.0) for k in STYLE_ORDER)
    if total <= 0:
        raise ConfigError("style_mix must have positive mass")
    u = rng.random() * total
    acc = 0.0
    for label in STYLE_ORDER:
        acc += style_mix.get(label, 0.0)
        if u < acc:
            return label
    return STYLE_ORDER[-1]


def spawn_scenario(
    geometry: RoadGeometry,
    density: str,
    style_mix: Optional[Mapping[str, float]] = None,
    n_cavs: int = 1,
    seed: int = 0,
    *,
    hdv_per_lane: Optional[Mapping[str, int]] = None,
    hdv_compliance: float = 1.0,
    params: IDMParams = DEFAULT_IDM,
) -> WorldState:
    """Build a collision-free initial world.

    CAVs get ids 0..n_cavs-1 and start on the ramp; HDVs follow, placed lane
    by lane with bumper gaps of at least ``2 * (s0 + length)``.
    """
    if n_cavs < 1:
        raise ConfigError("n_cavs must be >= 1")
    table = dict(HDV_PER_LANE if hdv_per_lane is None else hdv_per_lane)
    if density not in table:
        raise ConfigError(f"unknown density {density!r}")
    style_mix = style_mix or {"normal": 1.0}
    rng = random.Random(seed)
    length = 5.0
    vehicles: list[VehicleState] = []

    # CAVs on the ramp, front-most first
    cav_spacing = CAV_GAP_MIN + length
    span_needed = (n_cavs - 1) * cav_spacing
    lead_lo = geometry.ramp_start + span_needed + length
    lead_hi = min(lead_lo + 40.0, geometry.merge_start - 40.0)
    if lead_hi < lead_lo:
        raise ConfigError("ramp too short for the requested number of CAVs")
    pos = rng.uniform(lead_lo, lead_hi)
    for i in range(n_cavs):
        speed = rng.uniform(*CAV_START_SPEED)
        vehicles.append(VehicleState(
            id=i, kind=VehicleKind.CAV, lane=geometry.ramp_lane, pos=pos,
            speed=speed, target_speed=speed, desired_speed=SPEED_CAP,
        ))
        pos -= cav_spacing + rng.uniform(0.0, 10.0)

    # HDVs on main lanes
    per_lane = table[density]
    min_gap = 2.0 * (params.s0 + length)
    span_lo, span_hi = geometry.merge_start + HDV_SPAN[0], geometry.merge_end + HDV_SPAN[1]
    next_id = n_cavs
    for lane in range(geometry.main_lane_count):
        if per_lane == 0:
            continue
        slack = (span_hi - span_lo) - per_lane * (min_gap + length)
        if slack < 0:
            raise ConfigError(f"geometry too short for density {density!r}")
        cuts = sorted(rng.random() for _ in range(per_lane))
        # cut points -> ascending positions with the minimum spacing added back
        positions = [span_lo + length / 2 + slack * c + k * (min_gap + length) for k, c in enumerate(cuts)]
        lane_vehicles = []
        for p in positions:
            label = _pick_style(rng, style_mix)
            desired = rng.uniform(*HDV_DESIRED)
            coop = rng.random() < hdv_compliance
            lane_vehicles.append((p, label, desired, coop))
        # equilibrium speed for the gap ahead so the initial state is calm
        for k, (p, label, desired, coop) in enumerate(lane_vehicles):
            style = STYLES[label]
            sp = style_params(style, params)
            if k + 1 < len(lane_vehicles):
                gap = lane_vehicles[k + 1][0] - p - length
                speed = min(desired, max(0.0, (gap - sp.s0) / sp.T))
            else:
                speed = desired
            vehicles.append(VehicleState(
                id=next_id, kind=VehicleKind.HDV, lane=lane, pos=p, speed=speed,
                target_speed=desired, desired_speed=desired, style=style,
                cooperative=coop,
            ))
            next_id += 1
    vehicles.sort(key=lambda v: v.id)
    return WorldState(geometry=geometry, vehicles=vehicles, tick=0, seed=seed)


def check_collision(a: VehicleState, b: VehicleState, lane_width: float = 4.0) -> bool:
    """Axis-aligned rectangle overlap (strict, touching edges do not count)."""
    if abs(a.pos - b.pos) >= 0.5 * (a.length + b.length):
        return False
    ya = (a.lane + a.lat) * lane_width
    yb = (b.lane + b.lat) * lane_width
    return abs(ya - yb) < 0.5 * (a.width + b.width)


def lane_change_valid(world: WorldState, v: VehicleState, action: MetaAction) -> bool:
    if action not in (MetaAction.LANE_LEFT, MetaAction.LANE_RIGHT):
        return True
    if v.changing or v.frozen:
        return False
    geo = world.geometry
    if action is MetaAction.LANE_LEFT:
        if v.lane == 0:
            return False
        if v.lane == geo.ramp_lane and not (geo.merge_start <= v.pos <= geo.merge_end):
            return False
        return True
    return v.lane < geo.main_lane_count - 1


def follow_accel(f: VehicleState, leader: Optional[VehicleState], params: IDMParams = DEFAULT_IDM,
                 raw: bool = False) -> float:
    """Acceleration of ``f`` given its leader under its own control law."""
    gap = math.inf if leader is None else bumper_gap(f, leader)
    dv = 0.0 if leader is None else f.speed - leader.speed
    sp = style_params(f.style, params)
    if f.kind is VehicleKind.CAV:
        a = K_P * (f.target_speed - f.speed)
        a = max(-ACCEL_LIMIT, min(ACCEL_LIMIT, a))
        if leader is not None:
            a = min(a, _idm(f.speed, SPEED_CAP, gap, dv, sp, raw))
        return a
    return _idm(f.speed, f.target_speed, gap, dv, sp, raw)


def _idm(v, v0, gap, dv, sp, raw):
    if not raw:
        return idm_accel(v, v0, gap, dv, sp)
    if gap <= 0:
        return -math.inf
    acc = 1.0 - (v / v0) ** sp.delta if v0 > 0 else -math.inf
    if gap != math.inf:
        s_star = sp.s0 + max(0.0, v * sp.T + v * dv / (2.0 * math.sqrt(sp.a * sp.b)))
        acc -= (s_star / gap) ** 2
    return sp.a * acc


def mobil_safe(index: LaneIndex, v: VehicleState, lane: int, params: IDMParams = DEFAULT_IDM) -> bool:
    """Safety half of MOBIL: no overlap and the new follower need not brake harder than b."""
    new_leader = index.ahead_in_lane(lane, v)
    new_follower = index.behind_in_lane(lane, v)
    if new_leader is not None:
        if bumper_gap(v, new_leader) <= 0:
            return False
        if follow_accel(v, new_leader, params, raw=True) < -params.b:
            return False
    if new_follower is not None and not new_follower.frozen:
        if bumper_gap(new_follower, v) <= 0:
            return False
        if follow_accel(new_follower, v, params, raw=True) < -params.b:
            return False
    elif new_follower is not None and bumper_gap(new_follower, v) <= 0:
        return False
    return True


def mobil_lane_change(world: WorldState, vid: int, index: Optional[LaneIndex] = None,
                      params: IDMParams = DEFAULT_IDM) -> Optional[int]:
    """Lane proposed by MOBIL for HDV ``vid``, or None to stay."""
    v = world.get(vid)
    if v is None:
        raise InputError(f"unknown vehicle id {vid}")
    if v.kind is not VehicleKind.HDV:
        raise InputError("MOBIL applies to HDVs only")
    if v.changing or v.frozen:
        return None
    geo = world.geometry
    if index is None:
        index = LaneIndex(world.vehicles, geo.main_lane_count + 1)
    leader = index.ahead_in_lane(v.lane, v)
    a_old = follow_accel(v, leader, params, raw=True)
    old_follower = index.behind_in_lane(v.lane, v)
    gain_of = 0.0
    if old_follower is not None and not old_follower.frozen:
        gain_of = (follow_accel(old_follower, leader, params, raw=True)
                   - follow_accel(old_follower, v, params, raw=True))
    best_lane, best_inc = None, MOBIL_THRESHOLD
    for lane in (v.lane - 1, v.lane + 1):
        if not 0 <= lane < geo.main_lane_count:
            continue
        if not mobil_safe(index, v, lane, params):
            continue
        new_leader = index.ahead_in_lane(lane, v)
        new_follower = index.behind_in_lane(lane, v)
        a_new = follow_accel(v, new_leader, params, raw=True)
        gain_nf = 0.0
        if new_follower is not None and not new_follower.frozen:
            gain_nf = (follow_accel(new_follower, v, params, raw=True)
                       - follow_accel(new_follower, index.leader(new_follower), params, raw=True))
        incentive = a_new - a_old + v.style.politeness * (gain_nf + gain_of)
        if incentive > best_inc:
            best_lane, best_inc = lane, incentive
    return best_lane


def _start_change(v: VehicleState, lane: int) -> None:
    v.lc_from = v.lane
    v.lc_to = lane
    v.lc_progress = 0


def step(
    world: WorldState,
    actions: Mapping[int, MetaAction],
    advisories: Optional[Mapping[int, MetaAction]] = None,
    params: IDMParams = DEFAULT_IDM,
) -> tuple[WorldState, list[Event]]:
    """Advance one 1.0 s decision step as ten 0.1 s substeps.

    ``actions`` covers CAVs (missing active CAVs default to IDLE);
    ``advisories`` carries regional requests for cooperative HDVs.
    """
    by_id = {v.id: v for v in world.vehicles}
    for vid in actions:
        v = by_id.get(vid)
        if v is None or v.kind is not VehicleKind.CAV:
            raise InputError(f"action for unknown CAV id {vid}")
    w = world.copy()
    geo = w.geometry
    n_lanes = geo.main_lane_count + 1
    events: list[Event] = []

    for v in w.vehicles:
        v.prev_accel = v.accel

    # CAV meta-actions
    for v in w.vehicles:
        if v.kind is not VehicleKind.CAV or v.frozen:
            continue
        act = actions.get(v.id, MetaAction.IDLE)
        if act is MetaAction.FASTER:
            v.target_speed = min(SPEED_CAP, v.target_speed + SPEED_STEP)
        elif act is MetaAction.SLOWER:
            v.target_speed = max(0.0, v.target_speed - SPEED_STEP)
        elif act is MetaAction.LANE_LEFT and lane_change_valid(w, v, act):
            _start_change(v, v.lane - 1)
        elif act is MetaAction.LANE_RIGHT and lane_change_valid(w, v, act):
            _start_change(v, v.lane + 1)

    # HDVs: advisories, then MOBIL
    advisories = advisories or {}
    index = None
    for v in w.vehicles:
        if v.kind is not VehicleKind.HDV or v.frozen:
            continue
        adv = advisories.get(v.id) if v.cooperative else None
        if adv is MetaAction.SLOWER:
            v.target_speed = max(0.0, v.target_speed - HDV_NUDGE)
        elif v.target_speed < v.desired_speed:
            v.target_speed = min(v.desired_speed, v.target_speed + HDV_NUDGE)
        if v.changing:
            continue
        if index is None:
            index = LaneIndex(w.vehicles, n_lanes)
        if adv is MetaAction.LANE_LEFT and v.lane > 0 and mobil_safe(index, v, v.lane - 1, params):
            lane = v.lane - 1
        else:
            lane = mobil_lane_change(w, v.id, index, params)
        if lane is not None:
            _start_change(v, lane)
            index = None

    collided_pairs: set[tuple[int, int]] = set()
    max_len = max((v.length for v in w.vehicles), default=5.0)
    for _ in range(SUBSTEPS):
        index = LaneIndex(w.vehicles, n_lanes)
        accs = []
        for v in w.vehicles:
            if v.frozen:
                continue
            leader = index.leader(v, physical_only=v.kind is VehicleKind.HDV, notice_progress=HDV_NOTICE)
            accs.append((v, follow_accel(v, leader, params)))
        w.tick += 1
        t = w.time
        for v, a in accs:
            v.accel = a
            v.speed = max(0.0, v.speed + a * SUBSTEP_DT)
            v.pos += v.speed * SUBSTEP_DT
            if v.lc_to is not None:
                v.lc_progress += 1
                k = v.lc_progress
                d = v.lc_to - v.lc_from
                if 2 * k < SUBSTEPS:
                    v.lane = v.lc_from
                    v.lat = d * k / SUBSTEPS
                else:
                    v.lane = v.lc_to
                    v.lat = -d * (SUBSTEPS - k) / SUBSTEPS
                if k == SUBSTEPS:
                    if v.lc_from == geo.ramp_lane and not v.merged:
                        v.merged = True
                        v.merge_done_time = t
                        events.append(Event("merge_done", t, (v.id,)))
                    v.lc_from = v.lc_to = None
                    v.lc_progress = 0
                    v.lat = 0.0
            if v.lane == geo.ramp_lane:
                if v.merge_enter_time is None and v.pos >= geo.merge_start:
                    v.merge_enter_time = t
                    events.append(Event("merge_enter", t, (v.id,)))
                if v.pos >= geo.merge_end:
                    v.status = "failed"
                    v.speed = 0.0
                    v.accel = 0.0
                    v.lc_from = v.lc_to = None
                    v.lc_progress = 0
                    v.lat = 0.0
                    events.append(Event("ramp_fail", t, (v.id,)))

        # exits at the road end
        if any(v.pos > geo.road_end and v.lane < geo.ramp_lane for v in w.vehicles):
            kept = []
            for v in w.vehicles:
                if v.pos > geo.road_end and v.lane < geo.ramp_lane:
                    w.exited.append(v.id)
                    events.append(Event("exit", t, (v.id,)))
                else:
                    kept.append(v)
            w.vehicles = kept

        # collisions: sweep over position order
        order = sorted(w.vehicles, key=lambda u: (u.pos, u.id))
        hits = []
        for i, a in enumerate(order):
            for b in order[i + 1:]:
                if b.pos - a.pos >= max_len:
                    break
                if a.frozen and b.frozen:
                    continue
                if check_collision(a, b, geo.lane_width):
                    pair = (min(a.id, b.id), max(a.id, b.id))
                    if pair not in collided_pairs:
                        hits.append((pair, a, b))
        for pair, a, b in sorted(hits, key=lambda h: h[0]):
            collided_pairs.add(pair)
            events.append(Event("collision", t, pair))
            for u in (a, b):
                if not u.frozen:
                    u.status = "crashed"
                    u.speed = 0.0
                    u.accel = 0.0

    w.events.extend(events)
    w.last_events = events
    return w, events
