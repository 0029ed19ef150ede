"""Regional coordination: regions, action scores, softmax policy, messages, arbitration.

The rule oracle is a gap-acceptance coordinator. Ramp CAVs pick the target
lane gap that needs the smallest speed change, merge when both the lead and
the lag gap are acceptable, and otherwise align their speed with the gap.
The lag vehicle behind a merging CAV is asked to yield.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from ccma.agent import hazard_mask
from ccma.errors import CoordinationError, InputError
from ccma.reward import DEFAULT_WEIGHTS, RewardWeights, one_step_values
from ccma.sim.lanes import LaneIndex, bumper_gap
from ccma.sim.models import DEFAULT_IDM
from ccma.sim.observe import R_OBS, distance, on_ramp
from ccma.sim.types import ACTIONS, SPEED_CAP, SUBSTEP_DT, TIE_ORDER, MetaAction, VehicleKind, VehicleState, WorldState
from ccma.sim.world import HDV_NOTICE, lane_change_valid, mobil_safe

REASONS = ("merge_request", "gap_offer", "hold", "yield_left")
SOURCES = ("rule_oracle", "remote_lm", "fallback")

BONUS = 1.0
MASK_PENALTY = -10.0
T_ALIGN = 3.0  # seconds to close onto a gap centre
GAP_OPEN = 30.0  # centre offset for gaps open at one end
MIN_GAP = DEFAULT_IDM.s0 + 10.0  # smallest usable gap, bumper to bumper
APPROACH = 50.0  # yield requests start this far before the merge zone
COOP_SPAN = 100.0  # extra rear clearance requested per unit of w_coop
SPEED_BAND = 1.0
B_ACC_FLOOR = 0.5
T_REACT = 0.5  # lag drivers notice a merging car late
MIN_CLEAR = 2.0


@dataclass(frozen=True)
class Region:
    center_id: int
    member_ids: frozenset[int]
    radius: float = R_OBS


@dataclass(frozen=True)
class CommMessage:
    sender: int
    tick: int
    intent: MetaAction
    reason: str
    target: Optional[int] = None

    def __post_init__(self) -> None:
        if self.reason not in REASONS:
            raise InputError(f"unknown message reason {self.reason!r}")

    def to_dict(self) -> dict:
        return {"sender": self.sender, "tick": self.tick, "intent": self.intent.name,
                "reason": self.reason, "target": self.target}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CommMessage":
        return cls(int(d["sender"]), int(d["tick"]), MetaAction.from_name(d["intent"]),
                   str(d["reason"]), None if d.get("target") is None else int(d["target"]))


@dataclass(frozen=True)
class ActionScores:
    """Per-member logits in canonical action order."""

    scores: Mapping[int, tuple[float, ...]]
    tags: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for vid, row in self.scores.items():
            if len(row) != len(ACTIONS):
                raise InputError(f"member {vid}: expected {len(ACTIONS)} scores")
            if not all(math.isfinite(x) for x in row):
                raise InputError(f"member {vid}: non-finite score")


@dataclass
class MemberDecision:
    id: int
    action: MetaAction
    reason: str


@dataclass
class RegionalDecision:
    region: int
    source: str
    decisions: list[MemberDecision] = field(default_factory=list)
    messages: list[CommMessage] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise InputError(f"unknown decision source {self.source!r}")
        ids = [d.id for d in self.decisions]
        if len(ids) != len(set(ids)):
            raise InputError("a member appears more than once")

    def action_of(self, vid: int) -> Optional[MetaAction]:
        for d in self.decisions:
            if d.id == vid:
                return d.action
        return None

    def to_dict(self) -> dict:
        return {
            "region": self.region,
            "source": self.source,
            "decisions": [{"id": d.id, "action": d.action.name, "reason": d.reason} for d in self.decisions],
            "messages": [m.to_dict() for m in self.messages],
        }

    def same_choices(self, other: "RegionalDecision") -> bool:
        a, b = self.to_dict(), other.to_dict()
        a.pop("source")
        b.pop("source")
        return a == b


@dataclass
class JointAction:
    actions: dict[int, MetaAction]
    advisories: dict[int, MetaAction] = field(default_factory=dict)


# ---------------------------------------------------------------- regions

def form_regions(world: WorldState, radius: float = R_OBS) -> list[Region]:
    if not radius > 0:
        raise InputError("radius must be > 0")
    centers = [v for v in world.vehicles
               if v.kind is VehicleKind.CAV and not v.frozen and on_ramp(world, v)]
    groups: list[tuple[list[int], set[int]]] = []
    for c in centers:
        members = {u.id for u in world.vehicles if distance(world, c, u) <= radius}
        groups.append(([c.id], members))
    # union overlapping member sets until stable
    merged = True
    while merged:
        merged = False
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                if groups[i][1] & groups[j][1]:
                    ci, mi = groups[i]
                    cj, mj = groups.pop(j)
                    groups[i] = (ci + cj, mi | mj)
                    merged = True
                    break
            if merged:
                break
    regions = [Region(min(cs), frozenset(ms), radius) for cs, ms in groups]
    return sorted(regions, key=lambda r: r.center_id)


# ---------------------------------------------------------------- softmax

def softmax_policy(scores: ActionScores | Mapping[int, Sequence[float]],
                   temperature: float = 1.0) -> dict[int, tuple[float, ...]]:
    if not temperature >= 1e-6:
        raise InputError("temperature must be >= 1e-6")
    rows = scores.scores if isinstance(scores, ActionScores) else scores
    out = {}
    for vid, row in rows.items():
        if not all(math.isfinite(x) for x in row):
            raise InputError(f"member {vid}: non-finite score")
        top = max(row)
        ex = [math.exp((x - top) / temperature) for x in row]
        s = sum(ex)
        out[vid] = tuple(e / s for e in ex)
    return out


def _argmax_action(probs: Sequence[float]) -> MetaAction:
    best, best_p = None, -1.0
    for act in TIE_ORDER:
        if probs[act.value] > best_p:
            best, best_p = act, probs[act.value]
    return best


# ---------------------------------------------------------------- rule oracle

@dataclass(frozen=True)
class GapChoice:
    lag: Optional[int]
    lead: Optional[int]
    desired_speed: float
    cost: float


def _target_lane_members(world: WorldState, region: Region, lane: int) -> list[VehicleState]:
    out = [world.get(i) for i in region.member_ids]
    out = [v for v in out if v is not None and (v.lane == lane or v.lc_to == lane)]
    return sorted(out, key=lambda u: (u.pos, u.id))


def select_gap(world: WorldState, region: Region, ego: VehicleState) -> Optional[GapChoice]:
    """Target-lane gap whose centre needs the smallest speed change to reach."""
    lane = world.geometry.ramp_lane - 1
    line = [v for v in _target_lane_members(world, region, lane) if v.id != ego.id]
    if not line:
        return None
    bounds = [(None, line[0])] + list(zip(line, line[1:])) + [(line[-1], None)]
    cands = []
    for lag, lead in bounds:
        if lag is not None and lead is not None:
            if bumper_gap(lag, lead) < MIN_GAP:
                continue
            centre = 0.5 * (lag.pos + lead.pos)
            speed = 0.5 * (lag.speed + lead.speed)
        elif lead is not None:
            centre, speed = lead.pos - GAP_OPEN, lead.speed
        else:
            centre, speed = lag.pos + GAP_OPEN, lag.speed
        desired = min(SPEED_CAP, max(0.0, speed + (centre - ego.pos) / T_ALIGN))
        cands.append(GapChoice(None if lag is None else lag.id, None if lead is None else lead.id,
                               desired, abs(desired - ego.speed)))
    return min(cands, key=lambda g: (g.cost, g.desired_speed))


def _physical_neighbors(world: WorldState, ego: VehicleState, lane: int):
    lag = lead = None
    for v in world.vehicles:
        if v.id == ego.id or not (v.lane == lane or v.lc_to == lane):
            continue
        if (v.pos, v.id) > (ego.pos, ego.id):
            if lead is None or (v.pos, v.id) < (lead.pos, lead.id):
                lead = v
        elif lag is None or (v.pos, v.id) > (lag.pos, lag.id):
            lag = v
    return lag, lead


def accept_decel(w: RewardWeights) -> float:
    """Braking a merge may demand of either party; stricter as w_safe grows."""
    return max(B_ACC_FLOOR, DEFAULT_IDM.b * (1.0 - w.normalized().w_safe))


def required_gap(follower_speed: float, leader_speed: float, b_acc: float,
                 blind: float = 0.0) -> float:
    """Bumper gap that absorbs a reaction delay and the closing speed at ``b_acc``.

    ``blind`` is time during which the follower has not yet seen the cut-in and
    keeps closing at full speed difference.
    """
    closing = max(0.0, follower_speed - leader_speed)
    return MIN_CLEAR + follower_speed * T_REACT + closing * blind + closing ** 2 / (2.0 * b_acc)


def merge_acceptable(world: WorldState, ego: VehicleState, w: RewardWeights) -> bool:
    lane = world.geometry.ramp_lane - 1
    lag, lead = _physical_neighbors(world, ego, lane)
    b_acc = accept_decel(w)
    if lead is not None and bumper_gap(ego, lead) < required_gap(ego.speed, lead.speed, b_acc):
        return False
    blind = HDV_NOTICE * SUBSTEP_DT if lag is not None and lag.kind is VehicleKind.HDV else 0.0
    if lag is not None and bumper_gap(lag, ego) < required_gap(lag.speed, ego.speed, b_acc, blind):
        return False
    return True


def yield_threshold(w: RewardWeights) -> float:
    """Rear clearance below which the lag is asked to yield."""
    base = DEFAULT_IDM.s0 + 5.0
    return base + w.normalized().w_coop * COOP_SPAN


def _stop_distance(v: VehicleState) -> float:
    return v.speed ** 2 / (2.0 * 3.0) + v.length


def _lift(row: list[float], act: MetaAction) -> None:
    row[act.value] = max(row) + BONUS


def rule_oracle_scores(region: Region, world: WorldState, w: RewardWeights = DEFAULT_WEIGHTS,
                       r_obs: float = R_OBS) -> ActionScores:
    """Scores for every region member, tagged with a one-word rationale."""
    geo = world.geometry
    target_lane = geo.ramp_lane - 1
    members = sorted(region.member_ids)
    rows: dict[int, list[float]] = {}
    tags: dict[int, str] = {}
    masks: dict[int, tuple[MetaAction, ...]] = {}

    for vid in members:
        v = world.get(vid)
        if v.kind is VehicleKind.CAV and not v.frozen:
            masks[vid] = hazard_mask(world, vid)
            vals = one_step_values(world, vid, ACTIONS, w, r_obs)
            rows[vid] = [vals[a] if a in masks[vid] else vals[a] + MASK_PENALTY for a in ACTIONS]
            tags[vid] = "best_response"
        else:
            rows[vid] = [0.0] * len(ACTIONS)
            tags[vid] = "keep"

    alone = len(members) == 1
    yielders: dict[int, tuple[MetaAction, int]] = {}
    index = None
    for vid in members:
        ego = world.get(vid)
        if ego.kind is not VehicleKind.CAV or ego.frozen or not on_ramp(world, ego):
            continue
        row, mask = rows[vid], masks[vid]
        near_end = geo.merge_end - ego.pos < _stop_distance(ego) + 10.0
        gap = None if alone else select_gap(world, region, ego)
        in_zone = lane_change_valid(world, ego, MetaAction.LANE_LEFT)
        tag = "align_gap"
        if gap is None:
            # nothing to align with, but never run out of ramp
            want = MetaAction.SLOWER if near_end and not (in_zone and MetaAction.LANE_LEFT in mask) else None
        elif in_zone and MetaAction.LANE_LEFT in mask and merge_acceptable(world, ego, w):
            want, tag = MetaAction.LANE_LEFT, "merge"
        elif near_end:
            want = MetaAction.SLOWER
        elif gap.desired_speed > ego.target_speed + SPEED_BAND:
            want = MetaAction.FASTER
        elif gap.desired_speed < ego.target_speed - SPEED_BAND:
            want = MetaAction.SLOWER
        else:
            want = MetaAction.IDLE
        if want is not None and want in mask:
            _lift(row, want)
            tags[vid] = tag
        if alone or gap is None or ego.pos < geo.merge_start - APPROACH:
            continue
        lag, _ = _physical_neighbors(world, ego, target_lane)
        if lag is None or lag.id not in region.member_ids or lag.frozen or lag.id in yielders:
            continue
        if bumper_gap(lag, ego) >= yield_threshold(w):
            continue
        if index is None:
            index = LaneIndex(world.vehicles, geo.main_lane_count + 1)
        act = MetaAction.SLOWER
        if lag.lane > 0 and not lag.changing and mobil_safe(index, lag, lag.lane - 1):
            act = MetaAction.LANE_LEFT
        yielders[lag.id] = (act, ego.id)

    for vid in members:
        if vid in yielders:
            _lift(rows[vid], yielders[vid][0])
            tags[vid] = "yield"
        elif tags[vid] in ("best_response", "keep") and not _is_ramp_cav(world, vid):
            _lift(rows[vid], MetaAction.IDLE)
            tags[vid] = "keep"
    return ActionScores({vid: tuple(rows[vid]) for vid in members}, tags)


def _is_ramp_cav(world: WorldState, vid: int) -> bool:
    v = world.get(vid)
    return v.kind is VehicleKind.CAV and not v.frozen and on_ramp(world, v)


# ---------------------------------------------------------------- coordination

def _message_for(world: WorldState, d: MemberDecision, tick: int,
                 yield_targets: Mapping[int, int]) -> CommMessage:
    v = world.get(d.id)
    target = yield_targets.get(d.id)
    if v.kind is VehicleKind.CAV and on_ramp(world, v) and d.action is MetaAction.LANE_LEFT:
        lag, _ = _physical_neighbors(world, v, world.geometry.ramp_lane - 1)
        return CommMessage(d.id, tick, d.action, "merge_request", None if lag is None else lag.id)
    if target is not None and d.action is MetaAction.LANE_LEFT:
        return CommMessage(d.id, tick, d.action, "yield_left", target)
    if target is not None and d.action is MetaAction.SLOWER:
        return CommMessage(d.id, tick, d.action, "gap_offer", target)
    return CommMessage(d.id, tick, d.action, "hold", target)


def _yield_targets(world: WorldState, region: Region) -> dict[int, int]:
    """Lag vehicle -> ramp CAV it sits behind, for message targets."""
    out = {}
    lane = world.geometry.ramp_lane - 1
    for vid in sorted(region.member_ids):
        if _is_ramp_cav(world, vid):
            lag, _ = _physical_neighbors(world, world.get(vid), lane)
            if lag is not None and lag.id in region.member_ids and lag.id not in out:
                out[lag.id] = vid
    return out


def decide_from_scores(region: Region, world: WorldState, scores: ActionScores, source: str, temperature: float = 1.0,
                       rng: Optional[random.Random] = None) -> RegionalDecision:
    probs = softmax_policy(scores, temperature)
    decisions = []
    for vid in sorted(probs):
        if rng is None:
            act = _argmax_action(probs[vid])
        else:
            act = rng.choices(ACTIONS, weights=probs[vid])[0]
        decisions.append(MemberDecision(vid, act, scores.tags.get(vid, "keep")))
    targets = _yield_targets(world, region)
    messages = [_message_for(world, d, world.tick // 10, targets)
                for d in decisions if d.action is not MetaAction.IDLE]
    return RegionalDecision(region.center_id, source, decisions, messages)


def coordinate(region: Region, world: WorldState, backend: str = "rule_oracle",
               inbox: Sequence[CommMessage] = (), temperature: float = 1.0,
               w: RewardWeights = DEFAULT_WEIGHTS, lm=None, fallback: bool = True,
               rng: Optional[random.Random] = None) -> RegionalDecision:
    """One regional decision.

    ``lm`` must provide ``decide(region, world, inbox) -> RegionalDecision``
    when ``backend`` is ``remote_lm``; its failures fall back to the rule oracle.
    """
    if backend == "rule_oracle":
        return decide_from_scores(region, world, rule_oracle_scores(region, world, w),
                                  "rule_oracle", temperature, rng)
    if backend != "remote_lm":
        raise InputError(f"unknown backend {backend!r}")
    from ccma.llm import lm_scores

    try:
        if lm is None:
            raise CoordinationError("no language-model client configured")
        raw = lm.decide(region, world, inbox)
    except Exception as exc:  # any backend failure degrades the same way
        if not fallback:
            if isinstance(exc, CoordinationError):
                raise
            raise CoordinationError(f"remote backend failed: {exc}") from exc
        return decide_from_scores(region, world, rule_oracle_scores(region, world, w),
                                  "fallback", temperature, rng)
    return decide_from_scores(region, world, lm_scores(raw, region), "remote_lm", temperature, rng)


def broadcast(decisions: Iterable[RegionalDecision], world: WorldState,
              r_obs: float = R_OBS) -> dict[int, list[CommMessage]]:
    inbox: dict[int, list[CommMessage]] = {v.id: [] for v in world.vehicles}
    for dec in decisions:
        for m in dec.messages:
            sender = world.get(m.sender)
            if sender is None:
                continue
            for v in world.vehicles:
                if v.id != m.sender and distance(world, sender, v) <= r_obs:
                    inbox[v.id].append(m)
    for msgs in inbox.values():
        msgs.sort(key=lambda m: (m.tick, m.sender, m.intent.value, m.reason))
    return inbox


def arbitrate(p1: Mapping[int, MetaAction], p2: Optional[Iterable[RegionalDecision]],
              masks: Mapping[int, Sequence[MetaAction]],
              cooperative: Iterable[int] = ()) -> JointAction:
    """P2 overrides P1 where mask-safe; HDV advisories only for cooperative HDVs."""
    actions = dict(p1)
    advisories: dict[int, MetaAction] = {}
    coop = set(cooperative)
    for dec in p2 or ():
        for d in dec.decisions:
            if d.id in actions:
                if d.action in masks.get(d.id, ()):
                    actions[d.id] = d.action
            elif d.id in coop and d.action in (MetaAction.SLOWER, MetaAction.LANE_LEFT):
                advisories[d.id] = d.action
    return JointAction(actions, advisories)
