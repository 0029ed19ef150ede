"""Joint reward, ego/cooperative combination and the one-step best response.

Component forms: flow is the mean speed ratio against the 35 m/s cap,
comfort penalises acceleration changes beyond a threshold, safety is a
time-to-collision floor and cooperation is the mean welfare of neighbours.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterable, Mapping, Optional

from ccma.errors import InputError
from ccma.sim.observe import R_OBS, observe, ttc_front
from ccma.sim.types import SPEED_CAP, TIE_ORDER, MetaAction, VehicleState, WorldState
from ccma.sim.world import step

COMPONENT_WEIGHTS = ("w_flow", "w_comf", "w_coop", "w_safe")
_UNIT_TOL = 1e-12


@dataclass(frozen=True)
class RewardWeights:
    w_flow: float = 0.35
    w_comf: float = 0.15
    w_coop: float = 0.2
    w_safe: float = 0.3
    w_ego: float = 0.6
    w_coop_total: float = 0.4
    accel_threshold: float = 3.0
    ttc_safe: float = 4.0

    def __post_init__(self) -> None:
        for f in fields(self):
            val = getattr(self, f.name)
            if not math.isfinite(val) or val < 0:
                raise InputError(f"{f.name} must be finite and >= 0")
        if self.accel_threshold <= 0 or self.ttc_safe <= 0:
            raise InputError("accel_threshold and ttc_safe must be > 0")

    def normalized(self) -> "RewardWeights":
        """Rescale each weight group to unit sum; all-zero groups stay zero."""
        s1 = self.w_flow + self.w_comf + self.w_coop + self.w_safe
        s2 = self.w_ego + self.w_coop_total
        out = self
        # groups already at unit sum (to rounding) are kept so that normalising is idempotent
        if s1 > 0 and abs(s1 - 1.0) > _UNIT_TOL:
            out = replace(out, w_flow=self.w_flow / s1, w_comf=self.w_comf / s1,
                          w_coop=self.w_coop / s1, w_safe=self.w_safe / s1)
        if s2 > 0 and abs(s2 - 1.0) > _UNIT_TOL:
            out = replace(out, w_ego=self.w_ego / s2, w_coop_total=self.w_coop_total / s2)
        return out

    def components(self) -> tuple[float, float, float, float]:
        return (self.w_flow, self.w_comf, self.w_coop, self.w_safe)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RewardWeights":
        known = {f.name for f in fields(cls)}
        return cls(**{k: float(v) for k, v in d.items() if k in known})

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


DEFAULT_WEIGHTS = RewardWeights()


@dataclass(frozen=True)
class RewardBreakdown:
    id: int
    flow: float
    comf: float
    coop: float
    safe: float
    total: float


def r_flow(world: WorldState) -> float:
    speeds = [v.speed for v in world.vehicles if not v.frozen]
    if not speeds:
        return 0.0
    return min(1.0, sum(speeds) / len(speeds) / SPEED_CAP)


def r_comf(accel: float, prev_accel: float, threshold: float = 3.0) -> float:
    if threshold <= 0:
        raise InputError("threshold must be > 0")
    j = abs(accel - prev_accel)
    if j <= threshold:
        return 1.0
    return max(0.0, 1.0 - (j - threshold) / threshold)


def _hit_this_step(world: WorldState, vid: int) -> bool:
    # running off the ramp end counts as striking the ramp-end barrier
    return any(e.kind in ("collision", "ramp_fail") and vid in e.ids for e in world.last_events)


def _ttc_score(world: WorldState, v: VehicleState, ttc_safe: float) -> float:
    ttc = ttc_front(world, v)
    return 1.0 if ttc == math.inf else min(1.0, ttc / ttc_safe)


def r_safe(world_after: WorldState, vid: int, ttc_safe: float = 4.0) -> float:
    v = world_after.get(vid)
    if v is None:
        raise InputError(f"unknown vehicle id {vid}")
    if _hit_this_step(world_after, vid):
        return -1.0
    return _ttc_score(world_after, v, ttc_safe)


def vehicle_score(world: WorldState, v: VehicleState, ttc_safe: float = 4.0) -> float:
    """Per-vehicle ego score in [0, 1] used for neighbour welfare."""
    return 0.5 * min(1.0, v.speed / SPEED_CAP) + 0.5 * _ttc_score(world, v, ttc_safe)


def r_coop(world_after: WorldState, vid: int, r_obs: float = R_OBS, ttc_safe: float = 4.0) -> float:
    obs = observe(world_after, vid, r_obs)
    if not obs.neighbors:
        return 0.0
    scores = [2.0 * vehicle_score(world_after, n, ttc_safe) - 1.0 for n in obs.neighbors]
    return sum(scores) / len(scores)


def weighted_total(flow: float, comf: float, coop: float, safe: float, w: RewardWeights) -> float:
    return w.w_flow * flow + w.w_comf * comf + w.w_coop * coop + w.w_safe * safe


def breakdown(world_after: WorldState, vid: int, w: RewardWeights, r_obs: float = R_OBS) -> RewardBreakdown:
    v = world_after.get(vid)
    if v is None:
        raise InputError(f"unknown vehicle id {vid}")
    flow = r_flow(world_after)
    comf = r_comf(v.accel, v.prev_accel, w.accel_threshold)
    coop = r_coop(world_after, vid, r_obs, w.ttc_safe)
    safe = r_safe(world_after, vid, w.ttc_safe)
    return RewardBreakdown(vid, flow, comf, coop, safe, weighted_total(flow, comf, coop, safe, w))


def joint_reward(s: WorldState, a: Mapping[int, MetaAction], s_next: WorldState,
                 w: RewardWeights, r_obs: float = R_OBS) -> dict[int, RewardBreakdown]:
    """Per-CAV joint reward for the transition ``s --a--> s_next``."""
    return {v.id: breakdown(s_next, v.id, w, r_obs) for v in s_next.cavs()}


def ego_reward(b: RewardBreakdown, w: RewardWeights) -> float:
    denom = w.w_flow + w.w_comf + w.w_safe
    if denom <= 0:
        return 0.0
    return (w.w_flow * b.flow + w.w_comf * b.comf + w.w_safe * b.safe) / denom


def total_reward(r_ego: float, r_coop_value: float, w: RewardWeights) -> float:
    return w.w_ego * r_ego + w.w_coop_total * r_coop_value


def lookahead(world: WorldState, vid: int, action: MetaAction) -> WorldState:
    """One decision step with ``vid`` taking ``action`` and every other CAV IDLE.

    Results are memoised on the (immutable) source world.
    """
    key = (vid, action)
    hit = world.lookahead_cache.get(key)
    if hit is None:
        hit, _ = step(world, {vid: action})
        world.lookahead_cache[key] = hit
    return hit


def argmax_tie(values: Mapping[MetaAction, float]) -> MetaAction:
    """Highest value; exact ties resolved by ``TIE_ORDER``."""
    best, best_val = None, -math.inf
    for act in TIE_ORDER:
        if act in values and (best is None or values[act] > best_val):
            best, best_val = act, values[act]
    if best is None:
        raise InputError("no candidate actions")
    return best


def one_step_values(world: WorldState, vid: int, candidates: Iterable[MetaAction],
                    w: RewardWeights, r_obs: float = R_OBS) -> dict[MetaAction, float]:
    out = {}
    for act in candidates:
        nxt = lookahead(world, vid, act)
        b = breakdown(nxt, vid, w, r_obs)
        out[act] = total_reward(ego_reward(b, w), b.coop, w)
    return out


def best_response(world: WorldState, vid: int, candidates: Iterable[MetaAction],
                  w: RewardWeights = DEFAULT_WEIGHTS, r_obs: float = R_OBS,
                  values: Optional[Mapping[MetaAction, float]] = None) -> MetaAction:
    """Action maximising the ego/cooperative total after one simulated step."""
    candidates = list(candidates)
    if not candidates:
        raise InputError("empty candidate set")
    if len(candidates) == 1:
        return candidates[0]
    if values is None:
        values = one_step_values(world, vid, candidates, w, r_obs)
    return argmax_tie({a: values[a] for a in candidates})
