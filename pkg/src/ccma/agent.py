"""Individual-level agent: tabular Q-learning served behind a hazard mask."""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

from ccma.errors import ConfigError, InputError
from ccma.reward import RewardWeights, breakdown, ego_reward, lookahead, total_reward
from ccma.scenario import ScenarioConfig
from ccma.sim.lanes import bumper_gap
from ccma.sim.observe import R_OBS, observe, ttc_front
from ccma.sim.types import (
    ACTIONS,
    TIE_ORDER,
    MetaAction,
    Observation,
    RoadGeometry,
    VehicleKind,
    WorldState,
)
from ccma.sim.world import lane_change_valid, step

SPEED_EDGES = (0.0, 7.0, 14.0, 21.0, 28.0, 35.0)
GAP_EDGES = (10.0, 25.0, 50.0)
RAMP_EDGES = (30.0, 80.0)
LANE_CLASSES = ("ramp", "right", "other")
TTC_MIN = 1.5

FeatureKey = tuple[int, int, int, int, int, int]


def _bucket(x: float, edges: Sequence[float]) -> int:
    """Half-open [lo, hi) bins; values beyond the last edge land in the last bin."""
    for i, e in enumerate(edges):
        if x < e:
            return i
    return len(edges)


def speed_bucket(v: float) -> int:
    # five bins over [0, 35]; the cap itself belongs to the top bin
    return min(4, max(0, _bucket(v, SPEED_EDGES[1:-1])))


def discretize(obs: Observation, geometry: RoadGeometry = RoadGeometry()) -> FeatureKey:
    ego = obs.ego
    ramp = geometry.ramp_lane
    if ego.lane == ramp and not ego.merged:
        lane_class, target = 0, ramp - 1
    elif ego.lane == geometry.main_lane_count - 1:
        lane_class, target = 1, ego.lane - 1
    else:
        lane_class, target = 2, ego.lane - 1 if ego.lane > 0 else ego.lane + 1
    lead = t_front = t_rear = math.inf
    for n in obs.neighbors:
        ahead = (n.pos, n.id) > (ego.pos, ego.id)
        if n.lane == ego.lane and ahead:
            lead = min(lead, bumper_gap(ego, n))
        if 0 <= target < geometry.main_lane_count and n.lane == target:
            if ahead:
                t_front = min(t_front, bumper_gap(ego, n))
            else:
                t_rear = min(t_rear, bumper_gap(n, ego))
    dist = obs.dist_to_ramp_end if lane_class == 0 and obs.dist_to_ramp_end is not None else math.inf
    return (
        speed_bucket(ego.speed),
        _bucket(lead, GAP_EDGES),
        _bucket(t_front, GAP_EDGES),
        _bucket(t_rear, GAP_EDGES),
        _bucket(dist, RAMP_EDGES),
        lane_class,
    )


def _hit(world: WorldState, vid: int) -> bool:
    return any(e.kind in ("collision", "ramp_fail") and vid in e.ids for e in world.last_events)


def hazard_mask(world: WorldState, vid: int, ttc_min: float = TTC_MIN) -> tuple[MetaAction, ...]:
    """Actions whose one-step lookahead is collision-free with ttc_front >= ttc_min.

    Falls back to (SLOWER,) when nothing qualifies.
    """
    v = world.get(vid)
    if v is None or v.kind is not VehicleKind.CAV:
        raise InputError(f"unknown CAV id {vid}")
    safe = []
    for act in ACTIONS:
        if not lane_change_valid(world, v, act):
            continue
        nxt = lookahead(world, vid, act)
        u = nxt.get(vid)
        if u is None:
            safe.append(act)
            continue
        if _hit(nxt, vid):
            continue
        if ttc_front(nxt, u) >= ttc_min:
            safe.append(act)
    return tuple(safe) if safe else (MetaAction.SLOWER,)


def q_update(q_sa: float, r: float, max_next: float, alpha: float, gamma: float) -> float:
    for x in (q_sa, r, max_next, alpha, gamma):
        if not math.isfinite(x):
            raise InputError("q_update inputs must be finite")
    if not 0 < alpha <= 1 or not 0 <= gamma < 1:
        raise InputError("alpha must be in (0, 1] and gamma in [0, 1)")
    return (1.0 - alpha) * q_sa + alpha * (r + gamma * max_next)


def greedy(row: Optional[Sequence[float]], mask: Sequence[MetaAction]) -> MetaAction:
    if not mask:
        raise InputError("empty action mask")
    if row is None:
        return MetaAction.IDLE if MetaAction.IDLE in mask else next(a for a in TIE_ORDER if a in mask)
    best, best_val = None, -math.inf
    for act in TIE_ORDER:
        if act in mask and (best is None or row[act.value] > best_val):
            best, best_val = act, row[act.value]
    return best


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 300
    alpha: float = 0.1
    gamma: float = 0.9
    eps_start: float = 1.0
    eps_end: float = 0.05
    seed: int = 0
    horizon: int = 40

    def __post_init__(self) -> None:
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")

    def epsilon(self, episode: int) -> float:
        if self.episodes <= 1:
            return self.eps_end
        frac = episode / (self.episodes - 1)
        return self.eps_start + (self.eps_end - self.eps_start) * frac

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Transition:
    reward: float
    next_key: Optional[tuple] = None
    next_mask: tuple = ()
    # value used in place of max Q(next) when next_key is None
    terminal_value: float = 0.0


class QEnv(Protocol):
    """Episodic multi-agent environment over discrete keys."""

    def reset(self, episode: int) -> dict[int, tuple[tuple, tuple]]: ...

    def step(self, actions: Mapping[int, object]) -> tuple[dict[int, Transition], dict[int, tuple[tuple, tuple]]]: ...


def run_q_learning(env: QEnv, tc: TrainConfig, n_actions: int = 5,
                   index_of=lambda a: a.value) -> tuple[dict[tuple, list[float]], list[float]]:
    """Shared-table epsilon-greedy Q-learning.

    Returns the table and per-episode undiscounted returns summed over agents.
    Masks list the admissible actions in canonical order; ``index_of`` maps an
    action to its table column. Greedy ties follow ``TIE_ORDER`` for meta
    actions and mask order otherwise.
    """
    rng = random.Random(tc.seed)
    q: dict[tuple, list[float]] = {}
    returns = []
    for ep in range(tc.episodes):
        eps = tc.epsilon(ep)
        pending = env.reset(ep)
        total = 0.0
        while pending:
            acts = {}
            for agent in sorted(pending):
                key, mask = pending[agent]
                if rng.random() < eps:
                    acts[agent] = mask[rng.randrange(len(mask))]
                else:
                    acts[agent] = _greedy_any(q.get(key), mask, index_of)
            trans, nxt_pending = env.step(acts)
            for agent in sorted(trans):
                tr = trans[agent]
                row = q.setdefault(pending[agent][0], [0.0] * n_actions)
                if tr.next_key is None:
                    nxt = tr.terminal_value
                else:
                    nrow = q.get(tr.next_key)
                    nxt = max(nrow[index_of(a)] for a in tr.next_mask) if nrow else 0.0
                col = index_of(acts[agent])
                row[col] = q_update(row[col], tr.reward, nxt, tc.alpha, tc.gamma)
                total += tr.reward
            pending = nxt_pending
        returns.append(total)
    return q, returns


def _greedy_any(row, mask, index_of):
    if isinstance(mask[0], MetaAction):
        return greedy(row, mask)
    if row is None:
        return mask[0]
    best = mask[0]
    for a in mask[1:]:
        if row[index_of(a)] > row[index_of(best)]:
            best = a
    return best


@dataclass
class PolicyArtifact:
    q: dict[FeatureKey, list[float]] = field(default_factory=dict)
    buckets: dict = field(default_factory=lambda: {
        "speed": list(SPEED_EDGES), "gap": list(GAP_EDGES), "ramp_end": list(RAMP_EDGES),
        "lane_class": list(LANE_CLASSES),
    })
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "buckets": self.buckets,
            "meta": self.meta,
            "q": {",".join(map(str, k)): v for k, v in sorted(self.q.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PolicyArtifact":
        q = {tuple(int(x) for x in k.split(",")): [float(x) for x in v] for k, v in d["q"].items()}
        for row in q.values():
            if len(row) != len(ACTIONS) or not all(math.isfinite(x) for x in row):
                raise ConfigError("policy rows must hold five finite values")
        return cls(q=q, buckets=dict(d.get("buckets", {})), meta=dict(d.get("meta", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PolicyArtifact":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"policy artifact not found: {p}")
        return cls.from_dict(json.loads(p.read_text()))


def act_individual(policy: PolicyArtifact, obs: Observation, mask: Sequence[MetaAction],
                   geometry: RoadGeometry = RoadGeometry()) -> MetaAction:
    if not mask:
        raise InputError("empty action mask")
    return greedy(policy.q.get(discretize(obs, geometry)), mask)


class MergeTrainingEnv:
    """Ramp CAVs learn until they merge, crash or run out of ramp.

    Step reward is the ego/cooperative total. A merge ends the agent's episode
    with the current reward carried forward as a perpetuity, so merging is
    valued like continuing to drive; crashes, ramp-end failures and reaching
    the horizon unmerged end it with nothing further.
    """

    def __init__(self, scenarios: Sequence[ScenarioConfig], weights: RewardWeights,
                 tc: TrainConfig, r_obs: float = R_OBS):
        if not scenarios:
            raise ConfigError("at least one training scenario is required")
        self.scenarios = list(scenarios)
        self.weights = weights.normalized()
        self.tc = tc
        self.r_obs = r_obs
        self.seed_rng = random.Random(tc.seed + 7919)
        self.world: Optional[WorldState] = None
        self.t = 0

    def _pending(self) -> dict[int, tuple]:
        out = {}
        geo = self.world.geometry
        for v in self.world.vehicles:
            if v.kind is VehicleKind.CAV and not v.frozen and not v.merged:
                key = discretize(observe(self.world, v.id, self.r_obs), geo)
                out[v.id] = (key, hazard_mask(self.world, v.id))
        return out

    def reset(self, episode: int) -> dict[int, tuple]:
        scen = self.scenarios[episode % len(self.scenarios)]
        self.world = scen.spawn(self.seed_rng.randrange(2**31))
        self.t = 0
        return self._pending()

    def step(self, actions):
        nxt, _ = step(self.world, actions)
        self.world = nxt
        self.t += 1
        truncated = self.t >= self.tc.horizon
        pending = {} if truncated else self._pending()
        trans = {}
        for vid in actions:
            v = nxt.get(vid)
            b = breakdown(nxt, vid, self.weights, self.r_obs)
            r = total_reward(ego_reward(b, self.weights), b.coop, self.weights)
            if v.frozen:
                trans[vid] = Transition(r)
            elif v.merged:
                trans[vid] = Transition(r, terminal_value=r / (1.0 - self.tc.gamma))
            elif truncated:
                # still on the ramp at the horizon counts as a failed merge
                trans[vid] = Transition(r)
            else:
                trans[vid] = Transition(r, *pending[vid])
        return trans, pending


def train(scenarios: ScenarioConfig | Sequence[ScenarioConfig], weights: RewardWeights,
          tc: TrainConfig) -> tuple[PolicyArtifact, list[float]]:
    """Train the shared ramp-merging Q table; returns the artifact and episode returns."""
    if isinstance(scenarios, ScenarioConfig):
        scenarios = [scenarios]
    env = MergeTrainingEnv(scenarios, weights, tc)
    q, returns = run_q_learning(env, tc)
    meta = {
        "config_hash": tc.digest(),
        "seed": tc.seed,
        "episodes": tc.episodes,
        "train_config": asdict(tc),
        "scenarios": [s.to_dict() for s in scenarios],
        "weights": weights.to_dict(),
    }
    return PolicyArtifact(q=q, meta=meta), returns
