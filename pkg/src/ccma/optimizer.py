"""Global reward-weight optimisation with a retrieval-augmented record store.

Each loop iteration observes the metrics of the current weights, picks the
largest deficit, moves a little weight mass onto the matching reward term,
and optionally blends in the weights of a better stored record for a
similar scenario.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from ccma.errors import ConfigError, InputError
from ccma.harness import EpisodeMetrics, ExperimentConfig, aggregate, run_experiment
from ccma.reward import DEFAULT_WEIGHTS, COMPONENT_WEIGHTS, RewardWeights
from ccma.scenario import ScenarioConfig
from ccma.sim.types import STYLE_ORDER
from ccma.sim.world import DENSITIES

log = logging.getLogger(__name__)

MERGE_TIME_SCALE = 40.0
DELTA = 0.05
DELTA_FLOOR = 0.0125
ACCEPT_EPS = 1e-4
RAG_MARGIN = 0.02
RAG_K = 3

# deficit name -> weight it feeds, in tie-break order
DEFICIT_TARGET = (("safe", "w_safe"), ("succ", "w_coop"), ("flow", "w_flow"))


@dataclass(frozen=True)
class ScenarioDescriptor:
    density: tuple[float, float, float]
    style_mix: tuple[float, float, float]
    n_cavs: int
    geometry_hash: str

    def __post_init__(self) -> None:
        if any(x < 0 for x in self.style_mix) or abs(sum(self.style_mix) - 1.0) > 1e-9:
            raise InputError("style_mix must be nonnegative and sum to 1")

    @classmethod
    def from_scenario(cls, s: ScenarioConfig) -> "ScenarioDescriptor":
        onehot = tuple(1.0 if d == s.density else 0.0 for d in DENSITIES)
        mix = s.style_dict()
        return cls(onehot, tuple(mix[k] for k in STYLE_ORDER), s.n_cavs, s.geometry.stable_hash())

    def to_dict(self) -> dict:
        return {"density": list(self.density), "style_mix": list(self.style_mix),
                "n_cavs": self.n_cavs, "geometry_hash": self.geometry_hash}

    @classmethod
    def from_dict(cls, d) -> "ScenarioDescriptor":
        return cls(tuple(float(x) for x in d["density"]), tuple(float(x) for x in d["style_mix"]),
                   int(d["n_cavs"]), str(d["geometry_hash"]))


def descriptor_distance(a: ScenarioDescriptor, b: ScenarioDescriptor) -> float:
    return (sum(abs(x - y) for x, y in zip(a.density, b.density))
            + sum(abs(x - y) for x, y in zip(a.style_mix, b.style_mix))
            + abs(a.n_cavs - b.n_cavs) / 8.0
            + (0.0 if a.geometry_hash == b.geometry_hash else 1.0))


def objective_J(m: EpisodeMetrics) -> float:
    """success - 2 * collisions - 0.2 * merge_time / 40 s (no merges counts as 40 s)."""
    t = MERGE_TIME_SCALE if m.mean_merge_time is None else m.mean_merge_time
    return m.success_rate - 2.0 * m.collision_rate - 0.2 * (t / MERGE_TIME_SCALE)


@dataclass(frozen=True)
class RewardRecord:
    id: int
    descriptor: ScenarioDescriptor
    weights: RewardWeights
    metrics: EpisodeMetrics
    objective: float
    created_at: float = 0.0

    def to_dict(self) -> dict:
        return {"id": self.id, "created_at": self.created_at, "descriptor": self.descriptor.to_dict(),
                "weights": self.weights.to_dict(), "metrics": self.metrics.to_dict(),
                "objective": self.objective}

    @classmethod
    def from_dict(cls, d) -> "RewardRecord":
        return cls(int(d["id"]), ScenarioDescriptor.from_dict(d["descriptor"]),
                   RewardWeights.from_dict(d["weights"]), EpisodeMetrics.from_dict(d["metrics"]),
                   float(d["objective"]), float(d.get("created_at", 0.0)))


class RewardStore:
    """Append-only records, mirrored line by line to a JSONL file when a path is set."""

    def __init__(self, path: Optional[str | Path] = None, records: Iterable[RewardRecord] = (),
                 clock: Callable[[], float] = time.time):
        self.path = None if path is None else Path(path)
        self.records: list[RewardRecord] = list(records)
        self.clock = clock

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @classmethod
    def load(cls, path: str | Path, clock: Callable[[], float] = time.time) -> "RewardStore":
        p = Path(path)
        records = []
        if p.exists():
            lines = p.read_text(encoding="utf-8").splitlines()
            for n, line in enumerate(lines, 1):
                if not line.strip():
                    continue
                try:
                    records.append(RewardRecord.from_dict(json.loads(line)))
                except (ValueError, KeyError, TypeError) as exc:
                    if n == len(lines):
                        # torn final write from an interrupted run
                        log.warning("%s:%d: dropping incomplete record", p, n)
                        continue
                    raise ConfigError(f"{p}:{n}: corrupt reward record ({exc})") from None
        return cls(p, records, clock)

    def append(self, descriptor: ScenarioDescriptor, weights: RewardWeights,
               metrics: EpisodeMetrics) -> RewardRecord:
        next_id = self.records[-1].id + 1 if self.records else 1
        rec = RewardRecord(next_id, descriptor, weights, metrics, objective_J(metrics), self.clock())
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.to_dict()) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        self.records.append(rec)
        return rec


def retrieve(store: RewardStore | Sequence[RewardRecord], descriptor: ScenarioDescriptor,
             k: int = RAG_K) -> list[RewardRecord]:
    if k < 1:
        raise InputError("k must be >= 1")
    recs = list(store)
    recs.sort(key=lambda r: (descriptor_distance(r.descriptor, descriptor), -r.objective, -r.id))
    return recs[:k]


def shift_mass(w: RewardWeights, target: str, delta: float) -> RewardWeights:
    """Move ``delta`` of component weight mass onto ``target``, taken pro-rata from the rest."""
    w = w.normalized()
    cur = getattr(w, target)
    new = min(1.0, cur + delta)
    rest = 1.0 - cur
    if rest <= 0:
        return w
    k = (1.0 - new) / rest
    vals = {f: (new if f == target else getattr(w, f) * k) for f in COMPONENT_WEIGHTS}
    return replace(w, **vals).normalized()


def blend(a: RewardWeights, b: RewardWeights, t: float = 0.5) -> RewardWeights:
    da, db = a.to_dict(), b.to_dict()
    return RewardWeights(**{k: (1 - t) * da[k] + t * db[k] for k in da}).normalized()


def reflect_propose(current: RewardWeights, metrics: EpisodeMetrics,
                    retrieved: Sequence[RewardRecord] = (), delta: float = DELTA) -> RewardWeights:
    # Observation
    deficits = {"safe": metrics.collision_rate, "succ": 1.0 - metrics.success_rate,
                "flow": 1.0 - metrics.mean_speed_ratio}
    if all(v <= 0 for v in deficits.values()):
        return current
    # Critical thinking: largest deficit, ties in DEFICIT_TARGET order
    name, target = max(DEFICIT_TARGET, key=lambda p: (deficits[p[0]], -DEFICIT_TARGET.index(p)))
    # Reflection
    proposal = shift_mass(current, target, delta)
    # RAG
    j = objective_J(metrics)
    for rec in retrieved:
        if rec.objective > j + RAG_MARGIN:
            return blend(proposal, rec.weights, 0.5)
    return proposal


Evaluator = Callable[[RewardWeights], tuple[EpisodeMetrics, float]]


def evaluate_weights(weights: RewardWeights, scenario: ScenarioConfig, n_episodes: int, seed: int,
                     level_config: Optional[ExperimentConfig] = None, policy=None) -> tuple[EpisodeMetrics, float]:
    if n_episodes < 1:
        raise InputError("n_episodes must be >= 1")
    base = level_config or ExperimentConfig(level="P1P2")
    cfg = replace(base, scenario=scenario, episodes=n_episodes, seeds=None, base_seed=seed)
    agg = aggregate(run_experiment(cfg, policy, weights))
    return agg, objective_J(agg)


@dataclass
class OptimizeResult:
    best_weights: RewardWeights
    best_objective: float
    records: list[RewardRecord] = field(default_factory=list)
    incumbent_trace: list[float] = field(default_factory=list)
    evaluations: int = 0


def optimize(scenario: ScenarioConfig, budget: int, store: RewardStore, use_rag: bool = True,
             seed: int = 0, evaluator: Optional[Evaluator] = None, *, n_episodes: int = 10,
             level_config: Optional[ExperimentConfig] = None, policy=None,
             initial: Optional[RewardWeights] = None) -> OptimizeResult:
    """Evaluate, reflect, propose; keep a proposal only if it raises J by >= 1e-4."""
    if budget < 1:
        raise InputError("budget must be >= 1")
    if evaluator is None:
        def evaluator(w: RewardWeights):
            return evaluate_weights(w, scenario, n_episodes, seed, level_config, policy)

    desc = ScenarioDescriptor.from_scenario(scenario)
    cache: dict[RewardWeights, tuple[EpisodeMetrics, float]] = {}

    def run(w: RewardWeights):
        if w not in cache:
            cache[w] = evaluator(w)
        return cache[w]

    if initial is not None:
        cur_w = initial.normalized()
    elif use_rag and len(store):
        hits = retrieve(store, desc, RAG_K)
        cur_w = max(hits, key=lambda r: r.objective).weights.normalized()
    else:
        cur_w = DEFAULT_WEIGHTS.normalized()

    out = OptimizeResult(cur_w, -math.inf)
    cur_m, cur_j = run(cur_w)
    out.records.append(store.append(desc, cur_w, cur_m))
    out.evaluations = 1
    best_w, best_j = cur_w, cur_j
    out.incumbent_trace.append(cur_j)
    delta = DELTA
    for _ in range(budget):
        retrieved = retrieve(store, desc, RAG_K) if use_rag and len(store) else []
        prop = reflect_propose(cur_w, cur_m, retrieved, delta)
        m, j = run(prop)
        out.records.append(store.append(desc, prop, m))
        out.evaluations += 1
        if j >= cur_j + ACCEPT_EPS:
            cur_w, cur_m, cur_j = prop, m, j
        else:
            delta = max(DELTA_FLOOR, delta / 2.0)
        if j > best_j:
            best_w, best_j = prop, j
        out.incumbent_trace.append(cur_j)
    out.best_weights, out.best_objective = best_w, best_j
    return out
