"""Episode runner, metrics and the experiment drivers behind the CLI."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import random
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from ccma.agent import PolicyArtifact, act_individual, hazard_mask
from ccma.coord import arbitrate, broadcast, coordinate, form_regions
from ccma.errors import ConfigError, LogParseError
from ccma.reward import DEFAULT_WEIGHTS, RewardWeights
from ccma.scenario import ScenarioConfig
from ccma.sim.observe import R_OBS, observe
from ccma.sim.types import VehicleKind, WorldState
from ccma.sim.world import step

log = logging.getLogger(__name__)

LEVELS = ("P1", "P1P2", "P1P2P3")
BACKENDS = ("rule_oracle", "remote_lm", "replay")
WEIGHT_SOURCES = ("default", "file", "optimizer-store")
HORIZON = 40
SETTLE = 5
CSV_HEADER = ("level", "density", "success_rate", "success_std", "merge_time",
              "collision_rate", "throughput", "speed_ratio")


@dataclass
class ExperimentConfig:
    level: str = "P1P2"
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    episodes: int = 10
    seeds: Optional[list[int]] = None
    base_seed: int = 0
    backend: str = "rule_oracle"
    weights_source: str = "default"
    weights_path: Optional[str] = None
    store_path: Optional[str] = None
    policy_path: Optional[str] = None
    transcript_path: Optional[str] = None
    horizon: int = HORIZON
    settle: int = SETTLE
    temperature: float = 1.0
    sample: bool = False
    fallback: bool = True
    r_obs: float = R_OBS

    def __post_init__(self) -> None:
        if self.level not in LEVELS:
            raise ConfigError(f"unknown level {self.level!r}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.weights_source not in WEIGHT_SOURCES:
            raise ConfigError(f"unknown weights source {self.weights_source!r}")
        if self.seeds is not None:
            self.seeds = [int(s) for s in self.seeds]
            if len(self.seeds) != self.episodes:
                raise ConfigError("episodes must equal the number of seeds")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if not 1 <= self.horizon:
            raise ConfigError("horizon must be >= 1")

    def seed_list(self) -> list[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return [self.base_seed + k for k in range(self.episodes)]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "scenario"}
        d["scenario"] = self.scenario.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        scen = ScenarioConfig.from_dict(d.pop("scenario", {}))
        known = set(cls.__dataclass_fields__) - {"scenario"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "seeds" in d and d["seeds"] is not None and "episodes" not in d:
            d["episodes"] = len(d["seeds"])
        return cls(scenario=scen, **d)


@dataclass(frozen=True)
class EpisodeMetrics:
    """Aggregate over one or more episodes.

    Rates are pooled: success over all CAVs, collisions over episodes.
    """

    success_rate: float
    mean_merge_time: Optional[float]
    collision_rate: float
    throughput: float
    mean_speed_ratio: float
    episodes: int = 1
    n_agents: int = 0
    merge_times: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "mean_merge_time": self.mean_merge_time,
            "collision_rate": self.collision_rate,
            "throughput": self.throughput,
            "mean_speed_ratio": self.mean_speed_ratio,
            "episodes": self.episodes,
            "n_agents": self.n_agents,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EpisodeMetrics":
        return cls(float(d["success_rate"]), None if d.get("mean_merge_time") is None else float(d["mean_merge_time"]),
                   float(d["collision_rate"]), float(d["throughput"]), float(d["mean_speed_ratio"]),
                   int(d.get("episodes", 1)), int(d.get("n_agents", 0)))


def aggregate(parts: Sequence[EpisodeMetrics]) -> EpisodeMetrics:
    if not parts:
        raise ValueError("nothing to aggregate")
    n_ep = sum(p.episodes for p in parts)
    n_ag = sum(p.n_agents for p in parts)
    succ = sum(p.success_rate * p.n_agents for p in parts)
    times = tuple(t for p in parts for t in p.merge_times)
    return EpisodeMetrics(
        success_rate=succ / n_ag if n_ag else 0.0,
        mean_merge_time=sum(times) / len(times) if times else None,
        collision_rate=sum(p.collision_rate * p.episodes for p in parts) / n_ep,
        throughput=sum(p.throughput * p.episodes for p in parts) / n_ep,
        mean_speed_ratio=sum(p.mean_speed_ratio * p.episodes for p in parts) / n_ep,
        episodes=n_ep,
        n_agents=n_ag,
        merge_times=times,
    )


# ---------------------------------------------------------------- metrics from logs

def _episode_metrics(lines: list[dict]) -> EpisodeMetrics:
    cavs: set[int] = set()
    enter: dict[int, float] = {}
    done: dict[int, float] = {}
    crashed: set[int] = set()
    any_collision = False
    exits = 0
    ratios = []
    t_end = 0.0
    for rec in lines:
        t_end = max(t_end, float(rec["time"]))
        for v in rec["vehicles"]:
            if v["kind"] == "CAV":
                cavs.add(int(v["id"]))
            if rec["time"] > 0 and v.get("status", "active") == "active":
                v0 = float(v.get("v0") or 0.0)
                if v0 > 0:
                    ratios.append(min(1.0, float(v["speed"]) / v0))
        for e in rec["events"]:
            kind, ids = e["type"], [int(i) for i in e["ids"]]
            if kind == "collision":
                any_collision = True
                crashed.update(ids)
            elif kind == "merge_enter":
                enter.setdefault(ids[0], float(e["time"]))
            elif kind == "merge_done":
                done.setdefault(ids[0], float(e["time"]))
            elif kind == "exit":
                exits += len(ids)
    winners = sorted(i for i in cavs if i in done and i not in crashed)
    times = tuple(done[i] - enter.get(i, done[i]) for i in winners)
    return EpisodeMetrics(
        success_rate=len(winners) / len(cavs) if cavs else 0.0,
        mean_merge_time=sum(times) / len(times) if times else None,
        collision_rate=1.0 if any_collision else 0.0,
        throughput=exits / (t_end / 60.0) if t_end > 0 else 0.0,
        mean_speed_ratio=sum(ratios) / len(ratios) if ratios else 0.0,
        episodes=1,
        n_agents=len(cavs),
        merge_times=times,
    )


def parse_log(lines: Iterable[str | Mapping]) -> dict[int, list[dict]]:
    """Group trajectory lines by their episode key (absent key = episode 0)."""
    episodes: dict[int, list[dict]] = {}
    for n, raw in enumerate(lines, 1):
        if isinstance(raw, Mapping):
            rec = dict(raw)
        else:
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except ValueError as exc:
                raise LogParseError(n, f"invalid JSON ({exc.args[0]})") from None
        if not isinstance(rec, dict) or not isinstance(rec.get("vehicles"), list) \
                or not isinstance(rec.get("events"), list) or "time" not in rec:
            raise LogParseError(n, "expected an object with time, vehicles and events")
        try:
            for v in rec["vehicles"]:
                v["id"], v["kind"], v["speed"]
            for e in rec["events"]:
                e["type"], e["ids"], e["time"]
            float(rec["time"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LogParseError(n, f"missing or malformed field {exc}") from None
        episodes.setdefault(int(rec.get("episode", 0)), []).append(rec)
    return episodes


def compute_metrics(lines: Iterable[str | Mapping]) -> EpisodeMetrics:
    episodes = parse_log(lines)
    if not episodes:
        raise LogParseError(0, "log contains no steps")
    return aggregate([_episode_metrics(recs) for _, recs in sorted(episodes.items())])


def episode_metrics_list(lines: Iterable[str | Mapping]) -> list[EpisodeMetrics]:
    return [_episode_metrics(recs) for _, recs in sorted(parse_log(lines).items())]


# ---------------------------------------------------------------- episodes

def resolve_weights(cfg: ExperimentConfig) -> RewardWeights:
    if cfg.weights_source == "default":
        return DEFAULT_WEIGHTS
    if cfg.weights_source == "file":
        if not cfg.weights_path or not Path(cfg.weights_path).exists():
            raise ConfigError(f"weights file not found: {cfg.weights_path}")
        return RewardWeights.from_dict(json.loads(Path(cfg.weights_path).read_text()))
    from ccma.optimizer import RewardStore, ScenarioDescriptor, retrieve

    if not cfg.store_path:
        raise ConfigError("weights_source optimizer-store needs store_path")
    hits = retrieve(RewardStore.load(cfg.store_path), ScenarioDescriptor.from_scenario(cfg.scenario), 1)
    if not hits:
        raise ConfigError(f"reward store {cfg.store_path} is empty")
    return hits[0].weights


def make_lm(cfg: ExperimentConfig, weights: RewardWeights, record: Optional[str] = None):
    """Client for the remote or replay backend; None for the rule oracle."""
    from ccma.llm import BackendConfig, LMClient, ReplayClient, TranscriptWriter

    if cfg.level == "P1" or cfg.backend == "rule_oracle":
        return None
    if cfg.backend == "replay":
        if not cfg.transcript_path:
            raise ConfigError("replay backend needs transcript_path")
        return ReplayClient(cfg.transcript_path)
    recorder = TranscriptWriter(record) if record else None
    return LMClient(BackendConfig.from_env(), recorder=recorder)


@dataclass
class EpisodeRunner:
    """Holds the loaded artifacts shared by every episode of one experiment."""

    cfg: ExperimentConfig
    policy: PolicyArtifact
    weights: RewardWeights = DEFAULT_WEIGHTS
    lm: object = None

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, policy: Optional[PolicyArtifact] = None,
                    weights: Optional[RewardWeights] = None, lm=None) -> "EpisodeRunner":
        if policy is None:
            if not cfg.policy_path:
                raise ConfigError("a policy artifact is required (policy_path)")
            policy = PolicyArtifact.load(cfg.policy_path)
        if weights is None:
            weights = resolve_weights(cfg)
        if lm is None:
            lm = make_lm(cfg, weights)
        return cls(cfg, policy, weights, lm)

    def run(self, seed: int) -> tuple[EpisodeMetrics, list[str]]:
        cfg = self.cfg
        world = cfg.scenario.spawn(seed)
        geo = world.geometry
        use_p2 = cfg.level != "P1"
        rng = random.Random(seed) if cfg.sample else None
        if self.lm is not None and hasattr(self.lm, "reset"):
            self.lm.reset()
        inbox: dict[int, list] = {}
        lines = [_line(seed, world, [])]
        settle_left = None
        for _ in range(cfg.horizon):
            masks = {v.id: hazard_mask(world, v.id) for v in world.active_cavs()}
            p1 = {vid: act_individual(self.policy, observe(world, vid, cfg.r_obs), m, geo)
                  for vid, m in masks.items()}
            decisions = []
            if use_p2:
                for region in form_regions(world, cfg.r_obs):
                    inb = sorted({m for vid in region.member_ids for m in inbox.get(vid, ())},
                                 key=lambda m: (m.tick, m.sender, m.intent.value, m.reason, m.target or -1))
                    decisions.append(coordinate(region, world, cfg.backend if cfg.backend == "rule_oracle"
                                                else "remote_lm", inb, cfg.temperature, self.weights,
                                                lm=self.lm, fallback=cfg.fallback, rng=rng))
                inbox = broadcast(decisions, world, cfg.r_obs)
                coop = [v.id for v in world.vehicles if v.kind is VehicleKind.HDV and v.cooperative]
                joint = arbitrate(p1, decisions, masks, coop)
                world, _ = step(world, joint.actions, joint.advisories)
            else:
                world, _ = step(world, p1)
            lines.append(_line(seed, world, decisions))
            if settle_left is None and all(v.frozen or v.merged for v in world.cavs()):
                settle_left = cfg.settle
            if settle_left is not None:
                if settle_left == 0:
                    break
                settle_left -= 1
        return compute_metrics(lines), lines


def _line(seed: int, world: WorldState, decisions) -> str:
    rec = {"episode": seed}
    rec.update(world.to_log())
    if decisions:
        rec["decisions"] = [d.to_dict() for d in decisions]
    return json.dumps(rec, sort_keys=False, separators=(",", ":"))


def run_episode(cfg: ExperimentConfig, seed: int, policy: Optional[PolicyArtifact] = None,
                weights: Optional[RewardWeights] = None, lm=None) -> tuple[EpisodeMetrics, list[str]]:
    return EpisodeRunner.from_config(cfg, policy, weights, lm).run(seed)


def run_experiment(cfg: ExperimentConfig, policy: Optional[PolicyArtifact] = None,
                   weights: Optional[RewardWeights] = None, lm=None,
                   log_sink=None) -> list[EpisodeMetrics]:
    runner = EpisodeRunner.from_config(cfg, policy, weights, lm)
    out = []
    for seed in cfg.seed_list():
        m, lines = runner.run(seed)
        out.append(m)
        if log_sink is not None:
            for line in lines:
                log_sink.write(line + "\n")
    return out


# ---------------------------------------------------------------- tables

def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6f}"


def summarize(level: str, density: str, per_episode: Sequence[EpisodeMetrics]) -> dict:
    agg = aggregate(per_episode)
    rates = [m.success_rate for m in per_episode]
    return {
        "level": level,
        "density": density,
        "success_rate": agg.success_rate,
        "success_std": statistics.pstdev(rates) if len(rates) > 1 else 0.0,
        "merge_time": agg.mean_merge_time,
        "collision_rate": agg.collision_rate,
        "throughput": agg.throughput,
        "speed_ratio": agg.mean_speed_ratio,
    }


def rows_to_csv(rows: Sequence[Mapping], header: Sequence[str] = CSV_HEADER) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([r[h] if isinstance(r[h], str) else _fmt(r[h]) for h in header])
    return buf.getvalue()


def run_matrix(cfgs: Sequence[ExperimentConfig], policy: Optional[PolicyArtifact] = None,
               weights_by_level: Optional[Mapping[str, RewardWeights]] = None,
               ) -> tuple[list[dict], dict[tuple[str, str], list[EpisodeMetrics]]]:
    """One summary row per config, in input order, plus the raw per-episode metrics."""
    if not cfgs:
        raise ConfigError("empty experiment grid")
    rows, raw = [], {}
    for cfg in cfgs:
        w = (weights_by_level or {}).get(cfg.level)
        per = run_experiment(cfg, policy, w)
        raw[(cfg.level, cfg.scenario.density)] = per
        rows.append(summarize(cfg.level, cfg.scenario.density, per))
    return rows, raw


def coop_weights(base: RewardWeights, w_coop: float) -> RewardWeights:
    """Set w_coop and rescale the other component weights pro-rata to fill the rest."""
    if not 0.0 <= w_coop <= 1.0:
        raise ConfigError("w_coop values must lie in [0, 1]")
    b = base.normalized()
    rest = b.w_flow + b.w_comf + b.w_safe
    if rest > 0:
        k = (1.0 - w_coop) / rest
        return replace(b, w_flow=b.w_flow * k, w_comf=b.w_comf * k, w_safe=b.w_safe * k, w_coop=w_coop)
    third = (1.0 - w_coop) / 3.0
    return replace(b, w_flow=third, w_comf=third, w_safe=third, w_coop=w_coop)


SWEEP_HEADER = ("w_coop", "w_flow", "w_comf", "w_safe", "success_rate", "merge_time",
                "collision_rate", "throughput", "speed_ratio", "objective")


def sweep_coop(cfg: ExperimentConfig, values: Sequence[float], policy: Optional[PolicyArtifact] = None,
               base: RewardWeights = DEFAULT_WEIGHTS) -> str:
    from ccma.optimizer import objective_J

    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ConfigError("w_coop values must lie in [0, 1]")
    rows = []
    for v in values:
        w = coop_weights(base, v)
        agg = aggregate(run_experiment(cfg, policy, w))
        rows.append({"w_coop": w.w_coop, "w_flow": w.w_flow, "w_comf": w.w_comf, "w_safe": w.w_safe,
                     "success_rate": agg.success_rate, "merge_time": agg.mean_merge_time,
                     "collision_rate": agg.collision_rate, "throughput": agg.throughput,
                     "speed_ratio": agg.mean_speed_ratio, "objective": objective_J(agg)})
    return rows_to_csv(rows, SWEEP_HEADER)


# ---------------------------------------------------------------- dataset export

@dataclass
class ExportStats:
    samples: int = 0
    skipped: int = 0


def export_dataset(lines: Iterable[str | Mapping], i: int, seed: int, meta: Mapping,
                   out) -> ExportStats:
    """Split every logged timestep into ``i`` prompt vehicles and the rest as labels.

    Writes one JSON sample per line to ``out``; timesteps with fewer than
    ``i + 1`` vehicles are skipped and counted.
    """
    if i < 1:
        raise ConfigError("i must be >= 1")
    rng = random.Random(seed)
    stats = ExportStats()
    episodes = parse_log(lines)
    for ep in sorted(episodes):
        for rec in episodes[ep]:
            vehicles = sorted(rec["vehicles"], key=lambda v: v["id"])
            if i >= len(vehicles):
                stats.skipped += 1
                continue
            picked = set(rng.sample(range(len(vehicles)), i))
            sample = {
                "prompt": {"time": rec["time"], "vehicles": [v for k, v in enumerate(vehicles) if k in picked]},
                "labels": [v for k, v in enumerate(vehicles) if k not in picked],
                "meta": {"map_hash": meta.get("map_hash"), "density": meta.get("density"),
                         "time": rec["time"], "episode": ep},
            }
            out.write(json.dumps(sample, separators=(",", ":")) + "\n")
            stats.samples += 1
    if stats.skipped:
        log.warning("export skipped %d timesteps with too few vehicles", stats.skipped)
    return stats
