"""Command line entry point: ``ccma <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from ccma.agent import PolicyArtifact, TrainConfig, train
from ccma.errors import BackendUnavailable, CCMAError, ConfigError, CoordinationError, InputError
from ccma.harness import (
    LEVELS,
    EpisodeRunner,
    ExperimentConfig,
    export_dataset,
    rows_to_csv,
    run_matrix,
    summarize,
    sweep_coop,
)
from ccma.reward import DEFAULT_WEIGHTS, RewardWeights
from ccma.scenario import ScenarioConfig
from ccma.sim.world import DENSITIES

log = logging.getLogger("ccma")

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND = 0, 2, 3


def default_policy_path() -> Path:
    return Path(str(resources.files("ccma") / "data" / "policy.json"))


def _csv_list(text: str, cast=str) -> list:
    return [cast(x.strip()) for x in text.split(",") if x.strip()]


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except ValueError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _experiment(args, level: Optional[str] = None, density: Optional[str] = None) -> ExperimentConfig:
    base = dict(args.file_config)
    scen = dict(base.pop("scenario", {}))
    base.pop("train", None)
    if density or args.density:
        scen["density"] = density or args.density
    if args.n_cavs is not None:
        scen["n_cavs"] = args.n_cavs
    if args.hdv_compliance is not None:
        scen["hdv_compliance"] = args.hdv_compliance
    base["scenario"] = scen
    overrides = {
        "level": level or args.level,
        "episodes": args.episodes,
        "backend": args.backend,
        "policy_path": args.policy,
        "transcript_path": args.transcript,
        "temperature": args.temperature,
    }
    for k, v in overrides.items():
        if v is not None:
            base[k] = v
    if args.seed is not None:
        base["base_seed"] = args.seed
        base.pop("seeds", None)
    if args.no_fallback:
        base["fallback"] = False
    if args.sample:
        base["sample"] = True
    base.setdefault("policy_path", str(default_policy_path()))
    if "seeds" not in base:
        base.setdefault("episodes", 1)
    cfg = ExperimentConfig.from_dict(base)
    if cfg.level == "P1P2P3":
        if args.weights:
            cfg = replace(cfg, weights_source="file", weights_path=args.weights)
        elif args.store:
            cfg = replace(cfg, weights_source="optimizer-store", store_path=args.store)
        elif cfg.weights_source == "default":
            raise ConfigError("level P1P2P3 needs optimised weights (--weights or --store)")
    return cfg


def _out_dir(args) -> Path:
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- subcommands

def cmd_train_rl(args) -> int:
    conf = args.file_config.get("train", {})
    densities = _csv_list(args.densities) if args.densities else conf.get("densities", list(DENSITIES))
    scen_base = args.file_config.get("scenario", {})
    scenarios = [ScenarioConfig.from_dict({**scen_base, "density": d}) for d in densities]
    tc = TrainConfig(
        episodes=args.episodes if args.episodes is not None else int(conf.get("episodes", 300)),
        alpha=float(conf.get("alpha", 0.1)),
        gamma=float(conf.get("gamma", 0.9)),
        seed=args.seed if args.seed is not None else int(conf.get("seed", 0)),
    )
    weights = RewardWeights.from_dict(json.loads(Path(args.weights).read_text())) if args.weights else DEFAULT_WEIGHTS
    policy, returns = train(scenarios, weights, tc)
    out = Path(args.out) if args.out else _out_dir(args) / "policy.json"
    policy.save(out)
    tail = returns[-max(1, len(returns) // 10):] if returns else [0.0]
    print(f"wrote {out} ({len(policy.q)} states, last-10% mean return {sum(tail) / len(tail):.4f})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _experiment(args)
    out = _out_dir(args)
    runner = EpisodeRunner.from_config(cfg)
    per = []
    with (out / "trajectories.jsonl").open("w", encoding="utf-8") as fh:
        for seed in cfg.seed_list():
            m, lines = runner.run(seed)
            per.append(m)
            fh.writelines(line + "\n" for line in lines)
    csv_text = rows_to_csv([summarize(cfg.level, cfg.scenario.density, per)])
    (out / "metrics.csv").write_text(csv_text)
    sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_eval(args) -> int:
    levels = _csv_list(args.levels) if args.levels else list(LEVELS)
    densities = _csv_list(args.densities) if args.densities else list(DENSITIES)
    for lv in levels:
        if lv not in LEVELS:
            raise ConfigError(f"unknown level {lv!r}")
    cfgs = [_experiment(args, lv, d) for lv in levels for d in densities]
    policy = PolicyArtifact.load(cfgs[0].policy_path)
    rows, _ = run_matrix(cfgs, policy)
    csv_text = rows_to_csv(rows)
    (_out_dir(args) / "matrix.csv").write_text(csv_text)
    sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_sweep_coop(args) -> int:
    values = _csv_list(args.values, float)
    cfg = _experiment(args, level=args.level or "P1P2")
    csv_text = sweep_coop(cfg, values)
    (_out_dir(args) / "sweep.csv").write_text(csv_text)
    sys.stdout.write(csv_text)
    return EXIT_OK


def _scenario_arg(args) -> ScenarioConfig:
    s = args.scenario or args.density or "medium"
    if s in DENSITIES:
        scen = dict(args.file_config.get("scenario", {}))
        scen["density"] = s
        if args.n_cavs is not None:
            scen["n_cavs"] = args.n_cavs
        return ScenarioConfig.from_dict(scen)
    return ScenarioConfig.from_dict(_load_config(s))


def cmd_optimize(args) -> int:
    from ccma.optimizer import RewardStore, optimize

    scenario = _scenario_arg(args)
    cfg = _experiment(args, level="P1P2", density=scenario.density)
    cfg = replace(cfg, scenario=scenario)
    out = _out_dir(args)
    store = RewardStore.load(args.store or out / "rewards.jsonl")
    policy = PolicyArtifact.load(cfg.policy_path)
    res = optimize(scenario, args.budget, store, use_rag=not args.no_rag, seed=cfg.base_seed,
                   n_episodes=args.eval_episodes, level_config=cfg, policy=policy)
    (out / "weights.json").write_text(json.dumps(res.best_weights.to_dict(), indent=2) + "\n")
    print(f"best J {res.best_objective:.6f} after {res.evaluations} evaluations; "
          f"{len(res.records)} records appended to {store.path}")
    return EXIT_OK


def cmd_export_data(args) -> int:
    cfg = _experiment(args, level=args.level or "P1P2")
    out = _out_dir(args)
    runner = EpisodeRunner.from_config(cfg)
    lines = []
    for seed in cfg.seed_list():
        lines.extend(runner.run(seed)[1])
    meta = {"map_hash": cfg.scenario.geometry.stable_hash(), "density": cfg.scenario.density}
    with (out / "dataset.jsonl").open("w", encoding="utf-8") as fh:
        stats = export_dataset(lines, args.i, cfg.base_seed, meta, fh)
    print(f"wrote {stats.samples} samples ({stats.skipped} timesteps skipped)")
    return EXIT_OK


def cmd_record_transcripts(args) -> int:
    from ccma.llm import BackendConfig, LMClient, OracleTeacher, TranscriptWriter

    cfg = _experiment(args, level=args.level or "P1P2")
    cfg = replace(cfg, backend="remote_lm")
    out = _out_dir(args)
    path = Path(args.transcript_out) if args.transcript_out else out / "transcript.jsonl"
    recorder = TranscriptWriter(path)
    try:
        if args.teacher:
            lm = OracleTeacher(recorder=recorder)
        else:
            lm = LMClient(BackendConfig.from_env(), recorder=recorder)
        runner = EpisodeRunner.from_config(cfg, lm=lm)
        per = []
        with (out / "trajectories.jsonl").open("w", encoding="utf-8") as fh:
            for seed in cfg.seed_list():
                m, lines = runner.run(seed)
                per.append(m)
                fh.writelines(line + "\n" for line in lines)
    finally:
        recorder.close()
    csv_text = rows_to_csv([summarize(cfg.level, cfg.scenario.density, per)])
    (out / "metrics.csv").write_text(csv_text)
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccma", description="On-ramp merging with cascaded decision levels.")
    p.add_argument("--config", help="JSON file with experiment settings")
    p.add_argument("--seed", type=int, default=None, help="base seed")
    p.add_argument("--out-dir", default="out", help="directory for outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def exp_opts(sp, level_default=None):
        sp.add_argument("--level", choices=LEVELS, default=level_default)
        sp.add_argument("--density", choices=DENSITIES)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--n-cavs", type=int)
        sp.add_argument("--hdv-compliance", type=float)
        sp.add_argument("--backend", choices=("rule_oracle", "remote_lm", "replay"))
        sp.add_argument("--policy", help="policy artifact (defaults to the bundled one)")
        sp.add_argument("--weights", help="reward weights JSON for level P1P2P3")
        sp.add_argument("--store", help="reward store (rewards.jsonl)")
        sp.add_argument("--transcript", help="transcript file for the replay backend")
        sp.add_argument("--temperature", type=float)
        sp.add_argument("--sample", action="store_true", help="sample actions instead of argmax")
        sp.add_argument("--no-fallback", action="store_true",
                        help="fail instead of falling back to the rule oracle")

    sp = sub.add_parser("train-rl", help="train the individual Q-learning policy")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--densities", help="comma separated, default all")
    sp.add_argument("--weights")
    sp.add_argument("--out", help="policy path (default <out-dir>/policy.json)")
    sp.set_defaults(func=cmd_train_rl)

    sp = sub.add_parser("run", help="run episodes and write trajectories and metrics")
    exp_opts(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("eval", help="level x density matrix as CSV")
    exp_opts(sp)
    sp.add_argument("--levels")
    sp.add_argument("--densities")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep-coop", help="sweep the cooperation weight")
    exp_opts(sp)
    sp.add_argument("--values", default="0,0.1,0.2,0.3,0.4")
    sp.set_defaults(func=cmd_sweep_coop)

    sp = sub.add_parser("optimize", help="tune reward weights with the reflect loop")
    exp_opts(sp)
    sp.add_argument("--scenario", help="density name or scenario JSON file")
    sp.add_argument("--budget", type=int, default=5)
    sp.add_argument("--eval-episodes", type=int, default=10)
    sp.add_argument("--no-rag", action="store_true")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("export-data", help="prompt/label dataset from simulated episodes")
    exp_opts(sp)
    sp.add_argument("--i", type=int, default=3, help="vehicles per prompt")
    sp.set_defaults(func=cmd_export_data)

    sp = sub.add_parser("record-transcripts", help="record prompt/response pairs for replay")
    exp_opts(sp)
    sp.add_argument("--teacher", action="store_true", help="answer with the rule oracle instead of a remote model")
    sp.add_argument("--transcript-out")
    sp.set_defaults(func=cmd_record_transcripts)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.file_config = _load_config(args.config)
        for key in ("policy", "weights", "store", "transcript", "scenario", "level", "density", "n_cavs",
                    "hdv_compliance", "backend", "temperature", "episodes", "no_fallback", "sample"):
            if not hasattr(args, key):
                setattr(args, key, None)
        return args.func(args)
    except (BackendUnavailable, CoordinationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CCMAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
