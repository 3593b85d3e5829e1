"""Command-line entry point: ``cogmap-nav {run,eval,render,gen-world,prompt-dump}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Callable, Optional

from .backends import ChatCompletionsBackend, DecisionBackend, HeuristicPolicy, ReplayBackend
from .errors import ConfigurationError
from .fsm_states import CognitiveState, parse_state_name
from .occupancy import new_grid
from .planner import fmm_distance_field
from .prompts import PromptConfig, build_bundle
from .render import field_image, render_frames, write_ppm
from .runner import (EpisodeConfig, EpisodeResult, compute_metrics, results_csv, run_batch,
                     run_episode, state_analysis)
from .world import ScenarioError, World, dump_scenario, generate_world, load_scenario

log = logging.getLogger("cogmap_nav")

EXIT_CONFIG = 2


# -- configuration -------------------------------------------------------------------

def _parse_noise(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigurationError(f"--noise expects three numbers, got {text!r}") from exc
    if len(vals) != 3:
        raise ConfigurationError(f"--noise expects miss,fp,mis rates, got {text!r}")
    return vals


def _states(names) -> frozenset:
    try:
        return frozenset(parse_state_name(n) for n in names)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def _sub(cls, raw, what: str):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{what} must be an object")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad {what}: {exc}") from exc


def config_from_dict(doc: dict) -> EpisodeConfig:
    """EpisodeConfig from a JSON object; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ConfigurationError("config file must hold a JSON object")
    doc = dict(doc)
    kwargs = {}
    if "prompt" in doc:
        kwargs["prompt"] = _sub(PromptConfig, doc.pop("prompt"), "prompt")
    if "policy" in doc:
        kwargs["policy"] = _sub(HeuristicPolicy, doc.pop("policy"), "policy")
    if "enabled_states" in doc:
        kwargs["enabled_states"] = _states(doc.pop("enabled_states"))
    if "noise" in doc:
        kwargs["noise"] = tuple(float(v) for v in doc.pop("noise"))
    known = {"max_steps", "success_radius", "decision_cadence", "backend", "correction_reliability",
             "inflation"}
    extra = set(doc) - known
    if extra:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(extra))}")
    kwargs.update(doc)
    try:
        return EpisodeConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def build_config(args) -> EpisodeConfig:
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = config_from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
    else:
        cfg = EpisodeConfig()
    changes = {}
    if args.backend:
        changes["backend"] = args.backend
    if args.noise:
        changes["noise"] = _parse_noise(args.noise)
    if args.disable_state:
        off = _states(args.disable_state)
        changes["enabled_states"] = cfg.enabled_states - off
    if changes:
        cfg = replace(cfg, **changes)
    return cfg


def backend_factory(cfg: EpisodeConfig, script: Optional[str]) -> Optional[Callable[[], DecisionBackend]]:
    """None means the runner's default heuristic."""
    if cfg.backend == "heuristic":
        return None
    if cfg.backend == "replay":
        if not script:
            raise ConfigurationError("the replay backend needs --script")
        try:
            with open(script, encoding="utf-8") as fh:
                doc = json.load(fh)
            states = [parse_state_name(s) for s in doc["states"]]
        except (OSError, json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise ConfigurationError(f"bad replay script {script}: {exc}") from exc
        landmarks = doc.get("landmarks")
        return lambda: ReplayBackend(states, landmarks)
    ChatCompletionsBackend.from_env()  # fail fast on missing settings
    return ChatCompletionsBackend.from_env


def load_worlds(args) -> list[World]:
    if args.scenario:
        worlds = []
        for path in args.scenario:
            try:
                with open(path, encoding="utf-8") as fh:
                    worlds.append(load_scenario(fh.read()))
            except OSError as exc:
                raise ConfigurationError(f"cannot read scenario {path}: {exc}") from exc
            except ScenarioError as exc:
                raise ConfigurationError(f"{path}: {exc}") from exc
        return worlds
    n = getattr(args, "episodes", 1)
    if n < 1:
        raise ConfigurationError("--episodes must be >= 1")
    return [generate_world(args.seed + i) for i in range(n)]


def run_many(args, cfg: EpisodeConfig) -> list[EpisodeResult]:
    factory = backend_factory(cfg, args.script)
    if not args.scenario:
        if args.episodes < 1:
            raise ConfigurationError("--episodes must be >= 1")
        seeds = [args.seed + i for i in range(args.episodes)]
        return run_batch(seeds, cfg, factory, workers=args.workers)
    out = []
    for i, world in enumerate(load_worlds(args)):
        backend = factory() if factory is not None else None
        out.append(run_episode(world, cfg, backend, episode_id=i))
    return out


# -- subcommands -------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = build_config(args)
    if not args.no_snapshots:
        cfg = replace(cfg, record_frames=True)
    results = run_many(args, cfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "results.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(results_csv(results))
    if not args.no_snapshots:
        for r in results:
            render_frames(r.frames, os.path.join(args.out, "snapshots", f"episode_{r.episode_id:03d}"))
    print(compute_metrics(results).table())
    return 0


def cmd_eval(args) -> int:
    cfg = build_config(args)
    results = run_many(args, cfg)
    m = compute_metrics(results)
    print(m.table())
    if args.bins:
        names = [s.name for s in CognitiveState]
        print("bin " + " ".join(f"{n:>6}" for n in names) + "  entropy")
        for b in state_analysis(results, args.bins):
            print(f"{b.index:>3} " + " ".join(f"{b.ratios[s]:>6.3f}" for s in CognitiveState)
                  + f"  {b.entropy:.3f}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            fh.write(results_csv(results))
    return 0


def _truth_grid(world: World):
    grid = new_grid(world.grid_config)
    grid.explored[:] = True
    grid.obstacle[:] = world.blocked
    return grid


def cmd_render(args) -> int:
    cfg = replace(build_config(args), record_frames=True)
    world = load_worlds(args)[0]
    factory = backend_factory(cfg, args.script)
    result = run_episode(world, cfg, factory() if factory else None)
    paths = render_frames(result.frames, args.out, prefix=f"seed{world.seed}")
    if args.field:
        start = world.world_to_cell(world.start.x, world.start.y)
        fld = fmm_distance_field(_truth_grid(world), start, inflation=0)
        path = os.path.join(args.out, f"seed{world.seed}_field.ppm")
        write_ppm(path, field_image(fld))
        paths.append(path)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def cmd_gen_world(args) -> int:
    world = generate_world(args.seed, goal=args.goal)
    text = dump_scenario(world)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_prompt_dump(args) -> int:
    cfg = build_config(args)
    world = load_worlds(args)[0]
    factory = backend_factory(cfg, args.script)
    last = {}

    def grab(step, cogmap, ctx, pose, decision):
        if step <= args.step:
            last["bundle"] = build_bundle(cogmap, pose, ctx.goal, list(ctx.history), ctx.state,
                                          decision.candidates, cfg.prompt)

    run_episode(world, replace(cfg, max_steps=max(1, args.step + 1)),
                factory() if factory else None, observer=grab)
    text = last["bundle"].render()
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# -- parser ------------------------------------------------------------------------------

def _episode_args(p: argparse.ArgumentParser, many: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0, help="world seed (episode i uses seed + i)")
    if many:
        p.add_argument("--episodes", type=int, default=1)
        p.add_argument("--workers", type=int, default=1)
    p.add_argument("--scenario", action="append", metavar="FILE", help="scenario JSON instead of seeds")
    p.add_argument("--backend", choices=("heuristic", "replay", "llm"))
    p.add_argument("--config", metavar="FILE", help="JSON episode configuration")
    p.add_argument("--disable-state", action="append", metavar="S", help="e.g. CV; repeatable")
    p.add_argument("--noise", metavar="MISS,FP,MIS", help="detector miss, false-positive, misclassify rates")
    p.add_argument("--script", metavar="FILE", help="replay script: {\"states\": [...], \"landmarks\": [...]}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cogmap-nav", description="Object-goal navigation with a cognitive map.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run episodes, write results.csv and snapshots")
    _episode_args(p)
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--no-snapshots", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="print SR/SPL/DTG, optionally a state table and a CSV")
    _episode_args(p)
    p.add_argument("--csv", metavar="FILE")
    p.add_argument("--bins", type=int, default=0, help="state-ratio bins over normalised time")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="PPM snapshots of one episode")
    _episode_args(p, many=False)
    p.add_argument("--out", default="frames")
    p.add_argument("--field", action="store_true", help="also dump the distance field from the start")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gen-world", help="write a generated world as scenario JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--goal", help="force the goal category")
    p.add_argument("--out", metavar="FILE")
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("prompt-dump", help="write the prompts of the last decision at or before --step")
    _episode_args(p, many=False)
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--out", metavar="FILE")
    p.set_defaults(func=cmd_prompt_dump)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
