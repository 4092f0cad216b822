"""Command-line entry point: train, rollout, explain, eval and play."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .engine import BUILTIN_GAMES, GameSpec, ParseError, ValidationError, builtin_text, load_game, reset, step
from .gamefile import read_sections
from .kgstate import EMPTY_GRAPH, extract_triples, partition, triple_to_text, update_graph
from .policy import PolicyConfig
from .temporal import (DEFAULT_CRITIC_PERCENTILE, DEFAULT_P, DEFAULT_TOP_K, ActionModel, build_stats,
                       explain, find_goal)
from .trainer import DivergenceError, TrainConfig, load_policy, train
from .trajstore import SchemaError, collect_rollouts, read_file, write_file

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("hexplain")


class UsageError(Exception):
    """Bad arguments, files or configuration (exit code 2)."""


# -- shared helpers -----------------------------------------------------------

def default_seed() -> int:
    raw = os.environ.get("HEXPLAIN_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"HEXPLAIN_SEED must be an integer, got {raw!r}") from None


def game_source(name: str) -> str:
    if name in BUILTIN_GAMES:
        return builtin_text(name)
    path = Path(name)
    if not path.is_file():
        raise UsageError(f"game file not found: {path}")
    return path.read_text(encoding="utf-8")


def resolve_game(name: str) -> tuple[GameSpec, str]:
    text = game_source(name)
    try:
        return load_game(text), hashlib.sha256(text.encode("utf-8")).hexdigest()
    except (ParseError, ValidationError) as exc:
        raise UsageError(f"{name}: {exc}") from None


def _coerce(value: str, template, key: str):
    if isinstance(template, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(template, int):
            return int(value)
        if isinstance(template, float):
            return float(value)
    except ValueError:
        raise UsageError(f"{key}: expected {type(template).__name__}, got {value!r}") from None
    if template is None:
        if value.lower() in ("", "none"):
            return None
        try:
            return int(value)
        except ValueError:
            raise UsageError(f"{key}: expected an integer or none, got {value!r}") from None
    return value


def _apply(obj, key: str, value: str):
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names:
        raise UsageError(f"unknown setting {key!r} for {type(obj).__name__}")
    return dataclasses.replace(obj, **{key: _coerce(value, getattr(obj, key), key)})


def build_train_config(config_path: str | None, overrides: Sequence[str], **direct) -> TrainConfig:
    """Defaults, then the config file's ``[train]``/``[policy]`` sections, then ``--set``, then flags."""
    cfg = TrainConfig()
    pol = PolicyConfig()
    pairs: list[tuple[str, str, str]] = []
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            sections = read_sections(path.read_text(encoding="utf-8"), require=False)
        except ParseError as exc:
            raise UsageError(f"{path}: {exc}") from None
        for sec in sections:
            if sec.kind not in ("train", "policy", "explain"):
                raise UsageError(f"{path}: unknown section [{sec.kind}]")
            pairs += [(sec.kind, e.key, e.value) for e in sec.entries]
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, _, name = key.rpartition(".")
        pairs.append((section or "", name.strip(), value.strip()))
    try:
        for section, key, value in pairs:
            if section == "explain":
                continue
            if section == "policy" or (not section and key in {f.name for f in dataclasses.fields(pol)}):
                pol = _apply(pol, key, value)
            else:
                cfg = _apply(cfg, key, value)
        for key, value in direct.items():
            if value is not None:
                cfg = dataclasses.replace(cfg, **{key: value})
        if direct.get("seed") is None and not any(key == "seed" for _, key, _ in pairs):
            cfg = dataclasses.replace(cfg, seed=default_seed())
        return dataclasses.replace(cfg, policy=pol)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def write_manifest(out: Path, payload: dict, name: str = "manifest.json") -> None:
    payload = {"tool": "hexplain", "version": __version__, **payload}
    (out / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint_for(spec: GameSpec, path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_policy(path, spec)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{path}: {exc}") from None


# -- subcommands --------------------------------------------------------------

def cmd_train(args) -> int:
    spec, digest = resolve_game(args.game)
    cfg = build_train_config(args.config, args.set, total_steps=args.steps, seed=args.seed, im_mode=args.im_mode)
    out = Path(args.out or f"runs/{spec.game_id}-seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, {"command": "train", "game": args.game, "game_id": spec.game_id, "game_sha256": digest,
                         "config": cfg.to_dict()})

    def progress(steps, mean100, best):
        log.info("step %d  mean100 %.2f  max %d", steps, mean100, best)

    try:
        result = train(spec, cfg, out, progress=progress if args.verbose else None)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    final = result.curve[-1] if result.curve else (0, 0.0, 0)
    print(f"steps {result.steps}  updates {result.updates}  mean100 {final[1]:.2f}  max {result.max_score_seen}"
          f"  ({result.seconds:.1f}s)")
    print(f"wrote {out / 'final.ckpt'}, {out / 'curve.csv'}, {out / 'manifest.json'}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    spec, digest = resolve_game(args.game)
    policy = load_checkpoint_for(spec, args.checkpoint)
    if args.n < 0:
        raise UsageError("--n must be non-negative")
    ckpt_id = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()[:16]
    trajs = collect_rollouts(policy, spec, args.n, args.seed, k=args.k, max_steps=args.max_steps,
                             checkpoint_id=ckpt_id)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_file(out, trajs)
    manifest_dir = out.parent
    write_manifest(manifest_dir, {"command": "rollout", "game": args.game, "game_sha256": digest,
                                  "checkpoint": str(args.checkpoint), "checkpoint_id": ckpt_id, "n": args.n,
                                  "seed": args.seed, "k": args.k, "max_steps": args.max_steps,
                                  "output": out.name}, name=f"{out.name}.manifest.json")
    scores = [t.final_score for t in trajs]
    mean = float(np.mean(scores)) if scores else 0.0
    print(f"wrote {len(trajs)} trajectories to {out} (mean score {mean:.2f})")
    return EXIT_OK


def _pick_goal(traj, args) -> int:
    if args.step != "goal":
        try:
            index = int(args.step)
        except ValueError:
            raise UsageError(f"--step must be an integer or 'goal', got {args.step!r}") from None
        if not 0 <= index < len(traj.steps):
            raise UsageError(f"step {index} outside trajectory of {len(traj.steps)} steps")
        return index
    if args.goal_action:
        hit = find_goal(traj, action=args.goal_action)
        if hit is None:
            raise UsageError(f"trajectory has no step with action {args.goal_action!r}")
        return hit
    rewarded = [i for i, rec in enumerate(traj.steps) if rec.reward > 0]
    if traj.terminal_cause == "goal" and traj.steps:
        return len(traj.steps) - 1
    if rewarded:
        return rewarded[-1]
    raise UsageError("trajectory has no rewarded or goal step; pass --step or --goal-action")


def cmd_explain(args) -> int:
    path = Path(args.corpus)
    if not path.is_file():
        raise UsageError(f"corpus not found: {path}")
    try:
        corpus = read_file(path)
    except SchemaError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if not corpus:
        raise UsageError(f"{path}: corpus is empty")
    spec = resolve_game(args.game)[0] if args.game else None
    if args.trajectory is None:
        candidates = [i for i, t in enumerate(corpus)
                      if (find_goal(t, action=args.goal_action) is not None if args.goal_action
                          else t.terminal_cause == "goal" or any(r.reward > 0 for r in t.steps))]
        if not candidates:
            raise UsageError("no trajectory reaches a goal; pass --trajectory")
        tid = candidates[0]
    else:
        tid = args.trajectory
        if not 0 <= tid < len(corpus):
            raise UsageError(f"trajectory {tid} outside corpus of {len(corpus)}")
    traj = corpus[tid]

    if args.immediate_only:
        steps = range(len(traj.steps)) if args.step == "goal" and not args.goal_action else [_pick_goal(traj, args)]
        lines = []
        for i in steps:
            rec = traj.steps[i]
            lines.append(f"Step {i} ({rec.location}): {rec.action}")
            lines += [f"  {text}" for text in rec.immediate_explanation]
        _emit("\n".join(lines) + "\n", args.out)
        return EXIT_OK

    goal = _pick_goal(traj, args)
    stats = build_stats(corpus)
    model = ActionModel().fit(corpus)
    result = explain(traj, goal, stats, model, p=args.p, k=args.k, critic_percentile=args.critic_percentile,
                     spec=spec)
    text = (result.explanation.render_json_lines() if args.format == "json-lines"
            else f"# corpus: {path.name}  trajectory: {tid}\n" + result.explanation.render())
    _emit(text, args.out)
    return EXIT_OK


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_eval(args) -> int:
    spec, _ = resolve_game(args.game)
    policy = load_checkpoint_for(spec, args.checkpoint)
    rng = np.random.default_rng(args.seed)
    scores = []
    for ep in range(args.episodes):
        state, obs = reset(spec, args.seed + ep)
        graph = update_graph(EMPTY_GRAPH, extract_triples(obs, state.room), 0)
        carry = policy.initial_carry(1)
        for t in range(args.max_steps):
            trace = policy.forward([obs], [graph], carry, rng, greedy=not args.sample)
            carry = trace.carry
            state, obs, done = step(spec, state, trace.decoded.actions[0])
            graph = update_graph(graph, extract_triples(obs, state.room), t + 1)
            if done:
                break
        scores.append(state.score)
    mean = float(np.mean(scores)) if scores else 0.0
    best = max(scores) if scores else 0
    top = spec.max_score or 1
    print(f"episodes {len(scores)}  Eps. {mean:.2f} ({100 * mean / top:.1f}%)  Max {best} ({100 * best / top:.1f}%)")
    return EXIT_OK


def cmd_play(args) -> int:
    spec, _ = resolve_game(args.game)
    state, obs = reset(spec, args.seed)
    graph = update_graph(EMPTY_GRAPH, extract_triples(obs, state.room), 0)
    stdin = args.input or sys.stdin
    out = sys.stdout

    def show():
        plain = f"{obs.feedback}\n{obs.desc}".replace("{", "").replace("}", "")
        out.write(f"{plain}\n[score {state.score}/{spec.max_score}]\n")
        if args.show_kg:
            for cat, sub in partition(graph):
                for t in sub:
                    out.write(f"  {cat}: {t}  ({triple_to_text(t, spec.is_plural)})\n")

    show()
    t = 0
    while True:
        out.write("> ")
        out.flush()
        line = stdin.readline()
        if not line:
            break
        action = line.strip()
        if action.lower() in ("quit", "exit", "q"):
            break
        if not action:
            continue
        state, obs, done = step(spec, state, action)
        t += 1
        graph = update_graph(graph, extract_triples(obs, state.room), t)
        show()
        if done:
            break
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hexplain", description="Explainable knowledge-graph agents for text games")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an agent and write checkpoints, curve and manifest")
    p.add_argument("--game", required=True, help=f"built-in id ({', '.join(BUILTIN_GAMES)}) or .game file")
    p.add_argument("--steps", type=int, default=None, help="total environment steps (default 100000)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--im-mode", choices=("game_only", "game_and_IM"), default=None)
    p.add_argument("--config", help="key=value config file with [train] and [policy] sections")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
    p.add_argument("--out", help="output directory (default runs/<game>-seed<seed>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="sample trajectories with immediate explanations")
    p.add_argument("--game", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int, default=3, help="triples per immediate explanation")
    p.add_argument("--max-steps", type=int, default=100)
    p.add_argument("--out", default="rollouts.traj")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("explain", help="temporal explanation for one goal step of a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--game", help="game for grammar-aware entity matching")
    p.add_argument("--trajectory", type=int, default=None, help="index in the corpus (default: first reaching a goal)")
    p.add_argument("--step", default="goal", help="goal step index, or 'goal'")
    p.add_argument("--goal-action", help="use the first step with this action as the goal")
    p.add_argument("--p", type=float, default=DEFAULT_P, help="Bayes filter threshold")
    p.add_argument("--k", type=int, default=DEFAULT_TOP_K, help="action-model top-k")
    p.add_argument("--critic-percentile", type=float, default=DEFAULT_CRITIC_PERCENTILE)
    p.add_argument("--immediate-only", action="store_true", help="print per-step immediate explanations")
    p.add_argument("--format", choices=("text", "json-lines"), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="mean and max score over evaluation episodes")
    p.add_argument("--game", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--max-steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--sample", action="store_true", help="sample actions instead of taking the argmax")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("play", help="play a game in the terminal")
    p.add_argument("--game", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--show-kg", action="store_true", help="print the belief graph after every step")
    p.set_defaults(func=cmd_play, input=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "seed", 0) is None and args.command != "train":
            args.seed = default_seed()
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
