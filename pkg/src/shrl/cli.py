"""Command-line front door: ``train``, ``eval``, ``replay`` and ``selftest``.

Exit codes: 0 success, 1 failed check or too many malformed rows,
2 bad arguments or configuration, 3 checkpoint/config mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, apply_overrides, load_config, parse_config, serialize_config
from .environment import TRAJECTORY_FIELDS, TrajectoryLog
from .geometry import RoadParams, RoadType, generate_road
from .plots import trajectory_svg, training_curve_svg
from .policy_net import SHRLNet, load_checkpoint, load_into, save_checkpoint
from .selftest import run_selftest
from .trainer import JointTrainer, evaluate, seed_streams


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _err(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    if path is None:
        return parse_config(apply_overrides({}, overrides))
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(path)
    return load_config(p, overrides)


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    try:
        cfg = _load_run_config(args.config, args.set)
    except FileNotFoundError:
        return _err(f"config file not found: {args.config}", 2)
    except ConfigError as exc:
        return _err(f"invalid config: {exc}", 2)
    out = Path(args.out or cfg.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(serialize_config(cfg))

    net = SHRLNet(cfg.net, seed=seed_streams(cfg.seed)["init"])
    net_hash = cfg.net.hash()

    def on_checkpoint(n, episode):
        save_checkpoint(out / "checkpoints" / f"episode_{episode:06d}.bin", n.parameters(), net_hash)

    def progress(rec, log):
        if not args.quiet and rec.episode % max(1, args.print_every) == 0:
            print(f"episode {rec.episode:5d}  steps {log.env_steps:7d}  return {rec.ret:8.4f}  "
                  f"moving avg {rec.moving_avg:8.4f}  {rec.cause}", flush=True)

    # single-threaded schedule is the only one; the flag is accepted for clarity
    trainer = JointTrainer(cfg.env_config(), net, cfg.train_config(), on_checkpoint)
    log = trainer.run(progress)

    (out / "training_log.csv").write_text(log.to_csv())
    rows = log.rows
    road = cfg.scenario.road_type.value
    (out / f"training_curve_{road}.svg").write_text(training_curve_svg(
        [r.episode for r in rows], [r.ret for r in rows], [r.moving_avg for r in rows],
        title=f"{road}: moving average of episode return"))
    ckpt = out / "checkpoint.bin"
    save_checkpoint(ckpt, net.parameters(), net_hash)
    data = ckpt.read_bytes()
    manifest = {
        "seed": cfg.seed,
        "deterministic": bool(args.deterministic),
        "config": "config.json",
        "net_config_hash": net_hash,
        "checkpoint": ckpt.name,
        "checkpoint_sha256": hashlib.sha256(data).hexdigest(),
        "checkpoint_git_hash": git_blob_hash(data),
        "env_steps": log.env_steps,
        "episodes": len(rows),
        "updates": log.updates,
        "final_moving_avg": log.moving_avg,
    }
    if cfg.eval_episodes > 0:
        traj = TrajectoryLog(cfg.scenario.road_type)
        summary = evaluate(cfg.env_config(), cfg.eval_episodes, net, "greedy", seed=cfg.seed + 1, trajectory=traj)
        (out / "eval_summary.json").write_text(json.dumps(summary.as_dict(), indent=2) + "\n")
        (out / "trajectory.csv").write_text(traj.to_csv())
        manifest["eval"] = summary.as_dict()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    cfg_path = args.config
    if cfg_path is None and args.checkpoint:
        guess = Path(args.checkpoint).parent / "config.json"
        cfg_path = str(guess) if guess.is_file() else None
    try:
        cfg = _load_run_config(cfg_path, args.set)
    except FileNotFoundError:
        return _err(f"config file not found: {cfg_path}", 2)
    except ConfigError as exc:
        return _err(f"invalid config: {exc}", 2)
    net = None
    if args.policy != "scripted":
        if not args.checkpoint:
            return _err("a checkpoint is required unless --policy scripted", 2)
        if not Path(args.checkpoint).is_file():
            return _err(f"checkpoint not found: {args.checkpoint}", 2)
        net = SHRLNet(cfg.net)
        try:
            _, ckpt_hash = load_checkpoint(args.checkpoint)
        except ValueError as exc:
            return _err(str(exc), 2)
        if ckpt_hash != cfg.net.hash():
            return _err(f"checkpoint/config mismatch: checkpoint hash {ckpt_hash} != config hash {cfg.net.hash()}", 3)
        try:
            load_into(net, args.checkpoint)
        except ValueError as exc:
            return _err(str(exc), 3)
    traj = TrajectoryLog(cfg.scenario.road_type) if args.trajectory else None
    summary = evaluate(cfg.env_config(), args.episodes, net, args.policy,
                       seed=cfg.seed if args.seed is None else args.seed, trajectory=traj)
    if traj is not None:
        Path(args.trajectory).write_text(traj.to_csv())
    print(json.dumps(summary.as_dict(), indent=2))
    return 0


# ---------------------------------------------------------------- replay

def parse_trajectory(text: str):
    """Returns ``(road_type, tracks, malformed, total)``."""
    road_type = None
    tracks: dict[str, list[tuple[float, float]]] = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key == "road_type" and value:
                road_type = RoadType(value)
        elif line.strip():
            body.append(line)
    malformed = total = 0
    if body:
        reader = csv.reader(body)
        header = next(reader)
        if header != TRAJECTORY_FIELDS:
            raise ValueError(f"unexpected trajectory header {header}")
        for row in reader:
            total += 1
            try:
                if len(row) != len(TRAJECTORY_FIELDS):
                    raise ValueError
                rec = dict(zip(TRAJECTORY_FIELDS, row))
                int(rec["tick"])
                x, y = float(rec["x"]), float(rec["y"])
                if not (math.isfinite(x) and math.isfinite(y)):
                    raise ValueError
            except ValueError:
                malformed += 1
                continue
            tracks.setdefault(rec["id"], []).append((x, y))
    return road_type, tracks, malformed, total


def cmd_replay(args) -> int:
    path = Path(args.log)
    if not path.is_file():
        return _err(f"trajectory log not found: {args.log}", 2)
    try:
        road_type, tracks, malformed, total = parse_trajectory(path.read_text())
    except ValueError as exc:
        return _err(str(exc), 2)
    if args.road_type:
        road_type = RoadType(args.road_type)
    if road_type is None:
        return _err("road type unknown: add a '# road_type=' header or pass --road-type", 2)
    road = RoadParams()
    if args.config:
        try:
            road = load_config(args.config).scenario.road
        except (ConfigError, OSError) as exc:
            return _err(f"invalid config: {exc}", 2)
    lane_map = generate_road(road_type, road)
    out = Path(args.out or path.with_suffix(".svg"))
    out.write_text(trajectory_svg(lane_map, tracks))
    print(f"wrote {out} ({len(tracks)} tracks, {malformed} malformed of {total} rows)")
    if malformed:
        print(f"skipped {malformed} malformed rows", file=sys.stderr)
    if total and malformed / total > 0.01:
        return _err(f"{malformed} of {total} rows malformed (more than 1%)", 1)
    return 0


# ---------------------------------------------------------------- selftest

def cmd_selftest(args) -> int:
    results = run_selftest(args.seed, args.only)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:22s} {r.detail}  ({r.seconds:.1f}s)")
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shrl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="joint multi-agent training")
    t.add_argument("config", help="JSON run configuration")
    t.add_argument("--set", action="append", default=[], metavar="PATH=VALUE", help="override a config field")
    t.add_argument("--out", help="run directory (default: output_dir from the config)")
    t.add_argument("--deterministic", action="store_true", help="force the single-threaded schedule")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--print-every", type=int, default=10)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint", nargs="?", help="checkpoint file (optional with --policy scripted)")
    e.add_argument("--config", help="JSON run configuration (default: config.json next to the checkpoint)")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--policy", choices=["greedy", "sample", "scripted"], default="greedy")
    e.add_argument("--seed", type=int)
    e.add_argument("--trajectory", help="write the trajectory log here")
    e.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="render a trajectory log as SVG")
    r.add_argument("log")
    r.add_argument("--out")
    r.add_argument("--road-type", choices=[t.value for t in RoadType])
    r.add_argument("--config", help="take road parameters from this run configuration")
    r.set_defaults(func=cmd_replay)

    s = sub.add_parser("selftest", help="run the quick oracle suites")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--only", nargs="*")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
