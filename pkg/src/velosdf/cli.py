"""Command-line entry point: ``velosdf <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .fileio import (
    ConfigError,
    MissingFile,
    ParseError,
    atomic_write_text,
    load_config,
    load_dataset,
    read_trajectory,
    write_trajectory,
)
from .geometry import Trajectory

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _train_config(args):
    from .trainer import preset_config

    over = _overrides(args.set)
    if getattr(args, "seed", None) is not None:
        over["seed"] = str(args.seed)
    return load_config(preset_config(args.preset), args.config, over)


def _model_for_run(run_dir):
    from .pipeline import latest_checkpoint
    from .trainer import load_checkpoint

    return load_checkpoint(latest_checkpoint(run_dir))


def cmd_generate(args) -> int:
    from .synthetic import PRESETS, GeneratorConfig, generate_dataset

    if args.scene not in PRESETS:
        raise UsageError(f"unknown scene {args.scene!r}; choose from {', '.join(PRESETS)}")
    scene_fn, profile_fn = PRESETS[args.scene]
    cfg = load_config(GeneratorConfig(), args.config, _overrides(args.set)) if (args.config or args.set) else GeneratorConfig()
    generate_dataset(scene_fn(), profile_fn(), cfg, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import train

    cfg = _train_config(args)
    ds = load_dataset(args.data, cfg.test_every)

    def progress(stage, epoch, s):
        if args.verbose:
            print(f"stage {stage} epoch {epoch} total {s['total']:.5f}", file=sys.stderr)

    train(ds, cfg, args.out, stage=args.stage, progress=progress)
    return EXIT_OK


def cmd_render(args) -> int:
    from .pipeline import render_test_views

    model = _model_for_run(args.run)
    traj = read_trajectory(args.poses) if args.poses else Trajectory(model.times, tuple(model.trajectory_poses()))
    render_test_views(model, traj, args.out or args.run)
    return EXIT_OK


def cmd_register(args) -> int:
    from .pipeline import register_poses

    model = _model_for_run(args.run)
    ds = load_dataset(args.data, model.cfg.test_every)
    register_poses(model, ds, args.run)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import evaluate, register_poses

    model = _model_for_run(args.run)
    ds = load_dataset(args.data, model.cfg.test_every)
    path = Path(args.run) / "test_poses.txt"
    traj = read_trajectory(path) if path.exists() else register_poses(model, ds, args.run)
    rec = evaluate(model, ds, traj, args.run)
    print(json.dumps(rec, sort_keys=True))
    return EXIT_OK


def cmd_export_traj(args) -> int:
    model = _model_for_run(args.run)
    write_trajectory(Trajectory(model.times, tuple(model.trajectory_poses())), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="velosdf", description="Continuous camera motion and neural SDF reconstruction.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, preset=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if preset:
            sp.add_argument("--preset", default="default", choices=["default", "desk"])

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--scene", default="orbiter")
    g.add_argument("--out", required=True)
    common(g, preset=False)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train stage 1 and/or stage 2")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", type=int, choices=[1, 2])
    t.add_argument("--seed", type=int)
    t.add_argument("--verbose", action="store_true")
    common(t)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render views from a trained run")
    r.add_argument("--run", required=True)
    r.add_argument("--poses", help="trajectory file of camera-to-world poses (default: training trajectory)")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_render)

    rp = sub.add_parser("register-poses", help="fit poses for the held-out test frames")
    rp.add_argument("--run", required=True)
    rp.add_argument("--data", required=True)
    rp.set_defaults(fn=cmd_register)

    e = sub.add_parser("eval", help="compute metrics.json")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export-traj", help="write the estimated trajectory")
    x.add_argument("--run", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_traj)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage().rstrip() + "\nvelosdf: error: a command is required")
        return args.fn(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ParseError, MissingFile, OSError, ValueError) as e:
        print(f"velosdf: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
