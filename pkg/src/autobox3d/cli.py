"""Command-line interface.

Subcommands: gen-scene, autolabel, evaluate, render-debug. A key = value
config file (AUTOBOX3D_CONFIG or --config) seeds the run configuration;
--set key=value flags override individual fields. Exit codes: 0 success,
1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import engine
from .harness import dataio, evaluate as evaluate_mod, scene as scene_mod

ENV_CONFIG = "AUTOBOX3D_CONFIG"


def build_parser():
    parser = argparse.ArgumentParser(prog="autobox3d",
                                     description="3D box autolabeling from multi-view instance masks")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help=f"key = value config file (default: ${ENV_CONFIG})")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field")
    common.add_argument("--profile", choices=["default", "desk"], default="default",
                        help="base run profile before config/overrides")

    gen = sub.add_parser("gen-scene", parents=[common], help="generate a synthetic dataset")
    gen.add_argument("--template", required=True, choices=scene_mod.TEMPLATES)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--instances", type=int, default=8)
    gen.add_argument("--frames", type=int, default=17)
    gen.add_argument("--mask-noise-px", type=int, default=0)
    gen.add_argument("--depth-noise-sigma", type=float, default=0.0)
    gen.add_argument("--pose-jitter-t", type=float, default=0.0)
    gen.add_argument("--pose-jitter-deg", type=float, default=0.0)
    gen.add_argument("--no-depth", action="store_true")

    auto = sub.add_parser("autolabel", parents=[common], help="optimize boxes for target frames")
    auto.add_argument("--dataset", type=Path, required=True)
    auto.add_argument("--out", type=Path, required=True)
    auto.add_argument("--target-frame", type=int, default=None,
                      help="default: middle frame of the dataset")
    auto.add_argument("--seed", type=int, default=None)

    ev = sub.add_parser("evaluate", parents=[common], help="score labels against ground truth")
    ev.add_argument("--dataset", type=Path, required=True)
    ev.add_argument("--labels", type=Path, required=True)
    ev.add_argument("--out", type=Path, default=None, help="metrics output dir (default: labels dir)")

    dbg = sub.add_parser("render-debug", parents=[common], help="render a predicted-mask image")
    dbg.add_argument("--dataset", type=Path, required=True)
    dbg.add_argument("--frame", type=int, required=True)
    dbg.add_argument("--out", type=Path, required=True)
    dbg.add_argument("--labels", type=Path, default=None,
                     help="render these labels instead of the ground-truth boxes")
    dbg.add_argument("--stride", type=int, default=1)
    return parser


def _load_run_config(args):
    cfg = config_mod.desk_profile() if args.profile == "desk" else config_mod.RunConfig()
    path = args.config or (Path(os.environ[ENV_CONFIG]) if os.environ.get(ENV_CONFIG) else None)
    if path is not None:
        cfg = config_mod.load_config(path, base=cfg)
    if args.overrides:
        config_mod.apply_overrides(cfg, args.overrides)
    return cfg


def cmd_gen_scene(args):
    spec = scene_mod.generate_scene(
        args.template,
        args.seed,
        n_instances=args.instances,
        n_frames=args.frames,
        mask_noise_px=args.mask_noise_px,
        depth_noise_sigma=args.depth_noise_sigma,
        pose_jitter_t=args.pose_jitter_t,
        pose_jitter_deg=args.pose_jitter_deg,
    )
    dataio.write_dataset(args.out, spec, with_depth=not args.no_depth)
    print(f"wrote {spec.template} scene (seed {spec.seed}, {spec.n_instances} instances) to {args.out}")
    return 0


def cmd_autolabel(args):
    cfg = _load_run_config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    dataset = dataio.load_dataset(args.dataset)
    target = args.target_frame if args.target_frame is not None else dataset.n_frames // 2
    if not 0 <= target < dataset.n_frames:
        raise ValueError(f"target frame {target} outside dataset range")
    args.out.mkdir(parents=True, exist_ok=True)
    labels, manifest = engine.optimize_target(dataset, target, cfg)
    label_path = args.out / f"labels_{target:04d}.txt"
    dataio.write_labels(label_path, labels, target, dataset.frames[target].time)
    (args.out / f"manifest_{target:04d}.txt").write_text(manifest.to_text(), encoding="utf-8")
    print(f"wrote {len(labels)} pseudo labels to {label_path}")
    return 0


def cmd_evaluate(args):
    dataset = dataio.load_dataset(args.dataset)
    label_files = sorted(Path(args.labels).glob("labels_*.txt"))
    if not label_files:
        raise FileNotFoundError(f"no labels_*.txt under {args.labels}")
    out_dir = args.out or Path(args.labels)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in label_files:
        labels, frame_id, target_time = dataio.read_labels(path)
        metrics, rows = evaluate_mod.evaluate_labels(labels, dataset.gt_boxes, target_time)
        lines = evaluate_mod.metrics_lines(metrics)
        (out_dir / f"metrics_{frame_id:04d}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"frame {frame_id}:")
        print(evaluate_mod.metrics_table(metrics, rows))
    return 0


def cmd_render_debug(args):
    from . import fields as fields_mod
    from .config import RenderConfig

    cfg = _load_run_config(args)
    dataset = dataio.load_dataset(args.dataset)
    frame = dataset.frames[args.frame]
    if args.labels is not None:
        labels, _, target_time = dataio.read_labels(args.labels)
        boxes = [lab.box for lab in labels]
        ids = [lab.instance_id for lab in labels]
        ref_time = target_time
    else:
        ids = sorted(dataset.gt_boxes)
        boxes = [dataset.gt_boxes[i] for i in ids]
        ref_time = 0.0
    scene = fields_mod.make_scene(boxes, ref_time=ref_time, cfg=cfg.fields, seed=cfg.seed)
    from .renderer import render_debug_mask

    img = render_debug_mask(frame, frame.time, scene.params(), cfg.render,
                            instance_ids=ids, stride=args.stride, use_rdf=False)
    dataio.write_mask_pgm(args.out, img)
    print(f"wrote rendered mask to {args.out}")
    return 0


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "autolabel": cmd_autolabel,
    "evaluate": cmd_evaluate,
    "render-debug": cmd_render_debug,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
