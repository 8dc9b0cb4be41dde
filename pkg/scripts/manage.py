#!/usr/bin/env python3
"""
Management CLI
Synthesize blurred datasets, train, render, evaluate and inspect blur fields
"""

import argparse
import json
import logging
import math
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from dotenv import load_dotenv
from tabulate import tabulate
from tqdm import tqdm

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from bags.blur_synth import BlurSpec, synthesize
from bags.bpn import BlurProposalNetwork, kernel_grid, kernel_principal_axis, lattice_pixels
from bags.config import RunConfig, ScaleSchedule, env_defaults
from bags.errors import BagsError, CheckpointError, ConfigError, DatasetError, ScheduleError
from bags.losses import psnr, ssim_metric
from bags.rasterizer import render_at_scale
from bags.scene import GaussianCloud, init_from_points
from bags.tensor import no_grad, set_default_dtype
from bags.trainer import Trainer
from dataset.checkpoint import CheckpointStore
from dataset.store import DatasetStore, png_ids, read_png, write_gaussians_ply, write_metrics, write_png

logger = logging.getLogger("bags.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

CHECKPOINT_NAME = "checkpoint.bags"


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ Error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def banner(title: str):
    print("=" * 60)
    print(title)
    print("=" * 60)


def deep_merge(base: dict, overlay: dict) -> dict:
    merged = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(args, env: dict) -> RunConfig:
    """Defaults < BAGS_* environment < command-line flags < --config file"""
    data = RunConfig().to_dict()
    for key in ("seed", "tile_size", "dtype"):
        if key in env:
            data[key] = env[key]

    if args.dataset:
        data["dataset"] = args.dataset
    if args.output:
        data["output"] = args.output
    if args.seed is not None:
        data["seed"] = args.seed

    default = ScaleSchedule()
    if args.scales or args.kernels or args.iters or args.no_strict_fov or args.warmup_iters is not None:
        schedule = ScaleSchedule.from_lists(
            args.scales or [s.scale for s in default.stages],
            args.kernels or [s.kernel_size for s in default.stages],
            args.iters or [s.iterations for s in default.stages],
            warmup_iters=default.warmup_iters if args.warmup_iters is None else args.warmup_iters,
            strict_fov=not args.no_strict_fov,
        )
        data["schedule"] = asdict(schedule)

    if args.no_bpn:
        data["use_bpn"] = False
    if args.no_rgbd:
        data["use_rgbd"] = False
    if args.detach_bpn_inputs:
        data["detach_bpn_inputs"] = True
    if args.no_warmup:
        data["warmup"] = False
    if args.no_densify:
        data["densify"]["enabled"] = False
    if args.checkpoint_every is not None:
        data["checkpoint_every"] = args.checkpoint_every

    if args.config:
        try:
            with open(args.config, "r") as f:
                overlay = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: not valid JSON ({e})") from None
        data = deep_merge(data, overlay)
    return RunConfig.from_dict(data)


def load_checkpoint(path):
    """(sections, config) of a training checkpoint; sets the default dtype of the run"""
    sections = CheckpointStore(path).load()
    config = RunConfig.from_dict(sections["schedule"][0]["config"])
    set_default_dtype(config.dtype)
    return sections, config


# synth
def cmd_synth(args, parser):
    if not args.output:
        parser.error("--output is required for synth")
    if args.blur == "mixres" and args.views < 4:
        parser.error("--blur mixres needs at least 4 --views")
    spec = BlurSpec(
        kind=args.blur,
        angle=math.radians(args.angle),
        length=args.length,
        focus_depth=args.focus_depth,
        aperture_gain=args.gain,
        seed=args.seed if args.seed is not None else 0,
    )

    print(f"🧪 Synthesizing {args.views} views ({args.blur} blur, seed {spec.seed})...")
    data = synthesize(spec, n_gaussians=args.gaussians, n_views=args.views, size=args.size)
    DatasetStore(args.output).write_synthetic(data)
    print(f"✅ Dataset written to {args.output}")
    print(f"   Train views: {len(data.train_images)}, test views: {len(data.test_images)}, seed points: {len(data.points)}")


# train
def save_loss_curve(log: pd.DataFrame, path: Path):
    fig, ax = plt.subplots(figsize=(8, 4))
    if not log.empty:
        ax.plot(log["iter"], log["total"], label="total", linewidth=1)
        ax.plot(log["iter"], log["l1"], label="l1", linewidth=1, alpha=0.7)
        for it in log["iter"][log["scale"].diff().fillna(0) != 0]:
            ax.axvline(it, color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_train(args, parser, env):
    try:
        config = build_config(args, env)
    except (ConfigError, ScheduleError) as e:
        parser.error(str(e))
    if not config.dataset or not config.output:
        parser.error("train needs --dataset and --output (or both in --config)")
    set_default_dtype(config.dtype)

    store = DatasetStore(config.dataset)
    cameras, images = store.load_split("train")
    points, colors = store.read_points()
    cloud = init_from_points(points, colors)

    output = Path(config.output)
    output.mkdir(parents=True, exist_ok=True)
    config.save(output / "config.json")

    trainer = Trainer(cloud, cameras, images, config)
    if args.resume:
        sections, _ = load_checkpoint(args.resume)
        trainer.restore(sections)
        print(f"📥 Resumed from {args.resume} at iteration {trainer.iteration}")

    checkpoints = CheckpointStore(output / CHECKPOINT_NAME)
    total = config.schedule.total_iterations
    mode = "BAGS" if config.use_bpn else "baseline (no BPN)"
    banner(f"Training {mode}: {len(cameras)} views, {len(trainer.cloud)} Gaussians, {total} iterations")

    bar = tqdm(total=total, initial=trainer.iteration, disable=args.quiet, desc="train", unit="it")

    def progress(iteration, values, stage):
        bar.update(1)
        bar.set_postfix(scale=stage.scale, loss=f"{values['total']:.4f}")

    try:
        result = trainer.run(progress=progress, on_checkpoint=lambda t: checkpoints.save(t.snapshot()))
    finally:
        bar.close()

    result.log.to_csv(output / "loss.csv", index=False, float_format="%.10g")
    checkpoints.save(trainer.snapshot())
    write_gaussians_ply(result.cloud, output / "gaussians.ply")
    save_loss_curve(result.log, output / "loss_curve.png")
    summary = {
        "iterations": trainer.iteration,
        "gaussians": len(result.cloud),
        "final_loss": float(result.log["total"].iloc[-1]) if not result.log.empty else None,
        "mean_mask": result.mean_mask,
        "stages": result.stages,
    }
    with open(output / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)

    if result.stages:
        rows = [[s["scale"], s["kernel"], s["iterations"], f"{s['seconds']:.1f}", s["gaussians"]] for s in result.stages]
        print(tabulate(rows, headers=["Scale", "Kernel", "Iterations", "Seconds", "Gaussians"], tablefmt="grid"))
    if result.mean_mask is not None:
        print(f"   Mean mask at full resolution: {result.mean_mask:.4f}")
    print(f"📤 Outputs written to {output}")
    print("✅ Training complete")


# render
def cmd_render(args, parser):
    if not args.checkpoint or not args.output:
        parser.error("render needs --checkpoint and --output")
    sections, config = load_checkpoint(args.checkpoint)
    cloud = GaussianCloud.from_arrays(sections["cloud"][1])
    dataset = args.dataset or config.dataset
    if not dataset:
        parser.error("render needs --dataset (the checkpoint does not name one)")
    cameras = DatasetStore(dataset).read_cameras()[args.split]
    views = args.ids if args.ids else list(range(len(cameras)))
    missing = [v for v in views if not 0 <= v < len(cameras)]
    if missing:
        raise DatasetError(Path(dataset) / "cameras.json", f"no such view(s): {missing}", args.split)

    print(f"🎨 Rendering {len(views)} {args.split} view(s) at scale {args.scale}...")
    with no_grad():
        for view in views:
            out = render_at_scale(cloud, cameras[view], args.scale, config.background, config.tile_size)
            write_png(Path(args.output) / f"{view:04d}.png", out.color.data)
    print(f"✅ Renders written to {args.output}")


# eval
def cmd_eval(args, parser):
    if not args.renders:
        parser.error("eval needs --renders")
    reference_dir = args.reference or (Path(args.dataset) / "test" if args.dataset else None)
    if reference_dir is None:
        parser.error("eval needs --reference or --dataset")
    renders, references = png_ids(args.renders), png_ids(reference_dir)
    if not renders:
        raise DatasetError(args.renders, "no ####.png renders found")
    unmatched = sorted(set(renders) - set(references))
    if unmatched:
        raise DatasetError(reference_dir, f"no reference image for render id(s) {unmatched}")

    rows = []
    for view in sorted(renders):
        rendered, reference = read_png(renders[view]), read_png(references[view])
        rows.append({"view": view, "psnr": psnr(rendered, reference), "ssim": ssim_metric(rendered, reference)})
    frame = pd.DataFrame(rows)
    mean = {"psnr": float(frame["psnr"].mean()), "ssim": float(frame["ssim"].mean())}

    table = [[r["view"], f"{r['psnr']:.2f}", f"{r['ssim']:.4f}"] for r in rows]
    table.append(["mean", f"{mean['psnr']:.2f}", f"{mean['ssim']:.4f}"])
    print(tabulate(table, headers=["View", "PSNR", "SSIM"], tablefmt="grid"))
    if args.output:
        write_metrics(args.output, rows, mean)
        print(f"📤 Metrics written to {args.output}")


# export-blur
def cmd_export_blur(args, parser):
    if not args.checkpoint or not args.output or args.view is None:
        parser.error("export-blur needs --checkpoint, --view and --output")
    sections, config = load_checkpoint(args.checkpoint)
    if "bpn" not in sections:
        raise CheckpointError(f"{args.checkpoint} was trained without the blur network (--no-bpn); nothing to export")
    cloud = GaussianCloud.from_arrays(sections["cloud"][1])
    network = BlurProposalNetwork.from_arrays(*sections["bpn"])
    dataset = args.dataset or config.dataset
    if not dataset:
        parser.error("export-blur needs --dataset (the checkpoint does not name one)")
    cameras = DatasetStore(dataset).read_cameras()["train"]
    if not 0 <= args.view < len(cameras):
        raise DatasetError(Path(dataset) / "cameras.json", f"no training view {args.view}", "train")
    scale = args.scale if args.scale is not None else min(network.kernel_sizes)
    points = args.lattice if args.lattice is not None else config.lattice

    with no_grad():
        out = render_at_scale(cloud, cameras[args.view], scale, config.background, config.tile_size)
        blur = network.propose(out.color, out.depth, args.view, scale)
    mask = np.asarray(blur.mask.data, dtype=np.float64)

    output = Path(args.output)
    output.mkdir(parents=True, exist_ok=True)
    mask_path = output / f"mask_{args.view:04d}.png"
    grid_path = output / f"kernels_{args.view:04d}.png"
    plt.imsave(mask_path, mask, cmap="inferno", vmin=0.0, vmax=1.0)
    write_png(grid_path, kernel_grid(blur, points))

    lattice = []
    for row, col in lattice_pixels(blur.height, blur.width, points):
        angle = kernel_principal_axis(blur.kernel_at(row, col))
        lattice.append({"row": row, "col": col, "mask": float(mask[row, col]), "angle_degrees": math.degrees(angle)})
    stats = {
        "view": args.view,
        "scale": scale,
        "kernel_size": blur.kernel_size,
        "mean_mask": float(mask.mean()),
        "blurry_fraction": float((mask > 0.5).mean()),
        "lattice": lattice,
    }
    with open(output / "blur_stats.json", "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)

    print(f"✅ Blur field of view {args.view} exported to {output}")
    print(f"   Mean mask: {stats['mean_mask']:.4f}, blurry pixels: {stats['blurry_fraction']:.1%}")


def build_parser() -> UsageParser:
    parser = UsageParser(
        description="Blur-agnostic Gaussian splatting: synthesize, train, render, evaluate",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Synthesize a motion-blurred toy dataset
  python manage.py synth --blur motion --length 6 --output data/motion

  # Train with the blur network (three coarse-to-fine stages)
  python manage.py train --dataset data/motion --output runs/motion --iters 2000,2000,2000

  # Train the plain splatting baseline
  python manage.py train --dataset data/motion --output runs/baseline --no-bpn

  # Render the held-out views and score them
  python manage.py render --checkpoint runs/motion/checkpoint.bags --output runs/motion/test
  python manage.py eval --renders runs/motion/test --dataset data/motion --output runs/motion/metrics.json

  # Export estimated kernels and mask for training view 3
  python manage.py export-blur --checkpoint runs/motion/checkpoint.bags --view 3 --output runs/motion/blur
        """
    )

    parser.add_argument(
        'command',
        choices=['synth', 'train', 'render', 'eval', 'export-blur'],
        help='Command to execute'
    )

    io = parser.add_argument_group('paths')
    io.add_argument('--dataset', help='Dataset directory')
    io.add_argument('--output', help='Output directory (metrics file for eval)')
    io.add_argument('--config', help='JSON run configuration; overrides flags (train)')
    io.add_argument('--checkpoint', help='Checkpoint file (render, export-blur)')
    io.add_argument('--resume', help='Checkpoint to continue training from')
    io.add_argument('--renders', help='Directory of ####.png renders (eval)')
    io.add_argument('--reference', help='Directory of ####.png ground truth (eval, default: <dataset>/test)')

    synth = parser.add_argument_group('synth')
    synth.add_argument('--blur', choices=['motion', 'defocus', 'mixres', 'none'], default='none',
                       help='Degradation of the training views (default: none)')
    synth.add_argument('--angle', type=float, default=0.0, help='Motion direction in degrees (default: 0)')
    synth.add_argument('--length', type=float, default=6.0, help='Motion length in pixels (default: 6)')
    synth.add_argument('--focus-depth', type=float, default=3.0, help='Defocus focus plane depth (default: 3)')
    synth.add_argument('--gain', type=float, default=2.5, help='Defocus aperture gain (default: 2.5)')
    synth.add_argument('--views', type=int, default=24, help='Number of ring cameras (default: 24)')
    synth.add_argument('--gaussians', type=int, default=200, help='Gaussians in the toy scene (default: 200)')
    synth.add_argument('--size', type=int, default=64, help='Image side in pixels (default: 64)')

    train = parser.add_argument_group('train')
    train.add_argument('--seed', type=int, help='Random seed')
    train.add_argument('--scales', type=int_list, help='Comma-separated stage scales, coarsest first (e.g. 3,2,1)')
    train.add_argument('--kernels', type=int_list, help='Comma-separated kernel sizes per stage (e.g. 5,9,17)')
    train.add_argument('--iters', type=int_list, help='Comma-separated iterations per stage')
    train.add_argument('--warmup-iters', type=int, help='Iterations per stage before the blur mask is applied')
    train.add_argument('--no-strict-fov', action='store_true', help='Allow kernel sizes outside the 17..20 px footprint')
    train.add_argument('--no-bpn', action='store_true', help='Disable the blur network (plain splatting baseline)')
    train.add_argument('--no-rgbd', action='store_true', help='Drop rendered RGB-D features from the blur network')
    train.add_argument('--no-warmup', action='store_true', help='Apply the blur mask from the first iteration')
    train.add_argument('--no-densify', action='store_true', help='Disable clone/split/prune')
    train.add_argument('--detach-bpn-inputs', action='store_true', help='Stop gradients from the network into the render')
    train.add_argument('--checkpoint-every', type=int, help='Write a checkpoint every N iterations')

    view = parser.add_argument_group('render / export-blur')
    view.add_argument('--split', choices=['train', 'test'], default='test', help='Cameras to render (default: test)')
    view.add_argument('--ids', type=int_list, help='Comma-separated view ids to render (default: all)')
    view.add_argument('--view', type=int, help='Training view id (export-blur)')
    view.add_argument('--scale', type=int, help='Scale s, images at 1/2^(s-1) resolution (render default: 1)')
    view.add_argument('--lattice', type=int, help='Lattice points per side for the kernel grid (default: 6)')

    parser.add_argument('--quiet', action='store_true', help='No progress bar, warnings only')
    parser.add_argument('--verbose', action='store_true', help='Debug logging and tracebacks')
    parser.add_argument('--log-level', help='Logging level (default: INFO or BAGS_LOG_LEVEL)')
    return parser


def main(argv=None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        env = env_defaults()
        if "dtype" in env:
            set_default_dtype(env["dtype"])
    except (ConfigError, ValueError) as e:
        parser.error(str(e))
    level = args.log_level or env.get("log_level") or ("DEBUG" if args.verbose else "WARNING" if args.quiet else "INFO")
    if not isinstance(logging.getLevelName(level.upper()), int):
        parser.error(f"unknown log level '{level}'")
    logging.basicConfig(level=level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)

    try:
        if args.command == 'synth':
            cmd_synth(args, parser)

        elif args.command == 'train':
            cmd_train(args, parser, env)

        elif args.command == 'render':
            if args.scale is None:
                args.scale = 1
            cmd_render(args, parser)

        elif args.command == 'eval':
            cmd_eval(args, parser)

        elif args.command == 'export-blur':
            cmd_export_blur(args, parser)

    except (BagsError, OSError) as e:
        print(f"❌ Error: {e}")
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
