"""Command-line front end: synth | run | eval | render | report."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import configure_threads
from .config import RunConfig, default_config_text, load_config
from .errors import DynreconError
from .geometry import RigidPose
from .io import (
    load_dataset,
    read_trajectory,
    save_dataset,
    write_image,
    write_trajectory,
)
from .metrics import Trajectory, ate_rmse, psnr, ssim

log = logging.getLogger("dynrecon")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    return cfg.validate()


def _dataset_for(cfg: RunConfig):
    from .synthetic import generate, make_scene

    if cfg.dataset:
        return load_dataset(cfg.dataset)
    spec = make_scene(
        cfg.preset, frames=cfg.frames, seed=cfg.seed, movers=cfg.movers,
        flow_sigma=cfg.flow_sigma, depth_affine=(cfg.depth_affine_a, cfg.depth_affine_b),
        depth_sigma=cfg.depth_sigma, dropout=cfg.dropout,
    )
    from .synthetic import generate as _gen

    return _gen(spec)


def cmd_synth(args) -> int:
    cfg = _apply_overrides(load_config(args.config) if args.config else RunConfig(), args)
    from .synthetic import generate, make_scene

    spec = make_scene(
        cfg.preset, frames=cfg.frames, seed=cfg.seed, movers=cfg.movers,
        flow_sigma=cfg.flow_sigma, depth_affine=(cfg.depth_affine_a, cfg.depth_affine_b),
        depth_sigma=cfg.depth_sigma, dropout=cfg.dropout,
    )
    ds = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out, ds)
    print(f"dataset: {ds.frames} frames, {ds.intrinsics.width}x{ds.intrinsics.height} -> {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config) if args.config else RunConfig(), args)
    from .progressive import run_pipeline, save_state

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = _dataset_for(cfg)
    state = run_pipeline(ds, cfg)
    write_trajectory(out / "trajectory_est.txt", state.trajectory(), comment="estimated camera trajectory")
    gt = Trajectory(np.arange(ds.frames, dtype=np.float64), [ds.pose(t) for t in range(ds.frames)])
    write_trajectory(out / "trajectory_gt.txt", gt, comment="ground-truth camera trajectory")
    save_state(out / f"checkpoint_{state.batch_index:03d}.npz", state)
    with open(out / "loss_trace.csv", "w", newline="") as f:
        fields = ["batch", "step", "rgb", "depth", "track", "mask", "arap", "vel", "acc", "total", "aborted"]
        writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in state.loss_trace:
            writer.writerow(row)
    (out / "config_used.txt").write_text(default_config_text())
    print(f"run complete: {state.batch_index} batches, {len(state.poses)} frames -> {out}")
    return 0


def _render_state_views(state, frames, out_dir=None):
    import torch

    from .splatting import GaussianCloud, render, warp_dynamic

    views = {}
    with torch.no_grad():
        for f in frames:
            clouds = [state.gmap.static] if len(state.gmap.static) else []
            if len(state.gmap.dynamic) and state.scaffold is not None:
                t = min(int(f), state.scaffold.num_timesteps - 1)
                clouds.append(warp_dynamic(state.gmap.dynamic, state.scaffold, t))
            cloud = GaussianCloud.cat(clouds) if clouds else GaussianCloud.empty()
            outp = render(cloud, state.poses[f], state.intrinsics, retain_graph=False)
            views[f] = outp.color
            if out_dir is not None:
                write_image(Path(out_dir) / f"render_{f:05d}.png", outp.color)
    return views


def cmd_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config) if args.config else RunConfig(), args)
    from .progressive import load_state

    out = Path(args.out)
    ds = _dataset_for(cfg)
    ckpts = sorted(out.glob("checkpoint_*.npz"))
    if not ckpts:
        raise DynreconError(f"no checkpoint under {out}")
    state = load_state(ckpts[-1], ds)

    est = read_trajectory(out / "trajectory_est.txt")
    gt = Trajectory(np.arange(ds.frames, dtype=np.float64), [ds.pose(t) for t in range(ds.frames)])
    ate = ate_rmse(est, gt)

    holdout = []
    if cfg.holdout_stride > 1:
        holdout = [f for f in range(state.processed) if f % cfg.holdout_stride == cfg.holdout_stride - 1]
    train = [f for f in range(state.processed) if f not in set(holdout)]
    rows = []
    for name, frames in (("train", train), ("holdout", holdout)):
        if not frames:
            continue
        views = _render_state_views(state, frames)
        ps = [psnr(views[f], ds.images[f]) for f in frames]
        ss = [ssim(views[f], ds.images[f]) for f in frames]
        rows.append({"split": name, "frames": len(frames), "psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))})

    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "split", "value"])
        writer.writerow(["ate_rmse", "all", f"{ate:.10f}"])
        for r in rows:
            writer.writerow(["psnr", r["split"], f"{r['psnr']:.6f}"])
            writer.writerow(["ssim", r["split"], f"{r['ssim']:.6f}"])
    print(f"ate_rmse: {ate:.3e}")
    for r in rows:
        print(f"{r['split']}: psnr {r['psnr']:.2f} dB  ssim {r['ssim']:.4f}  ({r['frames']} views)")
    return 0


def cmd_render(args) -> int:
    cfg = _apply_overrides(load_config(args.config) if args.config else RunConfig(), args)
    from .progressive import load_state

    ds = _dataset_for(cfg)
    state = load_state(args.checkpoint, ds)
    traj = read_trajectory(args.poses)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ts, pose in zip(traj.timestamps, traj.poses):
        f = int(round(float(ts)))
        state.poses[f] = pose
    _render_state_views(state, [int(round(float(t))) for t in traj.timestamps], out)
    print(f"rendered {len(traj.poses)} views -> {out}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    trace = out / "loss_trace.csv"
    metrics = out / "metrics.csv"
    if trace.exists():
        with open(trace) as f:
            rows = list(csv.DictReader(f))
        if rows:
            print(f"loss trace: {len(rows)} steps")
            by_batch: dict = {}
            for r in rows:
                by_batch.setdefault(r["batch"], []).append(float(r["total"]))
            for b in sorted(by_batch, key=int):
                vals = by_batch[b]
                print(f"  batch {b}: first {vals[0]:.5f}  last {vals[-1]:.5f}  steps {len(vals)}")
    if metrics.exists():
        print(metrics.read_text().strip())
    if not trace.exists() and not metrics.exists():
        print(f"nothing to report under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynrecon", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mode=True):
        sp.add_argument("--config", type=str, default=None, help="flat section.key = value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=str, required=True, help="output directory")
        if mode:
            sp.add_argument("--mode", choices=["rgbd", "rgb"], default=None)

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    common(sp)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("run", help="execute the full pipeline")
    common(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("eval", help="score a finished run against ground truth")
    common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("render", help="render novel views from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", type=str, required=True)
    sp.add_argument("--poses", type=str, required=True, help="trajectory file of views to render")
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("report", help="summarize loss traces and metrics")
    common(sp, mode=False)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    configure_threads()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DynreconError as exc:
        stage = args.command
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
