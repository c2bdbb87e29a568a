"""Command line entry points: run the SLAM pipeline, evaluate results,
generate synthetic benchmark sequences."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import datasets, meshing, metrics, renderer, synthetic
from .checkpoint import save_checkpoint
from .slam import SystemConfig, run_slam


class _AnalyticSdf:
    """Adapts a synthetic scene to the grid interface the mesher expects."""

    def __init__(self, scene, pad: float = 0.1):
        # pad past the walls so the zero crossing at the room boundary is
        # bracketed by samples of both signs
        self.scene = scene
        lo = scene.room_center - scene.room_half - pad
        hi = scene.room_center + scene.room_half + pad
        self.scene_bounds = (tuple(lo), tuple(hi))

    def sdf_grid(self, xs, ys, zs, chunk: int = 65536) -> np.ndarray:
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        out = np.empty(pts.shape[0])
        for start in range(0, pts.shape[0], chunk):
            out[start:start + chunk] = self.scene.sdf(pts[start:start + chunk])
        return out.reshape(len(xs), len(ys), len(zs))


def _load_config(path) -> SystemConfig:
    if path is None:
        return SystemConfig()
    with open(path) as f:
        return SystemConfig.from_dict(json.load(f))


def _save_image(path, img: np.ndarray) -> None:
    Image.fromarray(np.clip(img * 255.0, 0, 255).astype(np.uint8)).save(path)


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    frames = datasets.load_dataset(args.dataset)
    t0 = time.time()

    def progress(i, state):
        if args.verbose:
            n_kf = len(state.store)
            print(f"frame {i:4d}  keyframes {n_kf:3d}  phase {state.phase:9s}  "
                  f"{time.time() - t0:6.1f}s", flush=True)

    result = run_slam(frames, cfg, progress=progress if args.verbose else None)
    state = result.state

    datasets.write_trajectory(out / "trajectory.txt", state.trajectory)
    state.store.dump_jsonl(out / "keyframes.jsonl")
    save_checkpoint(out / "map.ckpt", state.map.named_parameters())
    with open(out / "losses.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "iteration", "photometric", "free_space", "truncation", "total"])
        writer.writerows(state.loss_rows)

    if args.mesh:
        verts, faces = meshing.extract_mesh(state.map, cfg.mesh_resolution)
        meshing.save_ply(out / "mesh.ply", verts, faces)
        if args.verbose:
            print(f"mesh: {len(verts)} vertices, {len(faces)} faces")

    if args.render_keyframes:
        render_dir = out / "renders"
        render_dir.mkdir(exist_ok=True)
        for kf in state.store.ordered():
            rgb, depth = renderer.render_frame(state.map, kf.frame, kf.pose, cfg,
                                               stride=2, seed=cfg.seed)
            _save_image(render_dir / f"kf_{kf.id:04d}_rgb.png", rgb)
            _save_image(render_dir / f"kf_{kf.id:04d}_depth.png", depth / max(cfg.far, 1e-6))

    summary = {
        "frames": state.frame_index + 1,
        "keyframes": len(state.store),
        "culled": sum(1 for e in state.keyframe_events if e["culled"]),
        "phase_violations": len(state.monitor.violations),
        "wall_time_s": round(time.time() - t0, 2),
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_eval_ate(args) -> int:
    est = datasets.read_trajectory(args.estimated)
    gt = datasets.read_trajectory(args.ground_truth)
    stats = metrics.ate(est, gt, max_dt=args.max_dt)
    print(json.dumps(stats, indent=2))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(stats, f, indent=2)
    return 0


def cmd_eval_recon(args) -> int:
    rng = np.random.default_rng(args.seed)
    verts, faces = meshing.load_ply(args.mesh)
    pred = meshing.sample_mesh_surface(verts, faces, args.samples, rng)
    ref_verts, ref_faces = meshing.load_ply(args.reference)
    gt = meshing.sample_mesh_surface(ref_verts, ref_faces, args.samples, rng)
    stats = metrics.reconstruction_metrics(pred, gt, tau=args.tau)
    stats["tau"] = args.tau
    stats["samples"] = args.samples
    print(json.dumps(stats, indent=2))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(stats, f, indent=2)
    return 0


def cmd_make_synthetic(args) -> int:
    scene = synthetic.make_default_scene()
    intr = synthetic.default_intrinsics(args.width, args.height)
    poses = synthetic.orbit_trajectory(scene, args.frames, sweep_deg=args.sweep_deg)
    frames, gt = synthetic.generate_synthetic(scene, poses, intr, fps=args.fps)

    out = Path(args.out)
    datasets.write_dataset(out, frames)

    # SLAM anchors its world at the first camera, so express the ground
    # truth, the reference mesh and the suggested map bounds in that frame
    base_inv = poses[0].inverse()
    gt = [(t, base_inv.compose(p)) for t, p in gt]
    datasets.write_trajectory(out / "groundtruth.txt", gt)

    adapter = _AnalyticSdf(scene)
    verts, faces = meshing.extract_mesh(adapter, args.mesh_resolution)
    meshing.save_ply(out / "scene.ply", base_inv.transform(verts), faces)

    lo, hi = (np.asarray(b) for b in adapter.scene_bounds)
    corners = np.stack(np.meshgrid(*zip(lo, hi), indexing="ij"), axis=-1).reshape(-1, 3)
    rebased = base_inv.transform(corners)
    bounds = [np.floor(rebased.min(axis=0) * 10) / 10, np.ceil(rebased.max(axis=0) * 10) / 10]
    with open(out / "config.json", "w") as f:
        json.dump({"scene_bounds": [[float(v) for v in b] for b in bounds]}, f, indent=2)
    print(f"wrote {len(frames)} frames, groundtruth.txt, scene.ply and config.json to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idf-slam",
                                     description="RGB-D SLAM with an online neural implicit map")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run SLAM on an RGB-D sequence")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--render-keyframes", action="store_true",
                   help="render rgb/depth images at every keyframe pose")
    p.add_argument("--mesh", action="store_true", help="extract mesh.ply when done")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval-ate", help="absolute trajectory error vs ground truth")
    p.add_argument("--estimated", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--max-dt", type=float, default=0.010)
    p.add_argument("--out", default=None, help="write metrics.json here")
    p.set_defaults(fn=cmd_eval_ate)

    p = sub.add_parser("eval-recon", help="surface accuracy/completion vs a reference mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write metrics.json here")
    p.set_defaults(fn=cmd_eval_recon)

    p = sub.add_parser("make-synthetic", help="render a synthetic RGB-D benchmark sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--height", type=int, default=60)
    p.add_argument("--sweep-deg", type=float, default=360.0)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--mesh-resolution", type=float, default=0.05)
    p.set_defaults(fn=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
