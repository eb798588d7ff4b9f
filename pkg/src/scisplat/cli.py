"""Command-line entry point: ``scisplat <command> ...``.

Exit status is 0 on success, 1 for invalid input and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SciSplatError, ValidationError
from .gradcheck import finite_diff_check, random_check_scene
from .init_protocol import (
    DEFAULT_POINTS,
    PoseSet,
    SparsePoints,
    downsample_points,
    extract_degraded_frames,
    init_gaussians,
    init_poses,
    random_points,
)
from .io import (
    config_hash,
    load_manifest,
    read_checkpoint,
    read_cloud,
    read_points,
    read_poses,
    read_tensor,
    write_checkpoint,
    write_cloud,
    write_poses,
    write_tensor,
)
from .metrics import Trajectory, ate, psnr, ssim, write_report
from .render import render_views
from .sci_forward import MaskStack, Measurement, synthesize_measurement
from .synth import SceneSpec, build_dataset, load_dataset, write_dataset
from .train import TrainConfig, train

log = logging.getLogger("scisplat")


class GradCheckFailed(SciSplatError):
    pass


def _load_inputs(data):
    man, root = load_manifest(data)
    masks = MaskStack(read_tensor(root / man.masks), nominal_or=man.overlap_ratio, seed=man.seed)
    y = Measurement(read_tensor(root / man.measurement), man.noise_sigma)
    return man, root, masks, y


def cmd_synth(args) -> None:
    spec = SceneSpec.from_json(args.spec)
    if args.seed is not None:
        spec = SceneSpec.from_dict(dict(spec.to_dict(), seed=args.seed))
    bundle = build_dataset(spec, args.threads)
    path = write_dataset(bundle, args.out)
    print(f"wrote {path}")


def cmd_encode(args) -> None:
    frames = read_tensor(args.frames)
    masks = MaskStack(read_tensor(args.masks))
    y = synthesize_measurement(frames, masks, args.noise_sigma, args.seed or 0)
    write_tensor(args.out, y.image)
    print(f"wrote {args.out}")


def cmd_init(args) -> None:
    man, root, masks, y = _load_inputs(args.data)
    k = man.get_intrinsics()
    tau = man.tau if args.tau is None else args.tau
    frames = extract_degraded_frames(y, masks, tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "degraded.scit", np.stack([f.image for f in frames]))
    write_tensor(out / "validity.scit", np.stack([f.validity for f in frames]).astype(np.float64))

    seed = args.seed or 0
    if args.pose_mode == "import":
        poses = init_poses("import", k, path=args.pose_file)
    elif args.pose_mode == "spline":
        ends = read_poses(args.pose_file)
        poses = init_poses("spline", k, start=ends[0], end=ends[-1], n=masks.n_frames)
    else:
        gt = read_poses(args.pose_file or root / man.poses)
        poses = init_poses(
            "perturbed_gt", k, poses=gt, sigma_rot=np.deg2rad(args.rot_sigma_deg), sigma_trans=args.trans_sigma, seed=seed
        )
    if len(poses) != masks.n_frames:
        raise ValidationError(f"{len(poses)} initial poses for {masks.n_frames} frames")

    if args.points:
        points = read_points(args.points)
    elif args.random_points:
        lo, hi = np.array(args.box[:3]), np.array(args.box[3:])
        points = random_points(lo, hi, args.random_points, seed)
    elif man.cloud is not None:
        # synthetic data: ground-truth centers with jitter stand in for an SfM export
        centers = read_cloud(root / man.cloud).means
        rng = np.random.default_rng(seed)
        points = SparsePoints(centers + rng.normal(0.0, args.point_jitter, centers.shape))
    else:
        raise ValidationError("no points: pass --points or --random-points")
    points = downsample_points(points, args.n_points, seed)
    cloud = init_gaussians(points, frames, poses)
    write_cloud(out / "cloud.scit", cloud)
    write_poses(out / "poses.json", poses.poses)
    print(f"wrote {len(frames)} degraded frames, {len(cloud)} Gaussians, {len(poses)} poses to {out}")


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text()))
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    if args.iterations is not None:
        values["iterations"] = args.iterations
    if args.no_pose_opt:
        values["optimize_poses"] = False
    if args.densify is not None:
        values["densify"] = args.densify
    if args.seed is not None:
        values["seed"] = args.seed
    if args.threads is not None:
        values["threads"] = args.threads
    return TrainConfig(**values)


def cmd_train(args) -> None:
    man, root, masks, y = _load_inputs(args.data)
    init = Path(args.init)
    cloud = read_cloud(init / "cloud.scit")
    poses = PoseSet(read_poses(init / "poses.json"), man.get_intrinsics())
    config = _train_config(args)
    state = train(y, masks, cloud, poses, config)
    header = {
        "iteration": state.iteration,
        "config": config.to_dict(),
        "config_hash": config_hash(config.to_dict()),
        "seed": config.seed,
        "height": man.height,
        "width": man.width,
        "final_loss": state.loss_history[-1] if state.loss_history else None,
    }
    write_checkpoint(args.out, state.cloud, state.poses.poses, man.get_intrinsics(), header)
    (Path(args.out) / "loss.json").write_text(json.dumps(state.loss_history))
    print(f"wrote checkpoint to {args.out} ({len(state.cloud)} Gaussians, {state.iteration} iterations)")


def _write_png(path, image) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def cmd_render(args) -> None:
    cloud, poses, k, header = read_checkpoint(args.checkpoint)
    if args.poses:
        poses = read_poses(args.poses)
    if args.height and args.width:
        h, w = args.height, args.width
    elif "height" in header:
        h, w = header["height"], header["width"]
    else:
        h, w = int(round(2 * k.cy)), int(round(2 * k.cx))
    frames, _ = render_views(cloud, poses, k, h, w, args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "frames.scit", np.stack(frames))
    if args.png:
        for i, f in enumerate(frames):
            _write_png(out / f"frame_{i:03d}.png", f)
    print(f"wrote {len(frames)} frames to {out}")


def cmd_eval(args) -> None:
    bundle = load_dataset(args.data)
    if bundle.frames is None:
        raise ValidationError("dataset has no ground-truth frames")
    est = read_tensor(args.frames)
    if est.shape != bundle.frames.shape:
        raise ValidationError(f"estimated frames {est.shape} vs ground truth {bundle.frames.shape}")
    est = np.clip(est, 0.0, 1.0)
    psnrs = [psnr(a, b) for a, b in zip(est, bundle.frames)]
    ssims = [ssim(a, b) for a, b in zip(est, bundle.frames)]
    ate_value = None
    if args.poses and bundle.poses:
        ate_value = ate(Trajectory(read_poses(args.poses)), Trajectory(bundle.poses))
    write_report(args.out, args.scene, psnrs, ssims, ate_value)
    msg = f"mean PSNR {np.mean(psnrs):.2f} dB, mean SSIM {np.mean(ssims):.4f}"
    if ate_value is not None:
        msg += f", ATE {ate_value:.5f}"
    print(msg)


def cmd_check_grad(args) -> None:
    ok = True
    for n in range(args.scenes):
        seed = (args.seed or 0) + n
        cloud, poses, k = random_check_scene(seed, args.gaussians, args.size, args.views)
        report = finite_diff_check(
            cloud, poses, k, args.size, args.size, step=args.step, tolerance=args.tolerance, seed=seed
        )
        print(f"scene seed {seed}")
        for line in report.lines():
            print("  " + line)
        ok &= report.passed
    if not ok:
        raise GradCheckFailed("finite-difference check failed")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="defaults to $SCISPLAT_THREADS or 1")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="scisplat", description="Snapshot compressive imaging with Gaussian splatting")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="build a synthetic dataset from a scene spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("encode", parents=[common], help="frames + masks -> measurement")
    s.add_argument("--frames", required=True)
    s.add_argument("--masks", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--noise-sigma", type=float, default=0.0)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("init", parents=[common], help="degraded frames, initial Gaussians and poses")
    s.add_argument("--data", required=True, help="dataset directory or manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--tau", type=float, default=None, help="mask threshold (1.0 synthetic, 0.8 real)")
    s.add_argument("--pose-mode", choices=["perturbed_gt", "import", "spline"], default="perturbed_gt")
    s.add_argument("--pose-file", default=None)
    s.add_argument("--rot-sigma-deg", type=float, default=0.5)
    s.add_argument("--trans-sigma", type=float, default=0.0283, help="1%% of the default scene diagonal")
    s.add_argument("--points", default=None, help="JSON points file")
    s.add_argument("--random-points", type=int, default=0)
    s.add_argument("--box", type=float, nargs=6, default=[-1, -1, -1, 1, 1, 1])
    s.add_argument("--point-jitter", type=float, default=0.005)
    s.add_argument("--n-points", type=int, default=DEFAULT_POINTS)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("train", parents=[common], help="joint Gaussian + pose optimization")
    s.add_argument("--data", required=True)
    s.add_argument("--init", required=True, help="directory written by init")
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None, help="JSON with TrainConfig fields")
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--no-pose-opt", action="store_true")
    s.add_argument("--densify", choices=["mcmc", "adc", "none"], default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", parents=[common], help="render frames from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--poses", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--height", type=int, default=None)
    s.add_argument("--width", type=int, default=None)
    s.add_argument("--png", action="store_true")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", parents=[common], help="metrics against ground truth")
    s.add_argument("--data", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--poses", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--scene", default="scene")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("check-grad", parents=[common], help="finite-difference gradient harness")
    s.add_argument("--scenes", type=int, default=3)
    s.add_argument("--gaussians", type=int, default=5)
    s.add_argument("--views", type=int, default=2)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--step", type=float, default=1e-4)
    s.add_argument("--tolerance", type=float, default=1e-3)
    s.set_defaults(func=cmd_check_grad)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SciSplatError, OSError, FloatingPointError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
