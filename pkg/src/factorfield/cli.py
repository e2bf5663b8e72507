"""Command-line interface: fit signals, evaluate checkpoints, render views
and generate synthetic datasets."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io_formats, model, tasks
from .io_formats import ConfigError, FormatError, Schedule


def _read_config(args, default_preset: str, dims: int, **preset_kwargs):
    """Config from --config, else the task's default preset."""
    if args.config:
        text = Path(args.config).read_text()
        if args.set:
            text += "\n" + "\n".join(args.set) + "\n"
        return io_formats.parse_config(text)
    lines = [f"preset={default_preset}", f"dims={dims}"]
    lines += [f"{k}={v}" for k, v in preset_kwargs.items()]
    lines += list(args.set or ())
    return io_formats.parse_config("\n".join(lines) + "\n")


def _apply_seed(schedule: Schedule, args) -> Schedule:
    if args.seed is not None:
        schedule.seed = args.seed
    if getattr(args, "steps", None) is not None:
        schedule.steps = args.steps
    return schedule


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_run(out: Path, config, schedule, store, report) -> None:
    text = io_formats.format_config(config, schedule)
    io_formats.save_checkpoint(out / "model.ckpt", text, store)
    io_formats.save_metrics(out / "metrics.log", report)


def cmd_fit_image(args) -> int:
    image = tasks.ImageSignal(io_formats.load_image(args.image))
    config, schedule = _read_config(
        args, "dif_grid", 2,
        out_dim=image.channels,
        signal_extent=float(min(image.width, image.height)),
    )
    schedule = _apply_seed(schedule, args)
    lo, hi = image.bbox()
    config = config.with_bbox(lo, hi)
    out = _outdir(args)
    store, report = tasks.train_direct(config, image, schedule)
    _save_run(out, config, schedule, store, report)
    coords, _ = image.coords_targets(observed_only=False)
    pred = tasks.evaluate_batched(config, store, coords)
    io_formats.save_image(out / "fit.png", pred.reshape(image.height, image.width, -1))
    print(f"fit-image: psnr={report.final['psnr']:.2f}dB "
          f"params={report.final['total']} seed={schedule.seed} -> {out}")
    return 0


def cmd_fit_sdf(args) -> int:
    points, values = io_formats.load_sdf_samples(args.samples)
    data = tasks.SdfSampleSet(points, values)
    lo = tuple(points.min(axis=0))
    hi = tuple(points.max(axis=0))
    config, schedule = _read_config(args, "dif_grid", 3, out_dim=1)
    schedule = _apply_seed(schedule, args)
    config = config.with_bbox(lo, hi)
    out = _outdir(args)
    rng = np.random.default_rng(schedule.seed)
    n_eval = max(1, len(points) // 5)
    eval_idx = rng.choice(len(points), size=n_eval, replace=False)
    train_mask = np.ones(len(points), dtype=bool)
    train_mask[eval_idx] = False
    train = tasks.SdfSampleSet(points[train_mask], values[train_mask])
    evald = tasks.SdfSampleSet(points[eval_idx], values[eval_idx])
    store, report = tasks.train_direct(config, train, schedule, eval_data=evald)
    _save_run(out, config, schedule, store, report)
    print(f"fit-sdf: giou={report.final['giou']:.4f} rmse={report.final['rmse']:.4g} "
          f"seed={schedule.seed} -> {out}")
    return 0


def cmd_fit_rf(args) -> int:
    scene = tasks.ToyScene()
    images, ray_batches = tasks.make_toy_views(
        scene, args.views + args.heldout, args.size, args.size
    )
    train_rays = ray_batches[: args.views]
    heldout = ray_batches[args.views :]
    config, schedule = _read_config(
        args, "dif_grid", 3,
        projection="volume",
        bbox_min=",".join(str(v) for v in scene.bbox_min),
        bbox_max=",".join(str(v) for v in scene.bbox_max),
    )
    schedule = _apply_seed(schedule, args)
    out = _outdir(args)
    store, report = tasks.train_radiance(config, train_rays, schedule, heldout_rays=heldout)
    _save_run(out, config, schedule, store, report)
    psnr = report.final.get("psnr", float("nan"))
    print(f"fit-rf: psnr={psnr:.2f}dB seed={schedule.seed} -> {out}")
    return 0


def cmd_train_shared(args) -> int:
    signals = [tasks.ImageSignal(io_formats.load_image(p)) for p in args.images]
    h, w = signals[0].height, signals[0].width
    if any(s.height != h or s.width != w for s in signals):
        raise FormatError("shared training requires images of equal size")
    config, schedule = _read_config(
        args, "dif_grid", 2,
        out_dim=signals[0].channels,
        signal_extent=float(min(w, h)),
    )
    schedule = _apply_seed(schedule, args)
    config = config.with_bbox(*signals[0].bbox())
    out = _outdir(args)
    session, report = tasks.train_shared(config, signals, schedule)
    text = io_formats.format_config(config, schedule)
    for j, store in enumerate(session.stores):
        io_formats.save_checkpoint(out / f"model_s{j}.ckpt", text, store)
    io_formats.save_metrics(out / "metrics.log", report)
    psnrs = ", ".join(f"{v:.2f}" for v in report.final["psnr_per_signal"])
    print(f"train-shared: psnr=[{psnrs}]dB seed={schedule.seed} -> {out}")
    return 0


def cmd_eval(args) -> int:
    text, store = io_formats.load_checkpoint(args.checkpoint)
    config, _ = io_formats.parse_config(text)
    if args.image:
        image = tasks.ImageSignal(io_formats.load_image(args.image))
        coords, targets = image.coords_targets()
        pred = tasks.evaluate_batched(config, store, coords)
        print(f"eval: psnr={tasks.psnr(pred, targets):.2f}dB over {len(coords)} pixels")
    elif args.samples:
        points, values = io_formats.load_sdf_samples(args.samples)
        pred = tasks.evaluate_batched(config, store, points)[:, 0]
        print(f"eval: giou={tasks.giou(pred, values):.4f} "
              f"rmse={float(np.sqrt(np.mean((pred - values) ** 2))):.4g} "
              f"over {len(points)} samples")
    else:
        raise FormatError("eval needs --image or --samples")
    return 0


def cmd_render(args) -> int:
    text, store = io_formats.load_checkpoint(args.checkpoint)
    config, schedule = io_formats.parse_config(text)
    out = Path(args.out)
    if config.projection.kind == model.VOLUME:
        pose = tasks.orbit_poses(max(1, args.n_poses), args.radius)[args.pose_index]
        focal = 1.1 * args.width
        rgb = tasks.render_image(
            config, store, pose, args.width, args.height, focal,
            args.radius - 1.4, args.radius + 1.4, schedule.n_samples,
        )
        io_formats.save_image(out, rgb)
    else:
        lo = np.asarray(config.contraction.bbox_min)
        hi = np.asarray(config.contraction.bbox_max)
        ys, xs = np.mgrid[0 : args.height, 0 : args.width]
        u = (xs + 0.5) / args.width
        v = (ys + 0.5) / args.height
        coords = np.stack(
            [lo[0] + u * (hi[0] - lo[0]), lo[1] + v * (hi[1] - lo[1])], axis=-1
        ).reshape(-1, 2)
        pred = tasks.evaluate_batched(config, store, coords)
        io_formats.save_image(out, np.clip(pred.reshape(args.height, args.width, -1), 0, 1))
    print(f"render: {args.width}x{args.height} -> {out}")
    return 0


def cmd_info(args) -> int:
    text, store = io_formats.load_checkpoint(args.checkpoint)
    config, schedule = io_formats.parse_config(text)
    counts = model.param_count(config)
    print(
        f"info: dims={config.dims} factors={len(config.factors)} "
        f"connector={config.connector} projection={config.projection.kind} "
        f"params={counts['total']} (proj={counts['projection']} "
        f"coef={counts['coefficients']} basis={counts['basis']}) "
        f"tensors={len(store.names())}"
    )
    return 0


def cmd_make_synthetic(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "image":
        img = tasks.band_limited_image(args.size, args.size, seed=args.seed or 0)
        io_formats.save_image(out, img)
        print(f"make-synthetic: image {args.size}x{args.size} -> {out}")
    elif args.kind in tasks.SDF_SHAPES:
        data = tasks.make_sdf_samples(args.kind, args.count, seed=args.seed or 0)
        io_formats.save_sdf_samples(out, data.points, data.values)
        print(f"make-synthetic: {args.kind} sdf with {args.count} samples -> {out}")
    else:
        raise FormatError(f"unknown synthetic kind {args.kind!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factorfield", description="Factored neural field fitting toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps=True):
        p.add_argument("--config", help="config file (key=value text)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")
        p.add_argument("--seed", type=int, help="RNG seed override")
        if steps:
            p.add_argument("--steps", type=int, help="training step override")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("fit-image", help="fit a 2D image")
    p.add_argument("image", help="input PNG or PPM")
    common(p)
    p.set_defaults(fn=cmd_fit_image)

    p = sub.add_parser("fit-sdf", help="fit an SDF from a sample file")
    p.add_argument("samples", help="input SDF sample file")
    common(p)
    p.set_defaults(fn=cmd_fit_sdf)

    p = sub.add_parser("fit-rf", help="fit a toy radiance field")
    p.add_argument("--views", type=int, default=16, help="training views")
    p.add_argument("--heldout", type=int, default=2, help="held-out views")
    p.add_argument("--size", type=int, default=64, help="view resolution")
    common(p)
    p.set_defaults(fn=cmd_fit_rf)

    p = sub.add_parser("train-shared", help="jointly fit several images with shared basis")
    p.add_argument("images", nargs="+", help="input images of equal size")
    common(p)
    p.set_defaults(fn=cmd_train_shared)

    p = sub.add_parser("eval", help="evaluate a checkpoint against data")
    p.add_argument("checkpoint")
    p.add_argument("--image", help="reference image")
    p.add_argument("--samples", help="reference SDF samples")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", help="render a checkpoint to an image")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--radius", type=float, default=2.5, help="camera orbit radius (volume models)")
    p.add_argument("--n-poses", type=int, default=8)
    p.add_argument("--pose-index", type=int, default=0)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("info", help="describe a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_info)

    p = sub.add_parser("make-synthetic", help="generate test data")
    p.add_argument("kind", help="image | sphere | torus")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--count", type=int, default=100000)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_make_synthetic)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, FileNotFoundError, tasks.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
