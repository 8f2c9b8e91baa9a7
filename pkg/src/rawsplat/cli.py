"""Command line entry point: ``python -m rawsplat <command>``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import RawSplatError


def _load_json(path):
    return json.loads(Path(path).read_text())


def cmd_synth(args):
    from .harness.scene import scene_synthesize

    doc = _load_json(args.spec)
    if args.seed is not None:
        doc["seed"] = args.seed
    path = scene_synthesize(doc, args.out, spec_dir=Path(args.spec).parent)
    print(f"dataset written to {path}")


def cmd_calibrate(args):
    from .calibration import calibrate_manifest
    from .harness.sensor import SensorSpec, synthetic_sensor, write_calibration_capture
    from .noise import save_noise_params

    manifest = args.manifest
    if manifest is None:
        spec = SensorSpec.from_dict(_load_json(args.sensor)) if args.sensor else SensorSpec()
        truth = synthetic_sensor(spec, tuple(args.shape), args.seed or 0)
        capture = Path(args.capture_dir or Path(args.out).parent / "capture")
        manifest = write_calibration_capture(truth, capture, seed=args.seed or 0,
                                             black_level=spec.black_level,
                                             white_level=spec.white_level)
        print(f"simulated capture written to {manifest}")
    model = calibrate_manifest(manifest)
    save_noise_params(model, args.out)
    for row in model.metadata.get("per_iso", []):
        print(f"ISO {row['iso']:g}: k={row['k']:.4g} sigma_read={row['sigma_read']:.4g} "
              f"({row['points_used']}/{row['points_total']} points)")
    print(f"a_k={model.a_k:.4g} b_k={model.b_k:.4g} a_read={model.a_read:.4g} "
          f"b_read={model.b_read:.4g} -> {args.out}")


def cmd_pretrain(args):
    from .extractor import save_weights
    from .harness.pretrain import pretrain_extractor
    from .noise import load_noise_params

    model = load_noise_params(args.noise)
    net, _, before, after = pretrain_extractor(model, args.iso, args.steps, args.seed or 0,
                                               args.size, lr=args.lr)
    save_weights(net, args.out)
    print(f"held-out noise MSE {before:.4g} -> {after:.4g} ({after / before:.1%}); "
          f"weights written to {args.out}")


def _train_config(args):
    from .harness.config import TrainConfig

    cfg = TrainConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = str(Path(args.out).resolve())
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "iterations", None):
        changes["iterations"] = args.iterations
    return cfg.replace(**changes) if changes else cfg


def cmd_train(args):
    from .harness.train import train

    cfg = _train_config(args)
    if cfg.out is None:
        raise RawSplatError("train needs an output directory (--out or 'out' in the config)")
    result = train(cfg, resume=args.resume)
    last = result.metrics[-1]
    print(f"iteration {last.iteration}: raw PSNR {last.raw_psnr:.2f} dB, "
          f"tone-mapped {last.tonemapped_psnr:.2f} dB, M={last.gaussians}, "
          f"anisotropy median {last.aniso_median:.2f}; outputs in {result.out_dir}")


def cmd_eval(args):
    from .harness.scene import load_dataset
    from .harness.train import evaluate, write_metrics
    from .splat.gaussians import load_cloud

    ds = load_dataset(args.dataset)
    row = evaluate(load_cloud(args.cloud), ds.test, args.mode, args.ldr_gain)
    if args.out:
        write_metrics([row], args.out)
    print(f"raw PSNR {row.raw_psnr:.3f} dB, tone-mapped PSNR {row.tonemapped_psnr:.3f} dB, "
          f"M={row.gaussians}, anisotropy median {row.aniso_median:.3f} p95 {row.aniso_p95:.3f}, "
          f"{row.wall_ms_per_render:.1f} ms/render")


def cmd_sweep(args):
    from .harness.experiments import experiment_views_sweep, sweep_gaps

    cfg = _train_config(argparse.Namespace(config=args.config, seed=args.seed, out=None))
    rows = experiment_views_sweep(cfg, args.views, args.out, tuple(args.modes))
    for r in rows:
        print(f"{r['mode']:>12} N={r['N']:<3} raw PSNR {r['raw_psnr']:.2f} dB  "
              f"M={r['gaussians']}  anisotropy {r['aniso_median']:.2f}")
    for n, gap in sweep_gaps(rows).items():
        print(f"gap N={n}: {gap:+.2f} dB")


def cmd_variance(args):
    from .analysis import VarianceStudyConfig, loglog_slope, optimal_target_variance, write_csv

    doc = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    if "view_counts" in doc:
        doc["view_counts"] = tuple(doc["view_counts"])
    rows = optimal_target_variance(VarianceStudyConfig(**doc))
    write_csv(rows, args.out)
    for r in rows:
        print(f"N={r['N']:<3} var={r['var_empirical']:.5g} sigma^2/N={r['var_sigma2_over_N']:.5g} "
              f"sigma^2/N^2={r['var_sigma2_over_N2']:.5g}")
    print(f"log-log slope {loglog_slope(rows):.4f}; table written to {args.out}")


def cmd_render(args):
    from .camera import load_camera
    from .distortion import apply_map, build_distortion_map
    from .harness.scene import load_dataset
    from .raw import RawImage, save_pgm, save_png, save_raw, tone_map
    from .splat.gaussians import load_cloud
    from .splat.render import render

    cloud = load_cloud(args.cloud)
    if args.camera:
        cams = [(Path(c).stem, load_camera(c)) for c in args.camera]
    else:
        ds = load_dataset(args.dataset)
        cams = [(v.name, v.camera) for v in ds.test]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save = save_png if args.format == "png" else save_pgm
    for name, cam in cams:
        plane = render(cloud, cam).plane
        if not args.undistorted:
            plane = apply_map(plane, build_distortion_map(cam, "inverse"))
        save(tone_map(np.maximum(plane, 0.0), args.gain), out / f"{name}.{args.format}")
        if args.raw:
            save_raw(RawImage.from_normalized(plane, 0.0, 1.0), out / f"{name}.rawf")
    print(f"rendered {len(cams)} view(s) into {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rawsplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True, out_help="output path"):
        sp.add_argument("--seed", type=int, default=None, help="override the seed")
        sp.add_argument("--out", required=out_required, help=out_help)

    s = sub.add_parser("synth", help="synthesize a dataset from a scene JSON")
    s.add_argument("spec")
    common(s, out_help="dataset directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("calibrate", help="fit the camera noise model from flats and darks")
    s.add_argument("manifest", nargs="?", help="capture manifest; omit to simulate one")
    s.add_argument("--sensor", help="sensor JSON used when simulating a capture")
    s.add_argument("--shape", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    s.add_argument("--capture-dir")
    common(s, out_help="noise parameter JSON")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("pretrain-extractor", help="warm-start the extractor on synthetic pairs")
    s.add_argument("--noise", required=True, help="calibrated noise parameter JSON")
    s.add_argument("--iso", type=float, nargs="+", default=[1600.0])
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--lr", type=float, default=1e-3)
    common(s, out_help="weights file")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="train one configuration")
    s.add_argument("config")
    s.add_argument("--mode", choices=("ldr", "hdr_rawnerf", "nrr"))
    s.add_argument("--iterations", type=int)
    s.add_argument("--resume", help="checkpoint to resume from")
    common(s, out_required=False, out_help="run directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a cloud on a dataset's test views")
    s.add_argument("--dataset", required=True)
    s.add_argument("--cloud", required=True)
    s.add_argument("--mode", default="hdr_rawnerf", choices=("ldr", "hdr_rawnerf", "nrr"))
    s.add_argument("--ldr-gain", type=float, default=2.5)
    common(s, out_required=False, out_help="metrics CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train hdr_rawnerf and nrr over training view counts")
    s.add_argument("config")
    s.add_argument("--views", type=int, nargs="+", default=[4, 8, 12, 16, 20])
    s.add_argument("--modes", nargs="+", default=["hdr_rawnerf", "nrr"])
    common(s, out_help="sweep directory")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("variance-study", help="Monte Carlo variance of the optimal target")
    s.add_argument("--config", help="study JSON (sigma, view_counts, trials, pixels)")
    common(s, out_help="CSV path")
    s.set_defaults(func=cmd_variance)

    s = sub.add_parser("render", help="render a cloud to images")
    s.add_argument("--cloud", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--dataset", help="render the dataset's test views")
    g.add_argument("--camera", nargs="+", help="camera JSON files")
    s.add_argument("--format", choices=("png", "pgm"), default="png")
    s.add_argument("--gain", type=float, default=2.5, help="tone-map gain")
    s.add_argument("--undistorted", action="store_true", help="skip the lens distortion")
    s.add_argument("--raw", action="store_true", help="also write normalized RAWF files")
    common(s, out_help="output directory")
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except RawSplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
