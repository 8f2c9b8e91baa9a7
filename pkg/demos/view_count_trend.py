"""hdr_rawnerf vs nrr as the number of training views grows.

By default this runs a quick version on a small scene (under a minute).
``--reference`` runs the full reference pipeline used by the acceptance
suite: calibration, synthesis, extractor pretraining and the N = 4, 8, 16
sweep plus the clean control (roughly 20 minutes on one core).

    python3 demos/view_count_trend.py [--reference] [work_dir]
"""

import argparse
import tempfile
from pathlib import Path

from rawsplat.harness.experiments import (experiment_views_sweep, load_packaged_config,
                                          prepare_reference, reference_train_config,
                                          run_reference_experiment, sweep_gaps)


def show(rows, title):
    print(title)
    for r in rows:
        print(f"  {r['mode']:>12} N={r['N']:<3} raw PSNR {r['raw_psnr']:6.2f} dB  "
              f"M={r['gaussians']:<5} anisotropy median {r['aniso_median']:.2f}")
    for n, gap in sweep_gaps(rows).items():
        print(f"  gap nrr - hdr_rawnerf at N={n}: {gap:+.2f} dB")


def quick(work):
    scene = load_packaged_config("scene_reference.json")
    scene.update(width=32, height=32)
    scene["objects"] = dict(scene["objects"], count=8)
    scene["backdrop"] = dict(scene["backdrop"], columns=4, rows=2)
    art = prepare_reference(work, scene=scene, pretrain={"steps": 600, "size": 32})
    before, after = art.pretrain_mse
    print(f"extractor pretraining: held-out noise MSE {before:.3g} -> {after:.3g}")
    cfg = reference_train_config(art, iterations=1500, eval_interval=500,
                                 densify={"stop": 1500}, init={"count": 120})
    show(experiment_views_sweep(cfg, [4, 16], Path(work) / "sweep"), "quick sweep")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reference", action="store_true")
    ap.add_argument("work", nargs="?", default=None)
    args = ap.parse_args()
    work = Path(args.work or tempfile.mkdtemp())
    if args.reference:
        _, noisy, clean = run_reference_experiment(work)
        show(noisy, "calibrated-noise sweep")
        show(clean, "zero-noise control")
    else:
        quick(work)


if __name__ == "__main__":
    main()
