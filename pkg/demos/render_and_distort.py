"""Synthesize a small scene and write clean, noisy and undistorted renders as PNG.

    python3 demos/render_and_distort.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from rawsplat.harness.experiments import load_packaged_config
from rawsplat.harness.scene import load_dataset, scene_synthesize
from rawsplat.raw import psnr, save_png, tone_map
from rawsplat.splat import render


def main(out):
    out = Path(out)
    spec = load_packaged_config("scene_reference.json")
    spec["noise"] = {"mode": "poisson", "apply": True, "sensor": {}}
    ds = load_dataset(scene_synthesize(spec, out / "scene"))
    gt = ds.gt_cloud()
    print(f"{len(gt)} ground-truth gaussians, {len(ds.train)} train / {len(ds.test)} test views")
    for v in ds.train[:3]:
        undist = render(gt, v.camera).plane
        save_png(tone_map(np.maximum(undist, 0), 2.5), out / f"{v.name}_undistorted.png")
        save_png(tone_map(v.clean, 2.5), out / f"{v.name}_clean.png")
        save_png(tone_map(np.maximum(v.noisy, 0), 2.5), out / f"{v.name}_noisy.png")
        m = v.dmap.mask
        print(f"{v.name}: noisy vs clean {psnr(v.noisy[m], v.clean[m]):.2f} dB, "
              f"{(~m).sum()} pixels outside the distortion-valid region")
    print(f"images written to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp())
