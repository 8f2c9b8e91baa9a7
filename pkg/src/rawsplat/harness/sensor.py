"""Synthetic sensor: ground-truth noise lines and a calibration capture on disk."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..calibration import chart, simulate_stack
from ..noise import NoiseModelParams, params_at_iso
from ..raw import save_raw


@dataclass(frozen=True)
class SensorSpec:
    """Ground-truth camera noise lines in normalized units.

    Defaults give k = 4e-3 and sigma_read close to 4e-3 at ISO 1600. The
    fixed pattern is a column stripe field plus per-pixel jitter whose
    spread grows with ISO.
    """

    a_k: float = 2.5e-6
    b_k: float = 0.0
    a_read: float = 0.8
    b_read: float = -1.104
    fp_k_std: float = 1.0e-6
    fp_b_std: float = 4.0e-4
    column_fraction: float = 0.5
    iso_min: float = 100.0
    iso_max: float = 6400.0
    black_level: float = 64.0
    white_level: float = 1023.0

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)

    def to_dict(self):
        return asdict(self)


def _pattern(rng, shape, std, column_fraction):
    cols = rng.standard_normal((1, shape[1])) * np.ones((shape[0], 1))
    pix = rng.standard_normal(shape)
    return std * (np.sqrt(column_fraction) * cols + np.sqrt(1 - column_fraction) * pix)


def synthetic_sensor(spec: SensorSpec, shape, seed: int = 0) -> NoiseModelParams:
    rng = np.random.default_rng(seed)
    fp_k = _pattern(rng, shape, spec.fp_k_std, spec.column_fraction)
    fp_b = _pattern(rng, shape, spec.fp_b_std, spec.column_fraction)
    return NoiseModelParams(spec.a_k, spec.b_k, spec.a_read, spec.b_read, fp_k, fp_b,
                            spec.iso_min, spec.iso_max, {"source": "synthetic", **spec.to_dict()})


def write_calibration_capture(
    model: NoiseModelParams,
    out_dir,
    isos=(400, 800, 1600, 3200),
    n_flats=25,
    exposures=(0.25, 0.5, 1.0),
    n_darks=100,
    block_grid=(4, 6),
    chart_levels=None,
    black_level=64.0,
    white_level=1023.0,
    seed=0,
) -> Path:
    """Simulate flats and darks for every ISO and write RAWF files plus a manifest.

    ``chart_levels`` (normalized, one per block) default to a ramp whose
    brightest blocks clip at the longest exposure, so the quarter-saturation
    exclusion has something to remove.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, cols = block_grid
    if chart_levels is None:
        chart_levels = np.geomspace(0.01, 1.2, rows * cols)
    stacks = []
    stream = 0
    for iso in isos:
        p = params_at_iso(model, iso)
        jobs = [("flat", e, chart(model.shape, block_grid, np.asarray(chart_levels) * e), n_flats)
                for e in exposures]
        jobs.append(("dark", 1.0, np.zeros(model.shape), n_darks))
        for kind, exposure, level, count in jobs:
            st = simulate_stack(level, p, count, seed * 1000 + stream, kind,
                                black_level, white_level, exposure)
            stream += 1
            names = []
            for i, frame in enumerate(st.frames):
                name = f"iso{int(iso)}_{kind}_e{exposure:g}_{i:03d}.rawf"
                save_raw(frame, out_dir / name)
                names.append(name)
            stacks.append({"iso": iso, "exposure_s": exposure, "kind": kind, "frames": names})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"block_grid": list(block_grid), "saturation": 1.0,
                                    "stacks": stacks}, indent=1))
    return manifest
