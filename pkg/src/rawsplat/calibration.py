"""Noise-model calibration from flat-field and dark frame stacks.

Three steps, repeated per ISO and then fitted across ISO:

1. flat stacks -> per-block (mean, variance) pairs -> gain ``k`` by OLS,
   ignoring blocks brighter than a quarter of saturation (clipping);
2. dark stack -> fixed pattern (temporal mean) and read sigma (pooled
   residual std);
3. the per-ISO estimates -> the camera-level lines of :mod:`rawsplat.noise`.

Variances are unbiased (``ddof=1``) everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, InsufficientDataError, RankDeficientError, ValidationError
from .noise import IsoNoiseParams, NoiseModelParams, sample_noise
from .raw import RawImage, load_raw, normalize


@dataclass(frozen=True)
class FrameStack:
    frames: tuple
    kind: str = "flat"

    def __post_init__(self):
        frames = tuple(self.frames)
        if self.kind not in ("flat", "dark"):
            raise ValidationError(f"unknown stack kind {self.kind!r}")
        if len(frames) < 2:
            raise InsufficientDataError(f"a frame stack needs >= 2 frames, got {len(frames)}")
        first = frames[0]
        for fr in frames[1:]:
            if fr.data.shape != first.data.shape:
                raise ValidationError("frames in a stack must share dimensions")
            meta = (fr.black_level, fr.white_level, fr.iso, fr.exposure_s)
            if meta != (first.black_level, first.white_level, first.iso, first.exposure_s):
                raise ValidationError("frames in a stack must share level/ISO/exposure metadata")
        object.__setattr__(self, "frames", frames)

    @property
    def iso(self):
        return self.frames[0].iso

    @property
    def shape(self):
        return self.frames[0].data.shape

    def normalized(self) -> np.ndarray:
        """Stack as a ``(frames, height, width)`` array in normalized units."""
        return np.stack([normalize(f) for f in self.frames])


@dataclass(frozen=True)
class MeanVarPoint:
    mean: float
    variance: float
    block_id: int = 0


def block_statistics(stack: FrameStack, block_grid) -> list[MeanVarPoint]:
    """Mean and unbiased variance of every block, pooled over pixels and frames.

    Pixels left over when the grid does not divide the frame are dropped
    from the bottom/right edges.
    """
    rows, cols = block_grid
    h, w = stack.shape
    if rows < 1 or cols < 1 or rows > h or cols > w:
        raise ValidationError(f"block grid {rows}x{cols} does not fit a {h}x{w} frame")
    bh, bw = h // rows, w // cols
    vals = stack.normalized()[:, : rows * bh, : cols * bw]
    # (frames, rows, bh, cols, bw) -> (rows, cols, frames*bh*bw)
    blocks = vals.reshape(len(stack.frames), rows, bh, cols, bw).transpose(1, 3, 0, 2, 4)
    blocks = blocks.reshape(rows, cols, -1)
    means = blocks.mean(axis=-1)
    variances = blocks.var(axis=-1, ddof=1)
    return [
        MeanVarPoint(float(means[r, c]), float(variances[r, c]), r * cols + c)
        for r in range(rows)
        for c in range(cols)
    ]


def _ols(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        raise InsufficientDataError("need at least 2 points for a line fit")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 1e-300 or np.all(x == x[0]):
        raise RankDeficientError("all abscissae identical; slope undefined")
    slope = float(xc @ (y - y.mean())) / sxx
    return slope, float(y.mean() - slope * x.mean())


def fit_gain(points: Sequence[MeanVarPoint], saturation: float = 1.0):
    """OLS of variance on mean; returns ``(k, intercept)``.

    Points whose mean exceeds ``saturation / 4`` are excluded first.
    Points from several exposures are pooled into one regression.
    """
    kept = [p for p in points if p.mean <= saturation / 4.0]
    if len(kept) < 2:
        raise InsufficientDataError(f"{len(kept)} points survive the saturation/4 cut; need 2")
    return _ols([p.mean for p in kept], [p.variance for p in kept])


def fit_fixed_pattern(dark: FrameStack) -> np.ndarray:
    """Per-pixel temporal mean of the dark frames (normalized units)."""
    if dark.kind != "dark":
        raise ValidationError("fixed pattern needs a dark stack")
    return dark.normalized().mean(axis=0)


def fit_read_sigma(dark: FrameStack, n_fp) -> float:
    """Std of all ``frame - n_fp`` residuals pooled over pixels and frames."""
    n_fp = np.asarray(n_fp, dtype=np.float64)
    if n_fp.shape != dark.shape:
        raise ValidationError(f"n_fp shape {n_fp.shape} != frame shape {dark.shape}")
    resid = dark.normalized() - n_fp
    return float(np.sqrt(resid.var(ddof=1)))


@dataclass(frozen=True)
class IsoCalibration:
    iso: float
    k: float
    sigma_read: float
    n_fp: np.ndarray
    gain_intercept: float = 0.0
    points_used: int = 0
    points_total: int = 0


def calibrate_iso(flats: Sequence[FrameStack], dark: FrameStack, block_grid, saturation=1.0):
    """Steps 1 and 2 for one ISO: pool the flat stacks' block points, fit k."""
    points = [p for st in flats for p in block_statistics(st, block_grid)]
    k, intercept = fit_gain(points, saturation)
    n_fp = fit_fixed_pattern(dark)
    used = sum(p.mean <= saturation / 4.0 for p in points)
    return IsoCalibration(
        dark.iso, k, fit_read_sigma(dark, n_fp), n_fp, intercept, used, len(points)
    )


def fit_iso_model(samples) -> NoiseModelParams:
    """Fit the camera-level lines from per-ISO ``(iso, k, sigma_read, n_fp)`` tuples."""
    samples = [
        (s.iso, s.k, s.sigma_read, s.n_fp) if isinstance(s, IsoCalibration) else tuple(s)
        for s in samples
    ]
    if len(samples) < 2:
        raise InsufficientDataError("need samples at >= 2 ISO values")
    isos = np.array([s[0] for s in samples], dtype=np.float64)
    ks = np.array([s[1] for s in samples], dtype=np.float64)
    sig = np.array([s[2] for s in samples], dtype=np.float64)
    if np.unique(isos).size < 2:
        raise RankDeficientError("need >= 2 distinct ISO values")
    if np.any(ks <= 0) or np.any(sig <= 0):
        raise DomainError("k and sigma_read must be positive for the log-log fit")

    a_k, b_k = _ols(isos, ks)
    a_read, b_read = _ols(np.log(ks), np.log(sig))

    maps = np.stack([np.asarray(s[3], dtype=np.float64) for s in samples])
    xc = isos - isos.mean()
    fp_k = np.tensordot(xc, maps - maps.mean(axis=0), axes=1) / float(xc @ xc)
    fp_b = maps.mean(axis=0) - fp_k * isos.mean()
    return NoiseModelParams(
        a_k, b_k, a_read, b_read, fp_k, fp_b, float(isos.min()), float(isos.max())
    )


# -- synthetic capture -------------------------------------------------------


def simulate_stack(
    level,
    iso_params: IsoNoiseParams,
    n_frames: int,
    seed: int,
    kind: str = "flat",
    black_level: float = 0.0,
    white_level: float = 1.0,
    exposure_s: float = 1.0,
    mode: str = "poisson",
) -> FrameStack:
    """Render a synthetic stack: ``level`` (normalized) + model noise, clipped to white.

    ``level`` is a clean normalized image (a chart for flats, zeros for darks).
    Frame ``i`` draws noise from a key derived from ``(seed, i)``.
    """
    level = np.asarray(level, dtype=np.float64)
    frames = []
    for i in range(n_frames):
        frame_seed = int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0])
        noisy = level + sample_noise(level, iso_params, frame_seed, mode)
        noisy = np.minimum(noisy, 1.0)
        frames.append(
            RawImage.from_normalized(
                noisy, black_level, white_level, iso_params.iso, exposure_s
            )
        )
    return FrameStack(tuple(frames), kind)


def chart(shape, block_grid, levels) -> np.ndarray:
    """Piecewise-constant test chart; ``levels`` is indexed block-row-major."""
    rows, cols = block_grid
    h, w = shape
    bh, bw = h // rows, w // cols
    img = np.zeros(shape)
    levels = np.asarray(levels, dtype=np.float64).reshape(rows, cols)
    for r in range(rows):
        for c in range(cols):
            img[r * bh : (r + 1) * bh, c * bw : (c + 1) * bw] = levels[r, c]
    return img


# -- manifest driven entry point --------------------------------------------


def calibrate_manifest(manifest_path) -> NoiseModelParams:
    """Run the full protocol from a JSON manifest.

    Manifest layout::

        {"block_grid": [4, 6], "saturation": 1.0,
         "stacks": [{"iso": 100, "exposure_s": 0.01, "kind": "flat",
                     "frames": ["f000.rawf", ...]}, ...]}

    Frame paths are relative to the manifest. ``saturation`` is in
    normalized units.
    """
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    grid = tuple(doc.get("block_grid", (4, 6)))
    saturation = float(doc.get("saturation", 1.0))
    by_iso: dict = {}
    for entry in doc["stacks"]:
        frames = tuple(load_raw(manifest_path.parent / p) for p in entry["frames"])
        stack = FrameStack(frames, entry["kind"])
        by_iso.setdefault(float(entry["iso"]), {"flat": [], "dark": []})[entry["kind"]].append(stack)
    results = []
    for iso in sorted(by_iso):
        group = by_iso[iso]
        if not group["flat"] or len(group["dark"]) != 1:
            raise ValidationError(f"ISO {iso}: need >= 1 flat stack and exactly 1 dark stack")
        results.append(calibrate_iso(group["flat"], group["dark"][0], grid, saturation))
    model = fit_iso_model(results)
    meta = {
        "per_iso": [
            {"iso": r.iso, "k": r.k, "sigma_read": r.sigma_read,
             "points_used": r.points_used, "points_total": r.points_total}
            for r in results
        ]
    }
    return NoiseModelParams(
        model.a_k, model.b_k, model.a_read, model.b_read, model.n_fp_k, model.n_fp_b,
        model.iso_min, model.iso_max, meta,
    )

