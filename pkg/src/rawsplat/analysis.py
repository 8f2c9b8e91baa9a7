"""Monte Carlo study of the optimal-target variance and training snapshots."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .raw import psnr, save_pgm, save_png, tone_map

VARIANCE_COLUMNS = ("N", "var_empirical", "var_sigma2_over_N", "var_sigma2_over_N2")


@dataclass(frozen=True)
class VarianceStudyConfig:
    sigma: float = 1.0
    view_counts: tuple = (2, 4, 8, 16, 32)
    trials: int = 100
    pixels: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValidationError("sigma must be non-negative")
        if self.trials < 2 or self.pixels < 2:
            raise ValidationError("trials and pixels must be at least 2")
        if not self.view_counts or min(self.view_counts) < 1:
            raise ValidationError("view counts must be positive")


def optimal_target_variance(cfg: VarianceStudyConfig) -> list[dict]:
    """Spatial variance of the per-pixel mean of ``N`` noisy observations.

    The L2-optimal render for ``N`` views of a pixel is the mean of the
    observations, so its deviation from the clean value is the mean of the
    ``N`` noise draws. Each row reports the trial-averaged empirical
    variance next to ``sigma^2 / N`` and the ``sigma^2 / N^2`` variant.
    """
    rows = []
    s2 = cfg.sigma**2
    for n in cfg.view_counts:
        # one independent stream per N so adding a view count leaves the others unchanged
        rng = np.random.default_rng([cfg.seed, int(n)])
        acc = 0.0
        for _ in range(cfg.trials):
            mean = rng.standard_normal((n, cfg.pixels)).mean(axis=0) * cfg.sigma
            acc += float(np.var(mean, ddof=1))
        rows.append({
            "N": int(n),
            "var_empirical": acc / cfg.trials,
            "var_sigma2_over_N": s2 / n,
            "var_sigma2_over_N2": s2 / n**2,
        })
    return rows


def loglog_slope(rows) -> float:
    """OLS slope of ln(var_empirical) against ln(N)."""
    n = np.array([r["N"] for r in rows], dtype=np.float64)
    v = np.array([r["var_empirical"] for r in rows], dtype=np.float64)
    if np.any(v <= 0):
        raise ValidationError("log-log fit needs positive variances")
    return float(np.polyfit(np.log(n), np.log(v), 1)[0])


def write_csv(rows, path, columns=None) -> None:
    rows = list(rows)
    columns = list(columns or (rows[0].keys() if rows else VARIANCE_COLUMNS))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- snapshots during training -----------------------------------------------

SNAPSHOT_COLUMNS = ("iteration", "view", "raw_psnr", "tonemapped_psnr", "gaussians",
                    "aniso_median", "aniso_p95")


class SnapshotExporter:
    """Training hook that dumps test renders at selected iterations.

    ``render_view(cloud, i)`` must return the distorted render of test view
    ``i`` in normalized raw units; ``clean`` holds the matching clean planes.
    Each listed iteration writes one tone-mapped image per view plus one CSV
    row per view into ``out_dir``.
    """

    def __init__(self, out_dir, iterations, render_view, clean, gain=1.0, fmt="pgm"):
        if fmt not in ("pgm", "png"):
            raise ValidationError(f"unknown image format {fmt!r}")
        self.out_dir = Path(out_dir)
        self.iterations = frozenset(int(i) for i in iterations)
        self.render_view = render_view
        self.clean = list(clean)
        self.gain = gain
        self.fmt = fmt
        self.rows: list[dict] = []

    @property
    def csv_path(self) -> Path:
        return self.out_dir / "snapshots.csv"

    def __call__(self, iteration: int, cloud) -> None:
        if iteration not in self.iterations:
            return
        from .splat.gaussians import anisotropy_stats

        self.out_dir.mkdir(parents=True, exist_ok=True)
        med, p95, m = anisotropy_stats(cloud)
        save = save_pgm if self.fmt == "pgm" else save_png
        for i, clean in enumerate(self.clean):
            pred = self.render_view(cloud, i)
            tm_pred = tone_map(pred, self.gain)
            save(tm_pred, self.out_dir / f"iter{iteration:06d}_view{i:02d}.{self.fmt}")
            self.rows.append({
                "iteration": iteration,
                "view": i,
                "raw_psnr": psnr(pred, clean),
                "tonemapped_psnr": psnr(tm_pred, tone_map(clean, self.gain)),
                "gaussians": m,
                "aniso_median": med,
                "aniso_p95": p95,
            })
        write_csv(self.rows, self.csv_path, SNAPSHOT_COLUMNS)
