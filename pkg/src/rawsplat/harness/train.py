"""Training loop for the three modes, evaluation and checkpointing."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..analysis import SnapshotExporter
from ..distortion import apply_map, apply_map_backward
from ..errors import TrainingError, ValidationError
from ..extractor import (ExtractorNet, extractor_optimizer, extractor_step, load_weights,
                         save_weights)
from ..losses import loss_3dgs, loss_nrr, loss_rawnerf
from ..optim import AdamState, ExpDecayLR, adam_step, constant
from ..raw import psnr, tone_map
from ..splat.density import densify_and_prune
from ..splat.gaussians import (PARAM_NAMES, GaussianCloud, anisotropy_stats, inverse_softplus,
                               logit, quat_to_rotmat, save_cloud)
from ..splat.render import render, render_backward
from .config import TrainConfig
from .scene import Dataset, load_dataset

METRIC_COLUMNS = ("iteration", "raw_psnr", "tonemapped_psnr", "gaussians", "aniso_median",
                  "aniso_p95", "loss_total", "loss_recon", "loss_nll", "loss_cov")


@dataclass
class MetricsRow:
    iteration: int
    raw_psnr: float
    tonemapped_psnr: float
    gaussians: int
    aniso_median: float
    aniso_p95: float
    loss_total: float = math.nan
    loss_recon: float = math.nan
    loss_nll: float = math.nan
    loss_cov: float = math.nan
    wall_ms_per_render: float = math.nan

    def csv_row(self) -> dict:
        """Deterministic columns only; render timing is kept out of the metrics file."""
        return {k: v for k, v in asdict(self).items() if k in METRIC_COLUMNS}


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.csv_row().items()})


def inverse_tone_map(y, gain):
    return np.clip(y, 0.0, 1.0) ** 2.2 / gain


# -- evaluation ---------------------------------------------------------------


def render_view(cloud, view, mode="hdr_rawnerf", ldr_gain=4.0):
    """Render in the distorted raw geometry, in normalized linear units."""
    out = apply_map(render(cloud, view.camera).plane, view.dmap)
    return inverse_tone_map(out, ldr_gain) if mode == "ldr" else out


def evaluate(cloud: GaussianCloud, views, mode="hdr_rawnerf", ldr_gain=4.0, display_gain=None,
             iteration=0) -> MetricsRow:
    """Mean per-view raw and tone-mapped PSNR against the clean frames.

    PSNR uses the distortion-valid pixels of each view. ``display_gain``
    (default ``ldr_gain``) sets the tone curve used for the display metric.
    """
    if not views:
        raise ValidationError("evaluation needs at least one test view")
    display_gain = ldr_gain if display_gain is None else display_gain
    raw_p, tm_p, wall = [], [], []
    for v in views:
        t0 = time.perf_counter()
        pred = render_view(cloud, v, mode, ldr_gain)
        wall.append(time.perf_counter() - t0)
        m = v.dmap.mask
        raw_p.append(psnr(pred[m], v.clean[m]))
        tm_p.append(psnr(tone_map(pred[m], display_gain), tone_map(v.clean[m], display_gain)))
    med, p95, count = anisotropy_stats(cloud)
    return MetricsRow(iteration, float(np.mean(raw_p)), float(np.mean(tm_p)), count, med, p95,
                      wall_ms_per_render=1000.0 * float(np.mean(wall)))


# -- initialization -----------------------------------------------------------


def initial_cloud(ds: Dataset, cfg: TrainConfig, rng) -> GaussianCloud:
    """Points sampled on the ground-truth gaussians, isotropic kNN scales.

    Every ground-truth gaussian receives the same share of points. The
    ground truth only supplies positions, standing in for a structure
    from motion point cloud; colors start at the mean training intensity.
    """
    gt = ds.gt_cloud()
    s = gt.scales
    idx = np.arange(cfg.init.count) % len(gt)
    local = rng.standard_normal((cfg.init.count, 3)) * s[idx]
    rotm = quat_to_rotmat(gt.quats[idx])
    mu = gt.params["mu"][idx] + np.einsum("nij,nj->ni", rotm, local)
    mu += rng.standard_normal(mu.shape) * cfg.init.position_jitter
    d, _ = cKDTree(mu).query(mu, k=4)
    scale = np.sqrt(np.maximum(np.mean(d[:, 1:] ** 2, axis=1), 1e-7))
    views = [ds.train[i] for i in cfg.view_indices(len(ds.train))]
    target = np.mean([np.mean(v.noisy) for v in views])
    if cfg.mode == "ldr":
        target = float(np.mean([np.mean(tone_map(v.noisy, cfg.ldr_gain)) for v in views]))
    n = cfg.init.count
    return GaussianCloud(
        mu,
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.log(np.repeat(scale[:, None], 3, axis=1)),
        np.full((n, 1), float(inverse_softplus(max(target, 1e-3)))),
        np.full(n, float(logit(cfg.init.opacity))),
    )


# -- trainer ----------------------------------------------------------------------


def _rng_state(rng):
    return rng.bit_generator.state


def _set_rng_state(rng, state):
    rng.bit_generator.state = state


@dataclass
class TrainResult:
    cloud: GaussianCloud
    net: ExtractorNet | None
    metrics: list
    out_dir: Path | None


class Trainer:
    """One training session; ``run`` advances it, ``save_checkpoint`` freezes it."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset | None = None):
        self.cfg = cfg
        self.ds = dataset if dataset is not None else load_dataset(cfg.dataset_path)
        self.views = [self.ds.train[i] for i in cfg.view_indices(len(self.ds.train))]
        self.params = self.ds.iso_params
        self.iteration = 0
        self.view_rng = np.random.default_rng([cfg.seed, 1])
        self.density_rng = np.random.default_rng([cfg.seed, 2])
        self.cloud = initial_cloud(self.ds, cfg, np.random.default_rng([cfg.seed, 3]))
        ext = self.ds.extent
        lr = cfg.lr
        self.cloud.optimizer = AdamState(schedules={
            "mu": ExpDecayLR(lr.mu_init * ext, lr.mu_final * ext, cfg.iterations),
            "rot": constant(lr.rot),
            "log_scale": constant(lr.log_scale),
            "color_raw": constant(lr.color_raw),
            "opacity": constant(lr.opacity),
        })
        self.net = self.net_opt = None
        if cfg.mode == "nrr":
            ec = cfg.extractor
            self.net = load_weights(cfg.resolve(ec.weights)) if ec.weights else ExtractorNet(ec.seed)
            self.net_opt = extractor_optimizer(ec.lr_values, ec.milestones)
        self.metrics: list[MetricsRow] = []
        self.timing: list[float] = []
        self._reset_acc()
        self.out_dir = Path(cfg.resolve(cfg.out)) if cfg.out else None
        self.hooks = []
        if cfg.snapshot_iterations and self.out_dir is not None:
            self.hooks.append(SnapshotExporter(
                self.out_dir / "snapshots", cfg.snapshot_iterations,
                lambda cloud, i: render_view(cloud, self.ds.test[i], cfg.mode, cfg.ldr_gain),
                [v.clean for v in self.ds.test], gain=cfg.ldr_gain))

    def _reset_acc(self):
        self.acc = {"total": 0.0, "recon": 0.0, "nll": 0.0, "cov": 0.0, "n": 0}

    # -- one iteration ------------------------------------------------------

    def loss_and_grad(self, view, plane):
        """Mode loss for one view. Returns (terms, grad_render, extractor update or None)."""
        cfg = self.cfg
        mask = view.dmap.mask
        if cfg.mode == "hdr_rawnerf":
            dist = apply_map(plane, view.dmap)
            loss, g, _ = loss_rawnerf(dist, view.noisy, cfg.loss.epsilon, mask)
            return (loss, loss, 0.0, 0.0), apply_map_backward(g, view.dmap), None
        if cfg.mode == "ldr":
            dist = apply_map(plane, view.dmap)
            target = np.where(mask, tone_map(view.noisy, cfg.ldr_gain), 0.0)
            loss, g = loss_3dgs(dist, target, cfg.loss.lambda_dssim)
            g = np.where(mask, g, 0.0)
            return (loss, loss, 0.0, 0.0), apply_map_backward(g, view.dmap), None
        x = view.noisy - self.params.n_fp
        n_hat = self.net(x) + self.params.n_fp
        rep = loss_nrr(plane, view.noisy, n_hat, self.params, cfg.loss, view.dmap, cfg.routing)
        update = None
        if self.iteration > cfg.extractor.warmup:
            update = (x, rep.grad_n_hat)
        return (rep.total, rep.recon, rep.nll, rep.cov), rep.grad_render, update

    def step(self):
        self.iteration += 1
        cfg = self.cfg
        view = self.views[int(self.view_rng.integers(len(self.views)))]
        res = render(self.cloud, view.camera)
        terms, g_render, update = self.loss_and_grad(view, res.plane)
        if not all(math.isfinite(t) for t in terms):
            self._diverged(f"non-finite loss {terms} at iteration {self.iteration}")
        grads = render_backward(self.cloud, res.trace, g_render)
        try:
            adam_step(self.cloud.params, grads, self.cloud.optimizer)
            self.cloud.touch()
            if update is not None:
                x, g_n = update
                g_net, _ = self.net.backward(x, g_n)
                extractor_step(self.net, g_net, self.net_opt)
        except TrainingError as exc:
            self._diverged(str(exc))
        for key, val in zip(("total", "recon", "nll", "cov"), terms):
            self.acc[key] += val
        self.acc["n"] += 1

        d = cfg.densify
        if self.iteration > d.start and self.iteration <= d.stop and self.iteration % d.interval == 0:
            densify_and_prune(self.cloud, d.grad_threshold, d.percent_dense * self.ds.extent,
                              d.opacity_prune, self.density_rng, d.max_count)

    def _diverged(self, message):
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / "diverged.npz"
            self.save_checkpoint(path)
            message += f"; state saved to {path}"
        raise TrainingError(message)

    # -- evaluation and bookkeeping ---------------------------------------

    def evaluate(self) -> MetricsRow:
        row = evaluate(self.cloud, self.ds.test, self.cfg.mode, self.cfg.ldr_gain,
                       iteration=self.iteration)
        n = max(self.acc["n"], 1)
        row.loss_total = self.acc["total"] / n
        row.loss_recon = self.acc["recon"] / n
        row.loss_nll = self.acc["nll"] / n
        row.loss_cov = self.acc["cov"] / n
        self._reset_acc()
        return row

    def run(self, until: int | None = None) -> TrainResult:
        cfg = self.cfg
        stop = cfg.iterations if until is None else min(until, cfg.iterations)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            cfg.save(self.out_dir / "config.json")
        while self.iteration < stop:
            self.step()
            it = self.iteration
            for hook in self.hooks:
                hook(it, self.cloud)
            if it % cfg.eval_interval == 0 or it == cfg.iterations:
                row = self.evaluate()
                self.metrics.append(row)
                self.timing.append(row.wall_ms_per_render)
                if self.out_dir is not None:
                    write_metrics(self.metrics, self.out_dir / "metrics.csv")
                    self._write_timing()
            if self.out_dir is not None and (it % cfg.checkpoint_interval == 0 or it == cfg.iterations):
                self.save_checkpoint(self.out_dir / "checkpoint.npz")
        if self.out_dir is not None and self.iteration == cfg.iterations:
            save_cloud(self.cloud, self.out_dir / "cloud.gcld")
            if self.net is not None:
                save_weights(self.net, self.out_dir / "extractor.extw")
        return TrainResult(self.cloud, self.net, self.metrics, self.out_dir)

    def _write_timing(self):
        with open(self.out_dir / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "wall_ms_per_render"])
            for row in self.metrics:
                w.writerow([row.iteration, f"{row.wall_ms_per_render:.3f}"])

    # -- checkpoints ----------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        """Full float64 state: cloud, statistics, optimizer moments, RNGs, metrics."""
        arrays = {}
        c = self.cloud
        for name in PARAM_NAMES:
            arrays[f"cloud/{name}"] = c.params[name]
            arrays[f"cloud_m/{name}"] = c.optimizer.m.get(name, np.zeros(0))
            arrays[f"cloud_v/{name}"] = c.optimizer.v.get(name, np.zeros(0))
        arrays["cloud/grad_accum"] = c.grad_accum
        arrays["cloud/grad_count"] = c.grad_count
        arrays["cloud/mu_grad_accum"] = c.mu_grad_accum
        if self.net is not None:
            for name, val in self.net.params.items():
                arrays[f"net/{name}"] = val
                arrays[f"net_m/{name}"] = self.net_opt.m.get(name, np.zeros(0))
                arrays[f"net_v/{name}"] = self.net_opt.v.get(name, np.zeros(0))
        meta = {
            "iteration": self.iteration,
            "cloud_step": c.optimizer.step,
            "net_step": self.net_opt.step if self.net_opt is not None else 0,
            "view_rng": _rng_state(self.view_rng),
            "density_rng": _rng_state(self.density_rng),
            "acc": self.acc,
            "metrics": [asdict(r) for r in self.metrics],
            "config": self.cfg.to_dict(),
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def from_checkpoint(cls, cfg: TrainConfig, path, dataset: Dataset | None = None) -> "Trainer":
        tr = cls(cfg, dataset)
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            params = [z[f"cloud/{n}"] for n in PARAM_NAMES]
            cloud = GaussianCloud(*params)
            cloud.grad_accum = z["cloud/grad_accum"].copy()
            cloud.grad_count = z["cloud/grad_count"].copy()
            cloud.mu_grad_accum = z["cloud/mu_grad_accum"].copy()
            opt = tr.cloud.optimizer
            opt.step = meta["cloud_step"]
            opt.m = {n: z[f"cloud_m/{n}"].copy() for n in PARAM_NAMES if z[f"cloud_m/{n}"].size}
            opt.v = {n: z[f"cloud_v/{n}"].copy() for n in PARAM_NAMES if z[f"cloud_v/{n}"].size}
            cloud.optimizer = opt
            tr.cloud = cloud
            if tr.net is not None:
                for name in tr.net.params:
                    tr.net.params[name] = z[f"net/{name}"].copy()
                    m = z[f"net_m/{name}"]
                    if m.size:
                        tr.net_opt.m[name] = m.copy()
                        tr.net_opt.v[name] = z[f"net_v/{name}"].copy()
                tr.net_opt.step = meta["net_step"]
                tr.net.touch()
        tr.iteration = meta["iteration"]
        _set_rng_state(tr.view_rng, meta["view_rng"])
        _set_rng_state(tr.density_rng, meta["density_rng"])
        tr.acc = meta["acc"]
        names = {f.name for f in fields(MetricsRow)}
        tr.metrics = [MetricsRow(**{k: v for k, v in r.items() if k in names}) for r in meta["metrics"]]
        return tr


def train(cfg: TrainConfig, dataset: Dataset | None = None, resume=None) -> TrainResult:
    """Run a configured session to completion, optionally from a checkpoint."""
    cfg.validate_files()
    tr = Trainer.from_checkpoint(cfg, resume, dataset) if resume else Trainer(cfg, dataset)
    return tr.run()
