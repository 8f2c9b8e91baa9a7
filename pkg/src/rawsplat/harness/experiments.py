"""Experiment drivers: the view-count sweep and the reference pipeline."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..analysis import write_csv
from ..calibration import calibrate_manifest
from ..extractor import save_weights
from ..noise import save_noise_params
from .config import TrainConfig
from .pretrain import pretrain_extractor
from .scene import load_dataset, scene_synthesize
from .sensor import SensorSpec, synthetic_sensor, write_calibration_capture
from .train import train

SWEEP_COLUMNS = ("mode", "N", "iteration", "raw_psnr", "tonemapped_psnr", "gaussians",
                 "aniso_median", "aniso_p95")


def load_packaged_config(name: str) -> dict:
    """One of the JSON files shipped in ``rawsplat/configs``."""
    return json.loads(resources.files("rawsplat.configs").joinpath(name).read_text())


def experiment_views_sweep(base: TrainConfig, view_counts, out_dir, modes=("hdr_rawnerf", "nrr"),
                           dataset=None) -> list[dict]:
    """Train every mode on the first ``N`` views for each ``N``; one row per (mode, N).

    All runs share the dataset's held-out test views and the base config's
    iteration budget and seed. Writes ``sweep.csv`` into ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else load_dataset(base.dataset_path)
    rows = []
    for n in view_counts:
        for mode in modes:
            cfg = base.replace(mode=mode, n_views=int(n), views=None,
                               out=str((out_dir / f"{mode}_N{n}").resolve()))
            result = train(cfg, dataset)
            last = result.metrics[-1]
            rows.append({"mode": mode, "N": int(n), "iteration": last.iteration,
                         "raw_psnr": last.raw_psnr, "tonemapped_psnr": last.tonemapped_psnr,
                         "gaussians": last.gaussians, "aniso_median": last.aniso_median,
                         "aniso_p95": last.aniso_p95})
            write_csv(rows, out_dir / "sweep.csv", SWEEP_COLUMNS)
    return rows


def sweep_gaps(rows) -> dict:
    """``{N: raw PSNR(nrr) - raw PSNR(hdr_rawnerf)}`` from sweep rows."""
    by = {(r["mode"], int(r["N"])): float(r["raw_psnr"]) for r in rows}
    return {n: by[("nrr", n)] - by[("hdr_rawnerf", n)]
            for (mode, n) in by if mode == "nrr" and ("hdr_rawnerf", n) in by}


@dataclass
class ReferenceArtifacts:
    noise_params: Path
    noisy_dataset: Path
    clean_dataset: Path
    extractor_weights: Path
    pretrain_mse: tuple


def prepare_reference(work_dir, sensor: dict | None = None, scene: dict | None = None,
                      pretrain: dict | None = None, seed: int = 0) -> ReferenceArtifacts:
    """Sensor -> calibration capture -> calibrated model -> datasets -> pretrained extractor.

    The scenes are corrupted with noise drawn from the calibrated model, the
    same model the noise-robust loss uses.
    """
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    sensor = sensor if sensor is not None else load_packaged_config("sensor_reference.json")
    scene = scene if scene is not None else load_packaged_config("scene_reference.json")
    pretrain = pretrain if pretrain is not None else load_packaged_config("pretrain_reference.json")
    shape = (scene.get("height", 64), scene.get("width", 64))

    truth = synthetic_sensor(SensorSpec.from_dict(sensor), shape, seed)
    manifest = write_calibration_capture(truth, work / "capture", seed=seed,
                                         black_level=sensor.get("black_level", 64.0),
                                         white_level=sensor.get("white_level", 1023.0))
    calibrated = calibrate_manifest(manifest)
    noise_path = work / "noise_calibrated.json"
    save_noise_params(calibrated, noise_path)

    noisy_spec = dict(scene, seed=seed)
    noisy_spec["noise"] = dict(scene.get("noise", {}), params=str(noise_path.resolve()), apply=True)
    noisy_spec["noise"].pop("sensor", None)
    clean_spec = dict(noisy_spec, noise=dict(noisy_spec["noise"], apply=False))
    noisy = scene_synthesize(noisy_spec, work / "scene_noisy")
    clean = scene_synthesize(clean_spec, work / "scene_clean")

    net, _, before, after = pretrain_extractor(
        calibrated, pretrain.get("isos", [scene.get("sensor", {}).get("iso", 1600.0)]),
        steps=pretrain.get("steps", 3000), seed=pretrain.get("seed", seed),
        size=pretrain.get("size", 32), lr=pretrain.get("lr", 1e-3))
    weights = work / "extractor_pretrained.extw"
    save_weights(net, weights)
    return ReferenceArtifacts(noise_path, noisy, clean, weights, (before, after))


def reference_train_config(art: ReferenceArtifacts, dataset=None, **changes) -> TrainConfig:
    """The packaged reference training config bound to prepared artifacts."""
    doc = load_packaged_config("train_reference.json")
    doc["dataset"] = str(Path(dataset or art.noisy_dataset).resolve())
    doc["extractor"]["weights"] = str(Path(art.extractor_weights).resolve())
    for key, val in changes.items():
        if isinstance(val, dict) and isinstance(doc.get(key), dict):
            doc[key].update(val)
        else:
            doc[key] = val
    return TrainConfig.from_dict(doc)


def run_reference_experiment(work_dir, view_counts=(4, 8, 16), clean_views=None, seed=0,
                             art: ReferenceArtifacts | None = None, **changes):
    """Noisy view-count sweep plus the zero-noise control on the same scene.

    Returns ``(artifacts, noisy_rows, clean_rows)``. The control trains both
    modes on ``clean_views`` training views (default: the largest count).
    """
    work = Path(work_dir)
    art = art or prepare_reference(work, seed=seed)
    base = reference_train_config(art, seed=seed, **changes)
    noisy_rows = experiment_views_sweep(base, view_counts, work / "sweep_noisy")
    clean_n = clean_views or max(view_counts)
    clean_rows = experiment_views_sweep(
        base.replace(dataset=str(Path(art.clean_dataset).resolve())), [clean_n],
        work / "control_clean")
    return art, noisy_rows, clean_rows
