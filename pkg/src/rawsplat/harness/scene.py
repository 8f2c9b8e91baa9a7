"""Synthetic scene generation: ground-truth cloud, camera arc, clean and noisy raws.

A scene spec is a JSON document; every key has a default::

    {"width": 64, "height": 64, "seed": 0,
     "cameras": {"train": 24, "test": 6, "radius": 3.0, "elevation": 0.5,
                 "arc_deg": 60, "fov_deg": 45},
     "distortion": {"k1": 0.04, ...},
     "objects": {"count": 16, "extent": 1.0, "scale": [0.04, 0.25],
                 "color": [0.05, 0.8], "opacity": [0.6, 0.95]},
     "backdrop": {"radius": 5.0, "columns": 8, "rows": 4, "arc_deg": 160,
                  "height": 8.0, "color": [0.03, 0.12]},
     "sensor": {"iso": 1600, "exposure_s": 0.01, "black_level": 64, "white_level": 1023},
     "noise": {"params": "noise.json", "mode": "poisson", "apply": true}}

``noise.params`` is resolved relative to the scene JSON file. Instead of a file,
``noise.sensor`` may hold an inline :class:`SensorSpec` dictionary.
"""

from __future__ import annotations

import copy
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..camera import CameraModel, load_camera, look_at, save_camera
from ..distortion import DistortionCoeffs, DistortionMap, apply_map, build_distortion_map
from ..errors import ValidationError
from ..noise import (IsoNoiseParams, NoiseModelParams, load_noise_params, params_at_iso,
                     sample_noise, save_noise_params)
from ..raw import RawImage, load_raw, normalize, save_raw
from ..splat.gaussians import GaussianCloud, load_cloud, save_cloud
from ..splat.render import render
from .sensor import SensorSpec, synthetic_sensor

DEFAULT_SPEC = {
    "width": 64,
    "height": 64,
    "seed": 0,
    "cameras": {"train": 24, "test": 6, "radius": 3.0, "elevation": 0.5, "arc_deg": 60.0,
                "fov_deg": 45.0},
    "distortion": {"k1": 0.04, "k2": 0.0, "k3": 0.0, "k4": 0.0, "p1": 0.002, "p2": -0.001},
    "objects": {"count": 16, "extent": 1.0, "scale": [0.04, 0.25], "color": [0.05, 0.8],
                "opacity": [0.6, 0.95]},
    "backdrop": {"radius": 5.0, "columns": 8, "rows": 4, "arc_deg": 160.0, "height": 8.0,
                 "color": [0.03, 0.12]},
    "sensor": {"iso": 1600.0, "exposure_s": 0.01, "black_level": 64.0, "white_level": 1023.0},
    "noise": {"mode": "poisson", "apply": True, "sensor": {}},
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "sensor":
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    if "params" in (override or {}).get("noise", {}):
        out["noise"].pop("sensor", None)
    return out


def resolve_spec(doc: dict) -> dict:
    """Fill defaults and validate a scene spec."""
    spec = _merge(DEFAULT_SPEC, doc)
    if spec["width"] < 8 or spec["height"] < 8:
        raise ValidationError("views must be at least 8x8")
    cams = spec["cameras"]
    if cams["train"] < 1 or cams["test"] < 1:
        raise ValidationError("need at least one training and one test view")
    bd = spec["backdrop"]
    if spec["objects"]["count"] < 0 or bd["columns"] < 0 or bd["rows"] < 0:
        raise ValidationError("gaussian counts must be non-negative")
    if spec["objects"]["count"] + bd["columns"] * bd["rows"] == 0:
        raise ValidationError("scene has no gaussians")
    if spec["noise"]["mode"] not in ("hg", "poisson"):
        raise ValidationError(f"unknown noise mode {spec['noise']['mode']!r}")
    if "params" not in spec["noise"] and "sensor" not in spec["noise"]:
        raise ValidationError("scene spec needs noise.params or noise.sensor")
    if spec["sensor"]["white_level"] <= spec["sensor"]["black_level"]:
        raise ValidationError("white_level must exceed black_level")
    return spec


# -- geometry ---------------------------------------------------------------


def _uniform(rng, bounds, size):
    lo, hi = bounds
    return rng.uniform(lo, hi, size)


def ground_truth_cloud(spec: dict) -> GaussianCloud:
    """Random object gaussians near the origin in front of a curved backdrop.

    The backdrop is a cylinder section of flat tiles behind the objects (as
    seen from the camera arc), so every pixel of every view sees signal.
    """
    rng = np.random.default_rng([spec["seed"], 1])
    obj = spec["objects"]
    n = obj["count"]
    mu = rng.uniform(-obj["extent"], obj["extent"], (n, 3))
    scale = np.exp(rng.uniform(np.log(obj["scale"][0]), np.log(obj["scale"][1]), (n, 3)))
    color = _uniform(rng, obj["color"], (n, 1))
    opac = _uniform(rng, obj["opacity"], n)
    rot = rng.standard_normal((n, 4))

    bd = spec["backdrop"]
    cols, rows = bd["columns"], bd["rows"]
    angles = np.pi + np.radians(bd["arc_deg"]) * ((np.arange(cols) + 0.5) / cols - 0.5)
    heights = bd["height"] * ((np.arange(rows) + 0.5) / rows - 0.5)
    aa, hh = np.meshgrid(angles, heights, indexing="ij")
    aa, hh = aa.ravel(), hh.ravel()
    r = bd["radius"]
    b_mu = np.stack([r * np.cos(aa), r * np.sin(aa), hh], -1)
    width_t = r * np.radians(bd["arc_deg"]) / max(cols, 1)
    height_t = bd["height"] / max(rows, 1)
    b_scale = np.stack([np.full(aa.size, 0.02), np.full(aa.size, 0.8 * width_t),
                        np.full(aa.size, 0.8 * height_t)], -1)
    # local x axis along the cylinder normal: rotation about z by the tile angle
    b_rot = np.stack([np.cos(aa / 2), np.zeros_like(aa), np.zeros_like(aa), np.sin(aa / 2)], -1)
    b_color = _uniform(rng, bd["color"], (aa.size, 1))
    b_opac = np.full(aa.size, 0.99)

    return GaussianCloud.from_activated(
        np.concatenate([mu, b_mu]), np.concatenate([scale, b_scale]),
        np.concatenate([color, b_color]), np.concatenate([opac, b_opac]),
        np.concatenate([rot, b_rot]),
    )


def arc_cameras(spec: dict):
    """Training and test cameras interleaved on one horizontal arc.

    Positions are evenly spaced; every ``(train + test) / test``-th slot is a
    test view. Training views are returned in :func:`spread_order` so any
    prefix of the list covers the whole arc.
    """
    c = spec["cameras"]
    w, h = spec["width"], spec["height"]
    total = c["train"] + c["test"]
    arc = np.radians(c["arc_deg"])
    angles = arc * ((np.arange(total) + 0.5) / total - 0.5)
    test_slots = set(np.round((np.arange(c["test"]) + 0.5) * total / c["test"] - 0.5).astype(int))
    focal = 0.5 * w / np.tan(np.radians(c["fov_deg"]) / 2)
    dist = DistortionCoeffs.from_dict(spec["distortion"])
    target = np.zeros(3)
    train, test = [], []
    for i, ang in enumerate(angles):
        eye = np.array([c["radius"] * np.cos(ang), c["radius"] * np.sin(ang), c["elevation"]])
        rot, t = look_at(eye, target)
        cam = CameraModel(rot, t, focal, focal, (w - 1) / 2, (h - 1) / 2, w, h, dist)
        (test if i in test_slots else train).append(cam)
    return [train[i] for i in spread_order(len(train))], test


def spread_order(n: int) -> list[int]:
    """Permutation of ``range(n)`` whose every prefix is spread out.

    Greedy farthest-point order on the index line, starting from the middle;
    ties go to the smaller index.
    """
    if n == 0:
        return []
    order = [(n - 1) // 2]
    dist = np.abs(np.arange(n) - order[0]).astype(float)
    for _ in range(n - 1):
        nxt = int(np.argmax(dist))
        order.append(nxt)
        dist = np.minimum(dist, np.abs(np.arange(n) - nxt))
    return order


# -- dataset ----------------------------------------------------------------


def view_seed(seed: int, split: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, split, index]).generate_state(1, np.uint64)[0])


def render_clean(cloud: GaussianCloud, camera: CameraModel, dmap: DistortionMap | None = None):
    """Normalized clean raw in the distorted sensor geometry."""
    dmap = dmap if dmap is not None else build_distortion_map(camera, "inverse")
    return apply_map(render(cloud, camera).plane, dmap)


def scene_synthesize(spec_doc, out_dir, spec_dir=None) -> Path:
    """Write a complete dataset to ``out_dir`` and return the dataset.json path."""
    if isinstance(spec_doc, (str, Path)):
        spec_dir = Path(spec_doc).parent
        spec_doc = json.loads(Path(spec_doc).read_text())
    spec = resolve_spec(spec_doc)
    spec_dir = Path(spec_dir or ".")
    out = Path(out_dir)
    for sub in ("cameras", "clean", "noisy"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    shape = (spec["height"], spec["width"])
    ns = spec["noise"]
    if "params" in ns:
        model = load_noise_params(spec_dir / ns["params"])
    else:
        model = synthetic_sensor(SensorSpec.from_dict(ns["sensor"]), shape, spec["seed"])
    if model.shape != shape:
        raise ValidationError(f"noise maps are {model.shape}, views are {shape}")
    save_noise_params(model, out / "noise.json")
    model = load_noise_params(out / "noise.json")  # the f32 round trip the trainer sees

    sensor = spec["sensor"]
    iso_params = params_at_iso(model, sensor["iso"])
    cloud = ground_truth_cloud(spec)
    save_cloud(cloud, out / "gt.gcld")
    train, test = arc_cameras(spec)

    views = {"train": [], "test": []}
    for split_id, (split, cams) in enumerate((("train", train), ("test", test))):
        for i, cam in enumerate(cams):
            name = f"{split}_{i:03d}"
            save_camera(cam, out / "cameras" / f"{name}.json")
            clean = render_clean(cloud, cam)
            clean_raw = RawImage.from_normalized(clean, sensor["black_level"], sensor["white_level"],
                                                 sensor["iso"], sensor["exposure_s"])
            save_raw(clean_raw, out / "clean" / f"{name}.rawf")
            seed = view_seed(spec["seed"], split_id, i)
            if ns["apply"]:
                x = normalize(clean_raw)
                noisy = np.minimum(x + sample_noise(x, iso_params, seed, ns["mode"]), 1.0)
                noisy_raw = RawImage.from_normalized(noisy, sensor["black_level"],
                                                     sensor["white_level"], sensor["iso"],
                                                     sensor["exposure_s"])
                save_raw(noisy_raw, out / "noisy" / f"{name}.rawf")
            else:
                shutil.copyfile(out / "clean" / f"{name}.rawf", out / "noisy" / f"{name}.rawf")
            views[split].append({
                "name": name,
                "camera": f"cameras/{name}.json",
                "clean": f"clean/{name}.rawf",
                "noisy": f"noisy/{name}.rawf",
                "seed": seed,
            })

    doc = {
        "spec": spec,
        "width": spec["width"],
        "height": spec["height"],
        "iso": sensor["iso"],
        "noise_params": "noise.json",
        "noise_applied": bool(ns["apply"]),
        "gt_cloud": "gt.gcld",
        "scene_extent": scene_extent(train),
        "train": views["train"],
        "test": views["test"],
    }
    path = out / "dataset.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def scene_extent(cameras) -> float:
    """3DGS-style spatial scale: 1.1 times the largest camera distance from their centroid."""
    centers = np.stack([c.center for c in cameras])
    return float(1.1 * np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)) + 1e-9)


@dataclass
class View:
    name: str
    camera: CameraModel
    dmap: DistortionMap
    clean: np.ndarray  # normalized
    noisy: np.ndarray  # normalized
    seed: int


@dataclass
class Dataset:
    root: Path
    doc: dict
    train: list
    test: list
    noise_model: NoiseModelParams
    iso_params: IsoNoiseParams

    @property
    def extent(self) -> float:
        return float(self.doc["scene_extent"])

    def gt_cloud(self) -> GaussianCloud:
        return load_cloud(self.root / self.doc["gt_cloud"])


def _load_views(root, entries):
    out = []
    for e in entries:
        cam = load_camera(root / e["camera"])
        out.append(View(e["name"], cam, build_distortion_map(cam, "inverse"),
                        normalize(load_raw(root / e["clean"])),
                        normalize(load_raw(root / e["noisy"])), int(e["seed"])))
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    if not path.exists():
        raise ValidationError(f"dataset {path} does not exist")
    root = path.parent
    doc = json.loads(path.read_text())
    if not doc.get("test"):
        raise ValidationError(f"dataset {path} has no test views")
    model = load_noise_params(root / doc["noise_params"])
    return Dataset(root, doc, _load_views(root, doc["train"]), _load_views(root, doc["test"]),
                   model, params_at_iso(model, doc["iso"]))
