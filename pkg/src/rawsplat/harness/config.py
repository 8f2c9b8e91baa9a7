"""Training configuration (JSON) with desk-scale defaults."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import ValidationError
from ..losses import GradientRouting, LossWeights

MODES = ("ldr", "hdr_rawnerf", "nrr")


@dataclass(frozen=True)
class LearningRates:
    """Per-group Adam rates. ``mu`` decays log-linearly and is scaled by the scene extent."""

    mu_init: float = 1.6e-4
    mu_final: float = 1.6e-6
    rot: float = 1e-3
    log_scale: float = 5e-3
    color_raw: float = 2.5e-3
    opacity: float = 5e-2


@dataclass(frozen=True)
class DensifyConfig:
    interval: int = 100
    start: int = 500
    stop: int = 3000
    grad_threshold: float = 2e-4  # mean screen-space gradient norm, pixel units
    percent_dense: float = 0.01  # split above this fraction of the scene extent
    opacity_prune: float = 0.005
    max_count: int = 2000


@dataclass(frozen=True)
class InitConfig:
    """Initial cloud: points drawn on the ground-truth surfaces (a stand-in for SfM)."""

    count: int = 300
    position_jitter: float = 0.05
    opacity: float = 0.1


@dataclass(frozen=True)
class ExtractorConfig:
    lr_values: tuple = (1e-4, 1e-5)
    milestones: tuple = (25_000,)
    warmup: int = 0  # iterations before the extractor starts updating
    weights: str | None = None  # optional pretrained weights file
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    dataset: str
    mode: str = "nrr"
    iterations: int = 5000
    seed: int = 0
    views: tuple | None = None  # training view indices; None uses all
    n_views: int | None = None  # shorthand for the first n views
    loss: LossWeights = LossWeights()
    routing: GradientRouting = GradientRouting()
    lr: LearningRates = LearningRates()
    densify: DensifyConfig = DensifyConfig()
    init: InitConfig = InitConfig()
    extractor: ExtractorConfig = ExtractorConfig()
    ldr_gain: float = 4.0
    eval_interval: int = 1000
    checkpoint_interval: int = 1000
    snapshot_iterations: tuple = ()
    out: str | None = None
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations <= 0:
            raise ValidationError("iterations must be positive")
        if self.eval_interval <= 0 or self.checkpoint_interval <= 0:
            raise ValidationError("eval and checkpoint intervals must be positive")
        if self.views is not None and self.n_views is not None:
            raise ValidationError("give either views or n_views, not both")
        if self.n_views is not None and self.n_views < 1:
            raise ValidationError("n_views must be positive")

    # -- paths ----------------------------------------------------------------

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def dataset_path(self) -> Path:
        return self.resolve(self.dataset)

    def validate_files(self) -> None:
        ds = self.dataset_path
        if ds.is_dir():
            ds = ds / "dataset.json"
        if not ds.exists():
            raise ValidationError(f"dataset {ds} does not exist")
        if self.extractor.weights and not self.resolve(self.extractor.weights).exists():
            raise ValidationError(f"extractor weights {self.extractor.weights} do not exist")

    def view_indices(self, available: int) -> list[int]:
        if self.views is not None:
            idx = [int(i) for i in self.views]
        elif self.n_views is not None:
            idx = list(range(self.n_views))
        else:
            idx = list(range(available))
        if not idx or max(idx) >= available or min(idx) < 0:
            raise ValidationError(f"view selection {idx} invalid for {available} training views")
        return idx

    # -- (de)serialization --------------------------------------------------

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("base_dir")
        return doc

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "TrainConfig":
        doc = copy.deepcopy(doc)
        nested = {"loss": LossWeights, "routing": GradientRouting, "lr": LearningRates,
                  "densify": DensifyConfig, "init": InitConfig, "extractor": ExtractorConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        for key, typ in nested.items():
            if key in doc:
                sub = doc[key]
                bad = set(sub) - {f.name for f in fields(typ)}
                if bad:
                    raise ValidationError(f"unknown keys in {key}: {sorted(bad)}")
                for f in fields(typ):
                    if f.name in sub and isinstance(sub[f.name], list):
                        sub[f.name] = tuple(sub[f.name])
                doc[key] = typ(**sub)
        for key in ("views", "snapshot_iterations"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        if "dataset" not in doc:
            raise ValidationError("config needs a dataset path")
        return cls(base_dir=str(base_dir), **doc)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def replace(self, **changes) -> "TrainConfig":
        doc = self.to_dict()
        doc.update(changes)
        return TrainConfig.from_dict(
            {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in doc.items()},
            base_dir=self.base_dir,
        )
