"""Physical sensor noise model: shot + read + fixed-pattern noise.

All quantities are in normalized units (black-subtracted, divided by the
white-black span). Logarithms are natural logarithms throughout.

The camera-level model ties the per-ISO quantities together through

    k            = a_k * ISO + b_k
    ln sigma_read = a_read * ln k + b_read
    n_fp         = ISO * n_fp_k + n_fp_b

and the per-ISO noise is approximated as heteroscedastic Gaussian with
variance ``sigma_read**2 + max(x, 0) * k`` plus the fixed pattern ``n_fp``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ModelRangeError, SingularVarianceError, ValidationError
from .raw import RawImage, load_raw, save_raw

_LOG_2PI = math.log(2.0 * math.pi)

# Philox stream ids; one independent counter stream per draw kind.
_STREAM_SHOT = 0
_STREAM_READ = 1


@dataclass(frozen=True)
class IsoNoiseParams:
    k: float
    sigma_read: float
    n_fp: np.ndarray
    iso: float = 100.0

    def __post_init__(self):
        if self.k < 0 or self.sigma_read < 0:
            raise ValidationError("k and sigma_read must be non-negative")
        object.__setattr__(self, "n_fp", np.asarray(self.n_fp, dtype=np.float64))

    @classmethod
    def uniform(cls, k, sigma_read, shape, fp_level=0.0, iso=100.0):
        return cls(float(k), float(sigma_read), np.full(shape, float(fp_level)), iso)


@dataclass(frozen=True)
class NoiseModelParams:
    a_k: float
    b_k: float
    a_read: float
    b_read: float
    n_fp_k: np.ndarray
    n_fp_b: np.ndarray
    iso_min: float = 50.0
    iso_max: float = 6400.0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        fk = np.asarray(self.n_fp_k, dtype=np.float64)
        fb = np.asarray(self.n_fp_b, dtype=np.float64)
        if fk.shape != fb.shape or fk.ndim != 2:
            raise ValidationError("fixed-pattern maps must be 2-D and the same shape")
        object.__setattr__(self, "n_fp_k", fk)
        object.__setattr__(self, "n_fp_b", fb)
        for iso in (self.iso_min, self.iso_max):
            if self.a_k * iso + self.b_k <= 0:
                raise ModelRangeError(f"gain line gives k <= 0 at ISO {iso}")

    @property
    def shape(self):
        return self.n_fp_k.shape


def params_at_iso(model: NoiseModelParams, iso: float) -> IsoNoiseParams:
    """Evaluate the camera model at one ISO setting."""
    if not model.iso_min <= iso <= model.iso_max:
        raise ModelRangeError(f"ISO {iso} outside [{model.iso_min}, {model.iso_max}]")
    k = model.a_k * iso + model.b_k
    if k <= 0:
        raise ModelRangeError(f"derived gain k={k} is not positive at ISO {iso}")
    sigma_read = math.exp(model.a_read * math.log(k) + model.b_read)
    n_fp = iso * model.n_fp_k + model.n_fp_b
    return IsoNoiseParams(k, sigma_read, n_fp, iso)


def hg_variance(signal, params: IsoNoiseParams) -> np.ndarray:
    signal = np.asarray(signal, dtype=np.float64)
    return params.sigma_read**2 + np.maximum(signal, 0.0) * params.k


def hg_sigma(signal, params: IsoNoiseParams) -> np.ndarray:
    """Per-pixel heteroscedastic std; negative signal is clamped to zero."""
    return np.sqrt(hg_variance(signal, params))


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream)``.

    Draw ``i`` of a stream depends only on the key and ``i``, so a field
    generated in row-major order is keyed by (seed, pixel index, stream).
    """
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)]))


def sample_noise(clean, params: IsoNoiseParams, seed: int, mode: str = "hg") -> np.ndarray:
    """Draw one noise field ``n = n_shot + n_read + n_fp`` for a clean image."""
    clean = np.asarray(clean, dtype=np.float64)
    if params.n_fp.shape != clean.shape:
        raise ValidationError(f"n_fp shape {params.n_fp.shape} != image shape {clean.shape}")
    z_shape = clean.shape
    if mode == "hg":
        z = philox(seed, _STREAM_SHOT).standard_normal(z_shape)
        return hg_sigma(clean, params) * z + params.n_fp
    if mode == "poisson":
        if params.k <= 0:
            raise DomainError("poisson mode requires k > 0")
        if np.any(clean < 0):
            raise DomainError("poisson mode requires a non-negative clean image")
        counts = philox(seed, _STREAM_SHOT).poisson(clean / params.k)
        shot = counts * params.k - clean
        read = params.sigma_read * philox(seed, _STREAM_READ).standard_normal(z_shape)
        return shot + read + params.n_fp
    raise ValidationError(f"unknown noise mode {mode!r}")


def _checked_sigma(signal, params):
    sigma = hg_sigma(signal, params)
    if np.any(sigma == 0):
        raise SingularVarianceError("sigma_hg is zero at some pixel; need sigma_read > 0")
    return sigma


def nll(n_hat, signal, params: IsoNoiseParams):
    """Gaussian negative log-likelihood of estimated noise.

    The noise law is N(0, sigma_hg^2) shifted per pixel by ``n_fp``, with
    ``sigma_hg`` evaluated at ``signal``. Returns ``(per_pixel, mean)``.
    """
    n_hat = np.asarray(n_hat, dtype=np.float64)
    signal = np.asarray(signal, dtype=np.float64)
    if n_hat.shape != signal.shape or n_hat.shape != params.n_fp.shape:
        raise ValidationError("n_hat, signal and n_fp must share a shape")
    var = _checked_sigma(signal, params) ** 2
    resid = n_hat - params.n_fp
    per_pixel = 0.5 * (_LOG_2PI + np.log(var)) + resid * resid / (2.0 * var)
    return per_pixel, float(per_pixel.mean())


def normalize_noise(n_hat, signal, params: IsoNoiseParams) -> np.ndarray:
    """Standardize estimated noise: (n_hat - n_fp) / sigma_hg(signal)."""
    n_hat = np.asarray(n_hat, dtype=np.float64)
    if n_hat.shape != params.n_fp.shape:
        raise ValidationError("n_hat and n_fp must share a shape")
    return (n_hat - params.n_fp) / _checked_sigma(signal, params)


def save_noise_params(model: NoiseModelParams, path) -> None:
    """Write the model as JSON with the two FP maps as RAWF0001 sidecars."""
    path = Path(path)
    stem = path.stem
    fk_name, fb_name = f"{stem}.n_fp_k.rawf", f"{stem}.n_fp_b.rawf"
    save_raw(RawImage(model.n_fp_k.astype(np.float32)), path.parent / fk_name)
    save_raw(RawImage(model.n_fp_b.astype(np.float32)), path.parent / fb_name)
    doc = {
        "a_k": model.a_k,
        "b_k": model.b_k,
        "a_read": model.a_read,
        "b_read": model.b_read,
        "iso_min": model.iso_min,
        "iso_max": model.iso_max,
        "n_fp_k": fk_name,
        "n_fp_b": fb_name,
        "log_base": "e",
        "units": "normalized",
        "metadata": model.metadata,
    }
    path.write_text(json.dumps(doc, indent=2))


def load_noise_params(path) -> NoiseModelParams:
    path = Path(path)
    doc = json.loads(path.read_text())
    fk = load_raw(path.parent / doc["n_fp_k"]).data.astype(np.float64)
    fb = load_raw(path.parent / doc["n_fp_b"]).data.astype(np.float64)
    return NoiseModelParams(
        doc["a_k"],
        doc["b_k"],
        doc["a_read"],
        doc["b_read"],
        fk,
        fb,
        doc.get("iso_min", 50.0),
        doc.get("iso_max", 6400.0),
        doc.get("metadata", {}),
    )
