"""Raw frame container, the RAWF0001 binary format, and image metrics.

Images in normalized linear units are plain 2-D ``float64`` arrays of shape
``(height, width)``; values may exceed 1 for HDR content.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, LengthError, ValidationError

MAGIC = b"RAWF0001"
_HEADER = struct.Struct("<8sIIffff")

#: Returned by :func:`psnr` for identical images.
PSNR_INF = math.inf


@dataclass(frozen=True)
class RawImage:
    """Single-channel linear sensor frame in digital numbers (DN)."""

    data: np.ndarray
    black_level: float = 0.0
    white_level: float = 1.0
    iso: float = 100.0
    exposure_s: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValidationError(f"raw data must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("raw data contains non-finite samples")
        if not self.white_level > self.black_level:
            raise ValidationError(
                f"white_level ({self.white_level}) must exceed black_level ({self.black_level})"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_normalized(cls, plane, black_level=0.0, white_level=1.0, iso=100.0, exposure_s=1.0):
        """Inverse of :func:`normalize`; stores the result as float32 DN."""
        plane = np.asarray(plane, dtype=np.float64)
        dn = plane * (white_level - black_level) + black_level
        return cls(dn.astype(np.float32), black_level, white_level, iso, exposure_s)


def save_raw(image: RawImage, path) -> None:
    """Write ``image`` in the RAWF0001 format (little-endian, f32 payload)."""
    header = _HEADER.pack(
        MAGIC,
        image.width,
        image.height,
        image.black_level,
        image.white_level,
        image.iso,
        image.exposure_s,
    )
    payload = np.ascontiguousarray(image.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_raw(path) -> RawImage:
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:8]!r}")
    if len(buf) < _HEADER.size:
        raise LengthError(f"{path}: truncated header")
    _, width, height, black, white, iso, exposure = _HEADER.unpack_from(buf)
    expected = _HEADER.size + 4 * width * height
    if len(buf) != expected:
        raise LengthError(f"{path}: expected {expected} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(height, width)
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path}: non-finite sample in payload")
    return RawImage(data.astype(np.float32), black, white, iso, exposure)


def normalize(image: RawImage) -> np.ndarray:
    """Map DN to the black-referenced unit range. No clipping is applied."""
    span = float(image.white_level) - float(image.black_level)
    if span <= 0:
        raise ValidationError("white_level must exceed black_level")
    return (np.asarray(image.data, dtype=np.float64) - float(image.black_level)) / span


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``PSNR_INF`` when the images match."""
    if peak <= 0:
        raise ValidationError("peak must be positive")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / err)


def tone_map(plane, gain: float) -> np.ndarray:
    """Display transform: clip(gain * x, 0, 1) ** (1 / 2.2)."""
    if gain <= 0:
        raise ValidationError("gain must be positive")
    plane = np.asarray(plane, dtype=np.float64)
    if not np.all(np.isfinite(plane)):
        raise ValidationError("image contains non-finite values")
    return np.clip(plane * gain, 0.0, 1.0) ** (1.0 / 2.2)


def to_uint8(plane) -> np.ndarray:
    plane = np.clip(np.asarray(plane, dtype=np.float64), 0.0, 1.0)
    return np.round(plane * 255.0).astype(np.uint8)


def save_pgm(plane, path) -> None:
    """Write a display-range image ([0, 1]) as 8-bit binary PGM (P5)."""
    pix = to_uint8(plane)
    h, w = pix.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes())


def load_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not buf[end : end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    pix = np.frombuffer(buf[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return pix.astype(np.float64) / maxval


def save_png(plane, path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(plane), mode="L").save(path)
