"""Pinhole camera with world-to-camera pose and lens distortion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .distortion import DistortionCoeffs
from .errors import ValidationError


@dataclass(frozen=True)
class CameraModel:
    """``x_cam = rotation @ x_world + translation``; camera looks down +z.

    Pixel ``(u, v)`` has its center at integer coordinates, ``u`` along the
    image width.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: DistortionCoeffs = field(default_factory=DistortionCoeffs)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-9:
            raise ValidationError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    def with_distortion(self, coeffs: DistortionCoeffs) -> "CameraModel":
        return replace(self, distortion=coeffs)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self):
        return {
            "rotation": self.rotation.ravel().tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "distortion": self.distortion.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            np.array(doc["rotation"], dtype=np.float64).reshape(3, 3),
            np.array(doc["translation"], dtype=np.float64),
            float(doc["fx"]),
            float(doc["fy"]),
            float(doc["cx"]),
            float(doc["cy"]),
            int(doc["width"]),
            int(doc["height"]),
            DistortionCoeffs.from_dict(doc.get("distortion", {})),
        )


def save_camera(camera: CameraModel, path) -> None:
    Path(path).write_text(json.dumps(camera.to_dict(), indent=2))


def load_camera(path) -> CameraModel:
    return CameraModel.from_dict(json.loads(Path(path).read_text()))


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera ``(rotation, translation)`` for a camera at ``eye``.

    Camera axes: +z toward ``target``, +y pointing image-down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ eye


def orbit_cameras(n, radius, elevation, width, height, fov_deg=50.0, target=(0, 0, 0),
                  distortion=None, phase=0.0):
    """``n`` cameras evenly spaced on a horizontal circle, all facing ``target``."""
    focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    cams = []
    for i in range(n):
        ang = phase + 2 * np.pi * i / n
        eye = np.array([radius * np.cos(ang), radius * np.sin(ang), elevation]) + np.asarray(target)
        rot, t = look_at(eye, target)
        cams.append(
            CameraModel(rot, t, focal, focal, (width - 1) / 2, (height - 1) / 2,
                        width, height, distortion or DistortionCoeffs())
        )
    return cams
