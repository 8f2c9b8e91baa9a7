"""Differentiable rendering: projection, depth sort, compositing, backward."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from .gaussians import PARAM_NAMES, GaussianCloud, sigmoid
from .project import DILATION, NEAR_PLANE, Projection, project, project_backward
from .raster import rasterize_backward, rasterize_forward


@dataclass(frozen=True)
class RenderSettings:
    near: float = NEAR_PLANE
    dilation: float = DILATION
    cutoff: float = 3.0  # Mahalanobis radius; math.inf disables truncation
    alpha_max: float = 0.999
    t_min: float = 1e-4  # compositing stops once transmittance drops below


EXACT = RenderSettings(cutoff=math.inf, t_min=0.0)


@dataclass
class RenderTrace:
    proj: Projection
    order: np.ndarray
    bbox: np.ndarray
    n_proc: np.ndarray
    colors: np.ndarray
    opac: np.ndarray
    version: int
    cloud_id: int
    camera: object
    settings: RenderSettings


@dataclass
class RenderResult:
    image: np.ndarray  # (C, H, W)
    alpha: np.ndarray  # (H, W)
    trace: RenderTrace

    @property
    def plane(self) -> np.ndarray:
        """First channel as an ``(H, W)`` image."""
        return self.image[0]


def _bboxes(proj: Projection, width, height, cutoff):
    m = len(proj.depth)
    bbox = np.empty((m, 4), dtype=np.int64)
    if math.isinf(cutoff):
        bbox[:] = (0, width - 1, 0, height - 1)
        return bbox
    rx = cutoff * np.sqrt(proj.cov2d[:, 0, 0])
    ry = cutoff * np.sqrt(proj.cov2d[:, 1, 1])
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    bbox[:, 0] = np.clip(np.ceil(mx - rx), -1, width)
    bbox[:, 1] = np.clip(np.floor(mx + rx), -1, width)
    bbox[:, 2] = np.clip(np.ceil(my - ry), -1, height)
    bbox[:, 3] = np.clip(np.floor(my + ry), -1, height)
    return bbox


def render(cloud: GaussianCloud, camera, settings: RenderSettings = RenderSettings()) -> RenderResult:
    """Composite the cloud front to back as seen from ``camera``."""
    cloud.validate()
    p = cloud.params
    h, w = camera.height, camera.width
    proj = project(p["mu"], p["rot"], p["log_scale"], camera, settings.near, settings.dilation)
    bbox = _bboxes(proj, w, h, settings.cutoff)
    on_screen = (
        proj.visible
        & (bbox[:, 0] <= bbox[:, 1])
        & (bbox[:, 2] <= bbox[:, 3])
        & (bbox[:, 1] >= 0)
        & (bbox[:, 0] <= w - 1)
        & (bbox[:, 3] >= 0)
        & (bbox[:, 2] <= h - 1)
    )
    idx = np.flatnonzero(on_screen)
    order = idx[np.argsort(proj.depth[idx], kind="stable")]
    colors = cloud.colors
    opac = sigmoid(p["opacity"])
    cutoff2 = settings.cutoff**2
    image, alpha, n_proc = rasterize_forward(
        h, w, order, proj.mean2d, proj.conic, opac, colors, bbox,
        cutoff2, settings.alpha_max, settings.t_min,
    )
    trace = RenderTrace(proj, order, bbox, n_proc, colors, opac, cloud.version, id(cloud),
                        camera, settings)
    return RenderResult(image, alpha, trace)


def render_backward(cloud: GaussianCloud, trace: RenderTrace, g_image, g_alpha=None,
                    accumulate_stats: bool = True) -> dict:
    """Gradients of the loss w.r.t. every raw parameter of every gaussian.

    When ``accumulate_stats`` is set, the screen-space positional gradient
    norm of every rendered gaussian is added to the cloud's densification
    statistics.
    """
    if trace.version != cloud.version or trace.cloud_id != id(cloud):
        raise ValidationError("render trace is stale: cloud changed since the forward pass")
    cam, st = trace.camera, trace.settings
    h, w = cam.height, cam.width
    g_image = np.asarray(g_image, dtype=np.float64)
    if g_image.ndim == 2:
        g_image = g_image[None]
    if g_image.shape != (cloud.channels, h, w):
        raise ValidationError(f"image gradient shape {g_image.shape} does not match render")
    g_alpha = np.zeros((h, w)) if g_alpha is None else np.asarray(g_alpha, dtype=np.float64)
    proj = trace.proj
    g_mean2d, g_conic, g_opac, g_color = rasterize_backward(
        h, w, trace.order, proj.mean2d, proj.conic, trace.opac, trace.colors, trace.bbox,
        st.cutoff**2, st.alpha_max, trace.n_proc, np.ascontiguousarray(g_image),
        np.ascontiguousarray(g_alpha),
    )
    g_mu, g_rot, g_log_scale = project_backward(proj, cam, g_mean2d, g_conic)
    p = cloud.params
    grads = {
        "mu": g_mu,
        "rot": g_rot,
        "log_scale": g_log_scale,
        "color_raw": g_color * sigmoid(p["color_raw"]),
        "opacity": g_opac * trace.opac * (1.0 - trace.opac),
    }
    if accumulate_stats:
        seen = trace.order
        cloud.grad_accum[seen] += np.linalg.norm(g_mean2d[seen], axis=1)
        cloud.grad_count[seen] += 1
        cloud.mu_grad_accum[seen] += g_mu[seen]
    return {k: grads[k] for k in PARAM_NAMES}
