"""Differentiable 3D gaussian splatting on the CPU."""

from .density import densify_and_prune
from .gaussians import (
    PARAM_NAMES,
    Gaussian3D,
    GaussianCloud,
    anisotropy_ratios,
    anisotropy_stats,
    covariance3d,
    load_cloud,
    save_cloud,
)
from .render import EXACT, RenderResult, RenderSettings, render, render_backward

__all__ = [
    "PARAM_NAMES", "Gaussian3D", "GaussianCloud", "anisotropy_ratios", "anisotropy_stats",
    "covariance3d", "load_cloud", "save_cloud", "densify_and_prune", "EXACT",
    "RenderResult", "RenderSettings", "render", "render_backward",
]
