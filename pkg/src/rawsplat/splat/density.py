"""Adaptive density control: clone, split and prune."""

from __future__ import annotations

import math

import numpy as np

from .gaussians import PARAM_NAMES, GaussianCloud, quat_to_rotmat, normalize_quat, sigmoid

SPLIT_FACTOR = 1.6


def densify_and_prune(
    cloud: GaussianCloud,
    grad_threshold: float,
    scale_split_threshold: float,
    opacity_prune_threshold: float,
    rng: np.random.Generator | None = None,
    max_count: int | None = None,
) -> GaussianCloud:
    """Grow the cloud where screen-space gradients are large, then prune.

    Gaussians whose mean accumulated screen gradient exceeds
    ``grad_threshold`` are cloned (max scale <= ``scale_split_threshold``)
    or split into two children shrunk by 1.6 and sampled inside the parent.
    Gaussians with opacity below ``opacity_prune_threshold`` are removed and
    the statistics reset. ``max_count`` caps growth, keeping the largest
    gradients first.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(cloud)
    avg = cloud.grad_accum / np.maximum(cloud.grad_count, 1)
    high = avg > grad_threshold
    if max_count is not None:
        room = max(max_count - n, 0)
        if high.sum() > room:
            ranked = np.argsort(-avg, kind="stable")[:room]
            high = np.zeros(n, dtype=bool)
            high[ranked] = True
    max_scale = cloud.scales.max(axis=1)
    clone = high & (max_scale <= scale_split_threshold)
    split = high & (max_scale > scale_split_threshold)
    p = cloud.params

    new = {}
    if clone.any():
        g = cloud.mu_grad_accum[clone]
        gnorm = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(gnorm > 0, g / np.where(gnorm > 0, gnorm, 1.0), 0.0)
        cl = {k: p[k][clone].copy() for k in PARAM_NAMES}
        cl["mu"] = cl["mu"] - 0.5 * max_scale[clone][:, None] * direction
        new = cl
    if split.any():
        idx = np.flatnonzero(split)
        children = {k: np.repeat(p[k][idx], 2, axis=0) for k in PARAM_NAMES}
        scale = np.repeat(cloud.scales[idx], 2, axis=0)
        rotm = quat_to_rotmat(normalize_quat(children["rot"]))
        offset = rng.standard_normal((len(children["mu"]), 3)) * scale
        children["mu"] = children["mu"] + np.einsum("nij,nj->ni", rotm, offset)
        children["log_scale"] = children["log_scale"] - math.log(SPLIT_FACTOR)
        new = children if not new else {k: np.concatenate([new[k], children[k]]) for k in PARAM_NAMES}

    if new:
        cloud.append(new)
    keep = np.ones(len(cloud), dtype=bool)
    keep[:n][split] = False
    keep &= sigmoid(cloud.params["opacity"]) >= opacity_prune_threshold
    if not keep.all():
        cloud.select(keep)
    cloud.reset_stats()
    return cloud
