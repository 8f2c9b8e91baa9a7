"""Supervised warm start of the noise extractor on self-synthesized pairs.

Clean frames are random smooth textures, independent of any scene; noise
comes from the calibrated camera model, so no ground truth of the scene
under reconstruction is used.
"""

from __future__ import annotations

import numpy as np

from ..extractor import ExtractorNet, extractor_optimizer, prediction_mse, pretrain
from ..noise import IsoNoiseParams, NoiseModelParams, params_at_iso, sample_noise


def synthetic_textures(count, shape, seed=0, level=(0.02, 0.6), blobs=(4, 24)):
    """Random piecewise-smooth images: a ramp plus gaussian blobs, clipped to ``level``."""
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = []
    for _ in range(count):
        g = rng.uniform(-1, 1, 2) / max(h, w)
        img = rng.uniform(*level) + (g[0] * yy + g[1] * xx) * rng.uniform(0, level[1])
        for _ in range(rng.integers(*blobs)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sy, sx = np.exp(rng.uniform(np.log(0.5), np.log(max(h, w) / 3), 2))
            th = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = np.cos(th) * dx + np.sin(th) * dy
            v = -np.sin(th) * dx + np.cos(th) * dy
            img = img + rng.uniform(-0.5, 0.5) * level[1] * np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
        out.append(np.clip(img, level[0], level[1]))
    return out


def model_noise_fn(model: NoiseModelParams, isos, mode="hg"):
    """``noise_fn`` drawing shot plus read noise at a random ISO from ``isos``."""
    isos = list(isos)

    def noise_fn(clean, seed):
        p = params_at_iso(model, isos[seed % len(isos)])
        flat = IsoNoiseParams(p.k, p.sigma_read, np.zeros(clean.shape), p.iso)
        return sample_noise(clean, flat, seed, mode)

    return noise_fn


def pretrain_extractor(model: NoiseModelParams, isos, steps=2000, seed=0, size=32,
                       n_images=64, lr=1e-3, log_every=0):
    """Return ``(net, history, heldout_mse_before, heldout_mse_after)``."""
    net = ExtractorNet(seed)
    train_imgs = synthetic_textures(n_images, (size, size), seed=seed)
    held = synthetic_textures(16, (size, size), seed=seed + 1)
    noise_fn = model_noise_fn(model, isos)
    held_seeds = [10_000 + i for i in range(len(held))]
    before = prediction_mse(net, held, noise_fn, held_seeds)
    state = extractor_optimizer((lr,), ())
    history = pretrain(net, train_imgs, noise_fn, steps, state, seed, log_every)
    after = prediction_mse(net, held, noise_fn, held_seeds)
    return net, history, before, after
