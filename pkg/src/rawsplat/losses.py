"""Training objectives with analytic gradients.

Every loss returns its value together with the gradient(s) needed by the
training loop; nothing here relies on automatic differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .distortion import DistortionMap, apply_map, apply_map_backward
from .errors import InsufficientDataError, ValidationError
from .noise import IsoNoiseParams, hg_variance, nll as noise_nll

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

#: Per-pixel NLL of a zero residual under unit variance.
NLL_UNIT_SIGMA = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_nd: float = 5.0
    lambda_cov: float = 20.0
    epsilon: float = 1e-3
    cov_patch: int = 4

    def __post_init__(self):
        if min(self.lambda_dssim, self.lambda_nd, self.lambda_cov) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")

    @classmethod
    def limited_views(cls, **kw):
        """Weights for few-view training: lambda_nd=3, lambda_cov=20."""
        return cls(lambda_nd=3.0, **kw)


@dataclass(frozen=True)
class GradientRouting:
    """Which paths of the noise-robust loss carry gradient.

    ``recon_target``: recon term's target ``raw - n_hat`` sends gradient to
    ``n_hat``. ``nll_sigma``: the NLL variance depends on the render.
    ``cov_sigma``: the sigma used to standardize noise for the covariance
    term depends on the render.
    """

    recon_target: bool = True
    nll_sigma: bool = True
    cov_sigma: bool = False


@dataclass
class LossReport:
    total: float
    recon: float
    nll: float = 0.0
    cov: float = 0.0
    grad_render: np.ndarray | None = None
    grad_n_hat: np.ndarray | None = None
    grad_distorted: np.ndarray | None = None


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")


# -- L1 + D-SSIM --------------------------------------------------------------


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


def _blur(img, w):
    # zero-padded 'same' filtering; symmetric kernel -> self-adjoint operator
    out = correlate1d(img, w, axis=-1, mode="constant", cval=0.0)
    return correlate1d(out, w, axis=-2, mode="constant", cval=0.0)


def ssim(pred, target, peak=1.0):
    """Mean SSIM and the per-pixel partials needed for its gradient."""
    w = gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_x, mu_y = _blur(pred, w), _blur(target, w)
    sxx = _blur(pred * pred, w) - mu_x * mu_x
    syy = _blur(target * target, w) - mu_y * mu_y
    sxy = _blur(pred * target, w) - mu_x * mu_y
    n1 = 2 * mu_x * mu_y + c1
    n2 = 2 * sxy + c2
    d1 = mu_x * mu_x + mu_y * mu_y + c1
    d2 = sxx + syy + c2
    smap = n1 * n2 / (d1 * d2)
    return smap, (mu_x, mu_y, n1, n2, d1, d2, w)


def loss_3dgs(pred, target, lambda_dssim=0.2, peak=1.0):
    """``(1 - lam) * L1 + lam * (1 - SSIM) / 2`` and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _same_shape(pred, target)
    n = pred.size
    diff = pred - target
    l1 = float(np.abs(diff).mean())
    grad = (1 - lambda_dssim) * np.sign(diff) / n
    if lambda_dssim == 0:
        return (1 - lambda_dssim) * l1, grad
    smap, (mu_x, mu_y, n1, n2, d1, d2, w) = ssim(pred, target, peak)
    dssim = (1.0 - float(smap.mean())) / 2.0
    g_s = -lambda_dssim / (2.0 * n)  # dL/d smap per pixel
    den = d1 * d2
    ds_dmux = (2 * mu_y * (n2 - n1) - 2 * mu_x * smap * (d2 - d1)) / den
    ds_dbxx = -smap / d2  # w.r.t. blur(pred^2)
    ds_dbxy = 2 * n1 / den  # w.r.t. blur(pred*target)
    grad = grad + g_s * (
        _blur(ds_dmux, w) + 2 * pred * _blur(ds_dbxx, w) + target * _blur(ds_dbxy, w)
    )
    return (1 - lambda_dssim) * l1 + lambda_dssim * dssim, grad


# -- RawNeRF scaled L2 ----------------------------------------------------------


def loss_rawnerf(pred, target, epsilon=1e-3, mask=None, sg_pred=None):
    """Mean of ``((pred - target) / (sg(pred) + eps))**2`` over ``mask``.

    Returns ``(loss, grad_pred, grad_target)``. The denominator is held
    fixed (stop-gradient); gradients flow only through the numerator.
    ``sg_pred`` overrides the value used in the denominator, which lets a
    finite-difference check hold it constant.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _same_shape(pred, target)
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValidationError("loss mask selects no pixels")
    sg_pred = pred if sg_pred is None else np.asarray(sg_pred, dtype=np.float64)
    scale = 1.0 / (sg_pred + epsilon)
    resid = (pred - target) * scale
    loss = float(np.sum(resid[mask] ** 2)) / count
    grad = np.where(mask, 2.0 * resid * scale / count, 0.0)
    return loss, grad, -grad


# -- spatial covariance ---------------------------------------------------------


def _patches(z, patch):
    h, w = z.shape
    rows, cols = h // patch, w // patch
    if rows < 1 or cols < 1:
        raise ValidationError(f"image {h}x{w} smaller than the {patch}x{patch} patch")
    if rows * cols < 2:
        raise InsufficientDataError("covariance loss needs at least 2 patches")
    blocks = z[: rows * patch, : cols * patch].reshape(rows, patch, cols, patch)
    return blocks.transpose(0, 2, 1, 3).reshape(rows * cols, patch * patch), rows, cols


def second_moment(z, patch=4):
    zs, _, _ = _patches(np.asarray(z, dtype=np.float64), patch)
    return zs.T @ zs / len(zs)


def loss_cov(z, patch=4):
    """Mean squared entry of ``I - M``; ``M`` is the patch second-moment matrix.

    Non-overlapping ``patch x patch`` tiles are the samples. Returns
    ``(loss, grad_z)``; pixels outside the tiled area get zero gradient.
    """
    z = np.asarray(z, dtype=np.float64)
    zs, rows, cols = _patches(z, patch)
    s = len(zs)
    d = patch * patch
    resid = np.eye(d) - zs.T @ zs / s
    loss = float(np.sum(resid * resid)) / d**2
    g_m = -2.0 * resid / d**2
    g_zs = 2.0 * zs @ g_m / s
    grad = np.zeros_like(z)
    grad[: rows * patch, : cols * patch] = (
        g_zs.reshape(rows, cols, patch, patch).transpose(0, 2, 1, 3).reshape(rows * patch, cols * patch)
    )
    return loss, grad


# -- combined noise-robust reconstruction loss ------------------------------


def loss_nrr(
    render,
    raw,
    n_hat,
    params: IsoNoiseParams,
    weights: LossWeights = LossWeights(),
    dmap: DistortionMap | None = None,
    routing: GradientRouting = GradientRouting(),
    signal_for_sigma=None,
    sg_distorted=None,
) -> LossReport:
    """Recon on ``D(render)`` vs ``raw - n_hat`` plus weighted NLL and covariance.

    ``render`` is the undistorted render, ``raw`` the normalized noisy
    frame. ``signal_for_sigma`` defaults to ``D(render)``; passing it
    explicitly detaches the variance from the render. ``sg_distorted`` is
    the value seen by every stop-gradient (the recon denominator and, unless
    routed, the covariance sigma); it defaults to ``D(render)``. Gradients
    are returned for the undistorted render and for ``n_hat``.
    """
    render = np.asarray(render, dtype=np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    n_hat = np.asarray(n_hat, dtype=np.float64)
    _same_shape(render, raw)
    _same_shape(raw, n_hat)
    if dmap is None:
        dmap = DistortionMap.identity(render.shape[1], render.shape[0])
    mask = dmap.mask
    count = int(mask.sum())
    dist = apply_map(render, dmap)
    signal = dist if signal_for_sigma is None else np.asarray(signal_for_sigma, dtype=np.float64)

    target = raw - n_hat
    sg_dist = dist if sg_distorted is None else np.asarray(sg_distorted, dtype=np.float64)
    recon, g_dist, g_target = loss_rawnerf(dist, target, weights.epsilon, mask, sg_dist)
    g_n = -g_target if routing.recon_target else np.zeros_like(n_hat)

    nll_val = cov_val = 0.0
    if weights.lambda_nd > 0 or weights.lambda_cov > 0:
        # an unrouted sigma sees the stop-gradient value, like the recon denominator
        detached = signal_for_sigma is not None
        nll_signal = signal if routing.nll_sigma or detached else sg_dist
        cov_signal = signal if routing.cov_sigma or detached else sg_dist
        var = hg_variance(nll_signal, params)
        per_pixel, _ = noise_nll(n_hat, nll_signal, params)
        resid = n_hat - params.n_fp
        nll_val = float(per_pixel[mask].sum()) / count
        lam = weights.lambda_nd / count
        g_n = g_n + np.where(mask, lam * resid / var, 0.0)
        if routing.nll_sigma and not detached:
            dvar = 0.5 / var - resid * resid / (2.0 * var * var)
            g_dist = g_dist + np.where((signal > 0) & mask, lam * dvar * params.k, 0.0)

        sigma = np.sqrt(hg_variance(cov_signal, params))
        z = resid / sigma
        cov_val, g_z = loss_cov(z, weights.cov_patch)
        g_n = g_n + weights.lambda_cov * g_z / sigma
        if routing.cov_sigma and not detached:
            dz_dvar = -0.5 * z / (sigma * sigma)
            g_dist = g_dist + np.where(signal > 0, weights.lambda_cov * g_z * dz_dvar * params.k, 0.0)

    total = recon + weights.lambda_nd * nll_val + weights.lambda_cov * cov_val
    return LossReport(
        total, recon, nll_val, cov_val,
        grad_render=apply_map_backward(g_dist, dmap),
        grad_n_hat=g_n,
        grad_distorted=g_dist,
    )

