"""Gaussian cloud parameters, activations and serialization.

Parameters are stored as a struct of arrays:

========== ========= ===========================================
name       shape     activation
========== ========= ===========================================
mu         (M, 3)    none (world position)
rot        (M, 4)    normalized to a unit quaternion (w, x, y, z)
log_scale  (M, 3)    exp
color_raw  (M, C)    softplus (HDR, unbounded above)
opacity    (M,)      sigmoid (stored as a logit)
========== ========= ===========================================
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError, ValidationError

PARAM_NAMES = ("mu", "rot", "log_scale", "color_raw", "opacity")

_CLOUD_MAGIC = b"GCLD0001"


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q):
    """Rotation matrices ``(M, 3, 3)`` from unit quaternions ``(M, 4)``, w first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def rotmat_grad_to_quat(q, g_rot):
    """Pull ``dL/dR`` (M, 3, 3) back to ``dL/dq`` for a unit quaternion ``q``."""
    w, x, y, z = (q[:, i] for i in range(4))
    g = g_rot
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], -1)


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def covariance3d(rot, log_scale):
    """``R S S^T R^T`` for one quaternion ``(4,)`` or a batch ``(M, 4)``."""
    rot = np.asarray(rot, dtype=np.float64)
    single = rot.ndim == 1
    q = normalize_quat(np.atleast_2d(rot))
    s = np.exp(np.atleast_2d(np.asarray(log_scale, dtype=np.float64)))
    m = quat_to_rotmat(q) * s[:, None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return cov[0] if single else cov


@dataclass
class Gaussian3D:
    """One gaussian in raw (pre-activation) parameters."""

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    color_raw: np.ndarray
    opacity_logit: float


class GaussianCloud:
    """Mutable parameter set plus per-gaussian densification statistics.

    ``version`` increments on every in-place modification so a render trace
    can detect that it no longer matches the parameters.
    """

    def __init__(self, mu, rot, log_scale, color_raw, opacity):
        mu = np.array(mu, dtype=np.float64).reshape(-1, 3)
        n = len(mu)
        color_raw = np.array(color_raw, dtype=np.float64)
        color_raw = color_raw.reshape(n, -1) if n else color_raw.reshape(0, max(color_raw.shape[-1:] or (1,)))
        self.params = {
            "mu": mu,
            "rot": np.array(rot, dtype=np.float64).reshape(n, 4),
            "log_scale": np.array(log_scale, dtype=np.float64).reshape(n, 3),
            "color_raw": color_raw,
            "opacity": np.array(opacity, dtype=np.float64).reshape(n),
        }
        self.version = 0
        self.optimizer = None  # AdamState whose moments track the gaussians
        self.reset_stats()

    # -- construction -----------------------------------------------------

    @classmethod
    def from_gaussians(cls, gaussians):
        gaussians = list(gaussians)
        return cls(
            [g.mu for g in gaussians],
            [g.rot for g in gaussians],
            [g.log_scale for g in gaussians],
            [np.atleast_1d(g.color_raw) for g in gaussians],
            [g.opacity_logit for g in gaussians],
        )

    @classmethod
    def from_activated(cls, mu, scale, color, opacity, rot=None):
        mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        n = len(mu)
        if rot is None:
            rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n, 3))
        # softplus never reaches zero; a black gaussian gets a finite raw value
        color = np.maximum(np.asarray(color, dtype=np.float64).reshape(n, -1), 1e-8)
        return cls(mu, normalize_quat(rot), np.log(scale), inverse_softplus(color),
                   logit(np.broadcast_to(np.asarray(opacity, dtype=np.float64), (n,))))

    def copy(self) -> "GaussianCloud":
        out = GaussianCloud(*(self.params[k] for k in PARAM_NAMES))
        out.grad_accum = self.grad_accum.copy()
        out.grad_count = self.grad_count.copy()
        out.mu_grad_accum = self.mu_grad_accum.copy()
        return out

    def __len__(self):
        return len(self.params["mu"])

    def __getitem__(self, i) -> Gaussian3D:
        p = self.params
        return Gaussian3D(p["mu"][i].copy(), p["rot"][i].copy(), p["log_scale"][i].copy(),
                          p["color_raw"][i].copy(), float(p["opacity"][i]))

    @property
    def channels(self) -> int:
        return self.params["color_raw"].shape[1]

    # -- activated views --------------------------------------------------

    @property
    def scales(self):
        return np.exp(self.params["log_scale"])

    @property
    def opacities(self):
        return sigmoid(self.params["opacity"])

    @property
    def colors(self):
        return softplus(self.params["color_raw"])

    @property
    def quats(self):
        return normalize_quat(self.params["rot"])

    # -- bookkeeping ------------------------------------------------------

    def touch(self):
        self.version += 1

    def reset_stats(self):
        n = len(self)
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n)
        self.mu_grad_accum = np.zeros((n, 3))

    def validate(self):
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(self.params[name])):
                raise ValidationError(f"non-finite values in gaussian parameter {name!r}")

    def renormalize_rotations(self):
        self.params["rot"] = normalize_quat(self.params["rot"])

    def select(self, keep) -> None:
        """Keep only the gaussians indexed by ``keep`` (bool mask or indices)."""
        for name in PARAM_NAMES:
            self.params[name] = self.params[name][keep]
        self.grad_accum = self.grad_accum[keep]
        self.grad_count = self.grad_count[keep]
        self.mu_grad_accum = self.mu_grad_accum[keep]
        if self.optimizer is not None:
            for moments in (self.optimizer.m, self.optimizer.v):
                for name in moments:
                    moments[name] = moments[name][keep]
        self.touch()

    def append(self, params: dict) -> None:
        n_new = len(params["mu"])
        for name in PARAM_NAMES:
            self.params[name] = np.concatenate([self.params[name], params[name]])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n_new)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(n_new)])
        self.mu_grad_accum = np.concatenate([self.mu_grad_accum, np.zeros((n_new, 3))])
        if self.optimizer is not None:
            for moments in (self.optimizer.m, self.optimizer.v):
                for name in moments:
                    pad = np.zeros((n_new,) + moments[name].shape[1:])
                    moments[name] = np.concatenate([moments[name], pad])
        self.touch()


def anisotropy_ratios(cloud: GaussianCloud) -> np.ndarray:
    s = cloud.scales
    return s.max(axis=1) / s.min(axis=1)


def anisotropy_stats(cloud: GaussianCloud):
    """``(median, p95, M)`` of per-gaussian max/min activated scale ratios."""
    if len(cloud) == 0:
        raise ValidationError("anisotropy of an empty cloud is undefined")
    r = anisotropy_ratios(cloud)
    return float(np.median(r)), float(np.percentile(r, 95)), len(cloud)


# -- serialization ----------------------------------------------------------


def save_cloud(cloud: GaussianCloud, path) -> None:
    """JSON header followed by little-endian f64 parameter blocks.

    Layout: 8-byte magic ``GCLD0001``, u32 header length, UTF-8 JSON header
    ``{"count", "channels", "blocks": [{"name", "shape"}, ...]}``, then each
    block's payload in header order.
    """
    blocks, payload = [], []
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(cloud.params[name], dtype="<f8")
        blocks.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = json.dumps(
        {"count": len(cloud), "channels": cloud.channels, "dtype": "<f8", "blocks": blocks}
    ).encode()
    Path(path).write_bytes(_CLOUD_MAGIC + struct.pack("<I", len(header)) + header + b"".join(payload))


def load_cloud(path) -> GaussianCloud:
    buf = Path(path).read_bytes()
    if buf[:8] != _CLOUD_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:8]!r}")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12 : 12 + hlen])
    pos = 12 + hlen
    arrays = {}
    for blk in header["blocks"]:
        count = int(np.prod(blk["shape"]))
        arrays[blk["name"]] = np.frombuffer(buf, "<f8", count, pos).reshape(blk["shape"]).copy()
        pos += 8 * count
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return GaussianCloud(*(arrays[k] for k in PARAM_NAMES))
