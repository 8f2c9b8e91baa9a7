"""EWA projection of 3-D gaussians to screen-space ellipses, with its adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import normalize_quat, quat_to_rotmat, rotmat_grad_to_quat

NEAR_PLANE = 0.01
DILATION = 0.3


@dataclass
class Projection:
    """Projected quantities for every gaussian plus what backward needs.

    Culled gaussians (``visible`` false) carry placeholder values.
    """

    mean2d: np.ndarray  # (M, 2) pixels
    cov2d: np.ndarray  # (M, 2, 2)
    conic: np.ndarray  # (M, 3): a, b, c of the inverse covariance
    depth: np.ndarray  # (M,)
    visible: np.ndarray  # (M,) bool
    # cached intermediates
    p_cam: np.ndarray
    jac: np.ndarray  # (M, 2, 3)
    cov_cam: np.ndarray  # (M, 3, 3)
    rotq: np.ndarray  # (M, 3, 3) gaussian rotation
    scale: np.ndarray  # (M, 3)
    quat_raw: np.ndarray  # (M, 4) unnormalized


def perspective_jacobian(p_cam, fx, fy):
    """d(u, v)/d(x, y, z) of the pinhole map, shape ``(M, 2, 3)``."""
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    jac = np.zeros((len(p_cam), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)
    return jac


def project_points(p_cam, camera):
    z = p_cam[:, 2]
    u = camera.fx * p_cam[:, 0] / z + camera.cx
    v = camera.fy * p_cam[:, 1] / z + camera.cy
    return np.stack([u, v], -1)


def project(mu, rot, log_scale, camera, near=NEAR_PLANE, dilation=DILATION) -> Projection:
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    wrot = camera.rotation
    p_cam = mu @ wrot.T + camera.translation
    visible = p_cam[:, 2] > near
    # placeholder depth for culled entries keeps the arithmetic finite
    safe = p_cam.copy()
    safe[~visible, 2] = 1.0
    q = normalize_quat(rot)
    rotq = quat_to_rotmat(q)
    scale = np.exp(log_scale)
    m = rotq * scale[:, None, :]
    cov3 = m @ np.swapaxes(m, 1, 2)
    cov_cam = wrot @ cov3 @ wrot.T
    jac = perspective_jacobian(safe, camera.fx, camera.fy)
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2) + dilation * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], -1)
    return Projection(
        project_points(safe, camera), cov2d, conic, p_cam[:, 2], visible,
        safe, jac, cov_cam, rotq, scale, np.asarray(rot, dtype=np.float64),
    )


def project_backward(proj: Projection, camera, g_mean2d, g_conic):
    """Chain screen-space gradients back to ``(g_mu, g_rot, g_log_scale)``.

    ``g_conic`` holds dL/da, dL/db, dL/dc for the conic ``[[a, b], [b, c]]``
    where ``b`` is the shared off-diagonal value.
    """
    conic = proj.conic
    # symmetric matrix gradient of the conic; off-diagonal b appears twice
    gc = np.empty((len(conic), 2, 2))
    gc[:, 0, 0] = g_conic[:, 0]
    gc[:, 0, 1] = gc[:, 1, 0] = 0.5 * g_conic[:, 1]
    gc[:, 1, 1] = g_conic[:, 2]
    cmat = np.empty_like(gc)
    cmat[:, 0, 0] = conic[:, 0]
    cmat[:, 0, 1] = cmat[:, 1, 0] = conic[:, 1]
    cmat[:, 1, 1] = conic[:, 2]
    g_cov2d = -cmat @ gc @ cmat

    jac, vcov = proj.jac, proj.cov_cam
    g_vcov = np.swapaxes(jac, 1, 2) @ g_cov2d @ jac
    g_jac = 2.0 * g_cov2d @ jac @ vcov

    wrot = camera.rotation
    g_cov3 = wrot.T @ g_vcov @ wrot
    m = proj.rotq * proj.scale[:, None, :]
    g_m = 2.0 * g_cov3 @ m
    g_scale = np.einsum("nij,nij->nj", proj.rotq, g_m)
    g_log_scale = g_scale * proj.scale
    g_rotq = g_m * proj.scale[:, None, :]
    q_raw = proj.quat_raw
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    qn = q_raw / norm
    g_qn = rotmat_grad_to_quat(qn, g_rotq)
    g_rot = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / norm

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    fx, fy = camera.fx, camera.fy
    gu, gv = g_mean2d[:, 0], g_mean2d[:, 1]
    z2 = z * z
    z3 = z2 * z
    g_p = np.empty((len(z), 3))
    g_p[:, 0] = gu * fx / z - g_jac[:, 0, 2] * fx / z2
    g_p[:, 1] = gv * fy / z - g_jac[:, 1, 2] * fy / z2
    g_p[:, 2] = (
        -gu * fx * x / z2
        - gv * fy * y / z2
        - g_jac[:, 0, 0] * fx / z2
        + g_jac[:, 0, 2] * 2.0 * fx * x / z3
        - g_jac[:, 1, 1] * fy / z2
        + g_jac[:, 1, 2] * 2.0 * fy * y / z3
    )
    g_mu = g_p @ wrot

    hidden = ~proj.visible
    for arr in (g_mu, g_rot, g_log_scale):
        arr[hidden] = 0.0
    return g_mu, g_rot, g_log_scale
